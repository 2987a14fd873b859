//! Seed derivation and counter-based randomness.
//!
//! Every random decision in a run is a pure function of explicit keys so
//! that ranks never need to agree on generator state at runtime.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream generator used for sampling permutations, weight init and
/// synthetic data. ChaCha8 output is specified bit-for-bit, so streams are
/// identical on every platform.
pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finaliser.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive 64-bit hash of two words.
#[inline]
pub fn mix64(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b.rotate_left(32) ^ 0xD6E8_FEB8_6659_FD93)
}

/// Hash an arbitrary key tuple.
pub fn hash_words(words: &[u64]) -> u64 {
    words.iter().fold(0x243F_6A88_85A3_08D3, |h, &w| mix64(h, w))
}

/// Uniform value in `[0, 1)` from the top 53 bits of a hash.
#[inline]
pub fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Seed of data-parallel group `group`; groups draw independent sample streams.
pub fn group_seed(base_seed: u64, group: usize) -> u64 {
    mix64(base_seed, group as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn chacha_stream_is_stable() {
        // pinned so a dependency bump that changes the stream is caught
        let first = stream(42).next_u64();
        assert_eq!(first, 0xae90_bfb5_395d_5ba1);
        assert_ne!(first, stream(43).next_u64());
    }

    #[test]
    fn mix_is_order_sensitive() {
        assert_ne!(mix64(1, 2), mix64(2, 1));
        assert_ne!(group_seed(7, 0), group_seed(7, 1));
    }

    #[test]
    fn unit_range() {
        assert_eq!(unit_f64(0), 0.0);
        assert!(unit_f64(u64::MAX) < 1.0);
    }
}
