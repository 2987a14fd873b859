//! Element types used by the simulator and bfloat16 round-trip emulation.
//!
//! All arithmetic runs in the element type (`f32` for training, `f64` for
//! gradient checking). bfloat16 only ever appears as a *rounding step* on
//! collective payloads; values are immediately widened back.

use std::fmt::{Debug, Display};

use num_traits::Float;

/// Floating-point element usable in dense blocks, CSR values and collectives.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static
{
    /// Bytes per element on the wire at full precision.
    const BYTES: u64;
    const NAME: &'static str;

    fn cast_from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Round to the nearest bfloat16 value (ties to even) and widen back.
    fn bf16_roundtrip(self) -> Self;
}

impl Scalar for f32 {
    const BYTES: u64 = 4;
    const NAME: &'static str = "f32";

    #[inline]
    fn cast_from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn bf16_roundtrip(self) -> Self {
        bf16_round_f32(self)
    }
}

impl Scalar for f64 {
    const BYTES: u64 = 8;
    const NAME: &'static str = "f64";

    #[inline]
    fn cast_from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn bf16_roundtrip(self) -> Self {
        bf16_round_f64(self)
    }
}

/// Bytes per element of a bfloat16 payload.
pub const BF16_BYTES: u64 = 2;

/// Round an `f32` to bfloat16 precision (8 significant bits, round to nearest
/// even) and return it as `f32`.
///
/// Overflow past the largest finite bfloat16 yields infinity. NaN stays NaN.
#[inline]
pub fn bf16_round_f32(x: f32) -> f32 {
    let bits = x.to_bits();
    if x.is_nan() {
        // keep sign, force a quiet NaN that survives truncation
        return f32::from_bits((bits & 0xFFFF_0000) | 0x0040_0000);
    }
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7FFF + lsb) & 0xFFFF_0000;
    f32::from_bits(rounded)
}

/// Raw 16-bit pattern of the bfloat16 nearest to `x`.
#[inline]
pub fn bf16_bits(x: f32) -> u16 {
    (bf16_round_f32(x).to_bits() >> 16) as u16
}

// Largest finite bfloat16: (2 - 2^-7) * 2^127.
const BF16_MAX: f64 = 3.389_531_389_251_535_5e38;

/// Round an `f64` directly to bfloat16 precision without passing through
/// `f32` (which would round twice).
pub fn bf16_round_f64(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    let mag = x.abs();
    // exponent of the leading bit; bfloat16 subnormals share f32's minimum
    // exponent so the quantum bottoms out at 2^-133.
    let exp = ((mag.to_bits() >> 52) & 0x7FF) as i32 - 1023;
    let quantum_exp = (exp - 7).max(-133);
    let quantum = 2f64.powi(quantum_exp);
    let q = (mag / quantum).round_ties_even() * quantum;
    let q = if q > BF16_MAX { f64::INFINITY } else { q };
    q.copysign(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: pick the nearer of the two bracketing bfloat16
    /// values in exact f64 arithmetic, ties to the even pattern.
    fn oracle(x: f32) -> f32 {
        let bits = x.to_bits();
        let lo = f32::from_bits(bits & 0xFFFF_0000);
        let hi_bits = (bits & 0xFFFF_0000).wrapping_add(0x1_0000);
        let hi = f32::from_bits(hi_bits);
        if bits & 0xFFFF == 0 {
            return x;
        }
        let dl = (x as f64 - lo as f64).abs();
        let dh = if hi.is_infinite() {
            // distance to the would-be next value past the max finite
            let step = lo as f64 - f32::from_bits((bits & 0xFFFF_0000) - 0x1_0000) as f64;
            step.abs() - dl
        } else {
            (hi as f64 - x as f64).abs()
        };
        if dl < dh {
            lo
        } else if dh < dl {
            hi
        } else if (bits >> 16) & 1 == 0 {
            lo
        } else {
            hi
        }
    }

    #[test]
    fn tenth_rounds_up() {
        assert_eq!(bf16_round_f32(0.1), 0.100_097_656_25);
        assert_eq!(bf16_bits(0.1), 0x3DCD);
    }

    #[test]
    fn exact_values_survive() {
        for v in [0.0f32, -0.0, 1.0, -2.0, 0.5, 65536.0, f32::INFINITY] {
            assert_eq!(bf16_round_f32(v).to_bits(), v.to_bits());
        }
        assert!(bf16_round_f32(f32::NAN).is_nan());
    }

    #[test]
    fn ties_go_to_even() {
        // 1 + 2^-8 is halfway between 1 and 1 + 2^-7; even pattern is 1.
        assert_eq!(bf16_round_f32(1.0 + 2f32.powi(-8)), 1.0);
        // 1 + 3*2^-8 is halfway between 1+2^-7 (odd) and 1+2^-6 (even).
        assert_eq!(bf16_round_f32(1.0 + 3.0 * 2f32.powi(-8)), 1.0 + 2f32.powi(-6));
    }

    #[test]
    fn overflow_to_infinity() {
        assert_eq!(bf16_round_f32(f32::MAX), f32::INFINITY);
        assert_eq!(bf16_round_f64(f32::MAX as f64), f64::INFINITY);
        assert_eq!(bf16_round_f64(1e300), f64::INFINITY);
    }

    proptest! {
        #[test]
        fn matches_nearest_oracle(bits in any::<u32>()) {
            let x = f32::from_bits(bits);
            prop_assume!(x.is_finite());
            prop_assert_eq!(bf16_round_f32(x).to_bits(), oracle(x).to_bits());
        }

        #[test]
        fn f64_path_agrees_on_f32_inputs(bits in any::<u32>()) {
            let x = f32::from_bits(bits);
            prop_assume!(x.is_finite());
            prop_assert_eq!(bf16_round_f64(x as f64), bf16_round_f32(x) as f64);
        }

        #[test]
        fn idempotent(x in -1e30f32..1e30f32) {
            let once = bf16_round_f32(x);
            prop_assert_eq!(bf16_round_f32(once).to_bits(), once.to_bits());
        }
    }
}
