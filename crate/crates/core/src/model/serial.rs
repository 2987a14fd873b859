//! Serial reference: whole-matrix forward/backward and training with the
//! same leaf kernels as the sharded path but no grid and no collectives.

use std::time::Instant;

use crate::comm::CommStats;
use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::graph::{CsrMatrix, Dataset, Split};
use crate::pmm::{
    ce_grad, ce_loss_sum, ce_partials, ce_row_max, check_labels, fused_block_bwd, fused_block_fwd, rms_apply,
    rms_grad_gamma, rms_grad_input, rms_row_dot, rms_row_sumsq, DropoutKey, RMS_EPS,
};
use crate::rng::group_seed;
use crate::sampling::{minibatch_from_sample, sample_vertices, SampleSet};
use crate::scalar::Scalar;

use super::dist::DropoutCtx;
use super::train::{split_accuracy, steps_per_epoch, EpochRecord, SplitAccuracy, TrainConfig, TrainReport};
use super::{ModelConfig, Optimizer, Weights};

struct LayerCache<T> {
    agg: Matrix<T>,
    g: Matrix<T>,
    rms: Vec<T>,
    z: Matrix<T>,
    scale: Option<Vec<T>>,
}

/// Activations saved by [`serial_forward`].
pub struct SerialCache<T> {
    x: Matrix<T>,
    layers: Vec<LayerCache<T>>,
    h_last: Matrix<T>,
}

pub fn serial_forward<T: Scalar>(
    cfg: &ModelConfig,
    w: &Weights<T>,
    a: &CsrMatrix<T>,
    x: &Matrix<T>,
    dropout: Option<DropoutCtx>,
) -> Result<(Matrix<T>, SerialCache<T>)> {
    let mut h = x.matmul(&w.w_in)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 1..=cfg.layers {
        let lw = &w.layers[l - 1];
        let agg = a.spmm(&h)?;
        let g = agg.matmul(&lw.w)?;
        let (z, rms) = if cfg.rmsnorm {
            rms_apply(&g, &rms_row_sumsq(&g), lw.gamma.as_slice(), cfg.d_h, RMS_EPS)
        } else {
            (g.clone(), Vec::new())
        };
        let key = dropout.map(|d| {
            (
                DropoutKey {
                    seed: d.seed,
                    dp_group: d.dp_group,
                    step: d.step,
                    layer: l,
                },
                cfg.dropout,
            )
        });
        let residual = cfg.residual.then_some(&h);
        let (out, scale) = fused_block_fwd(&z, residual, key, cfg.relu, 0, 0)?;
        layers.push(LayerCache {
            agg,
            g,
            rms,
            z,
            scale,
        });
        h = out;
    }
    let logits = h.matmul(&w.w_out)?;
    Ok((
        logits,
        SerialCache {
            x: x.clone(),
            layers,
            h_last: h,
        },
    ))
}

/// Masked mean cross-entropy and its gradient.
pub fn serial_loss<T: Scalar>(logits: &Matrix<T>, labels: &[u32], mask: Option<&[bool]>) -> Result<(T, Matrix<T>)> {
    check_labels(labels, logits.cols())?;
    let max = ce_row_max(logits);
    let partials = ce_partials(logits, &max, labels, 0);
    let [sum, count] = ce_loss_sum(&partials, mask);
    let loss = if count == T::zero() { T::zero() } else { sum / count };
    Ok((loss, ce_grad(logits, &max, &partials, labels, 0, mask, count)))
}

pub fn serial_backward<T: Scalar>(
    cfg: &ModelConfig,
    w: &Weights<T>,
    a_t: &CsrMatrix<T>,
    cache: &SerialCache<T>,
    grad_logits: &Matrix<T>,
) -> Result<Weights<T>> {
    if cache.layers.len() != cfg.layers {
        return Err(Error::contract("activation cache does not match the model"));
    }
    let mut grads = w.zeros_like();
    grads.w_out = cache.h_last.matmul_tn(grad_logits)?;
    let mut dh = grad_logits.matmul_nt(&w.w_out)?;
    for l in (1..=cfg.layers).rev() {
        let lc = &cache.layers[l - 1];
        let lw = &w.layers[l - 1];
        let dz = fused_block_bwd(&lc.z, lc.scale.as_deref(), cfg.relu, &dh);
        let dg = if cfg.rmsnorm {
            let gamma = lw.gamma.as_slice();
            let dot = rms_row_dot(&dz, &lc.g, gamma);
            let dgamma = rms_grad_gamma(&dz, &lc.g, &lc.rms);
            grads.layers[l - 1].gamma = Matrix::from_vec(1, dgamma.len(), dgamma)?;
            rms_grad_input(&dz, &lc.g, gamma, &lc.rms, &dot, cfg.d_h)
        } else {
            dz
        };
        grads.layers[l - 1].w = lc.agg.matmul_tn(&dg)?;
        let dagg = dg.matmul_nt(&lw.w)?;
        let mut dh_in = a_t.spmm(&dagg)?;
        if cfg.residual {
            dh_in.add_assign(&dh)?;
        }
        dh = dh_in;
    }
    grads.w_in = cache.x.matmul_tn(&dh)?;
    Ok(grads)
}

/// Loss, logits and gradients of one replica's step.
#[derive(Clone, Debug)]
pub struct StepResult<T> {
    pub loss: T,
    pub logits: Matrix<T>,
    pub grads: Weights<T>,
}

/// One forward/backward on the rescaled mini-batch over `sample`, loss
/// masked to training vertices.
pub fn serial_step<T: Scalar>(
    ds: &Dataset<T>,
    cfg: &ModelConfig,
    w: &Weights<T>,
    sample: SampleSet,
    dropout: Option<DropoutCtx>,
) -> Result<StepResult<T>> {
    let mb = minibatch_from_sample(ds, sample, true)?;
    let mask: Vec<bool> = mb.split.iter().map(|&s| s == Split::Train).collect();
    let (logits, cache) = serial_forward(cfg, w, &mb.adjacency, &mb.features, dropout)?;
    let (loss, dlogits) = serial_loss(&logits, &mb.labels, Some(&mask))?;
    let grads = serial_backward(cfg, w, &mb.adjacency_t, &cache, &dlogits)?;
    Ok(StepResult { loss, logits, grads })
}

/// Full-graph logits (no sampling, no rescaling, dropout off) and accuracy.
pub fn serial_eval<T: Scalar>(ds: &Dataset<T>, cfg: &ModelConfig, w: &Weights<T>) -> Result<(Matrix<T>, SplitAccuracy)> {
    let (logits, _) = serial_forward(cfg, w, &ds.adjacency, &ds.features, None)?;
    let acc = split_accuracy(&logits, &ds.labels, &ds.split);
    Ok((logits, acc))
}

/// Serial trainer emulating `G_d` replicas one after another.
pub fn reference_train<T: Scalar>(ds: &Dataset<T>, tc: &TrainConfig) -> Result<TrainReport<T>> {
    tc.validate(ds)?;
    let cfg = &tc.model;
    let g_d = tc.grid.dims()[0];
    let steps = steps_per_epoch(ds.n(), tc.batch_size, g_d);
    let mut w = Weights::<T>::init(cfg, tc.seed);
    let mut opt = Optimizer::new(tc.optimizer, tc.lr);
    let mut report = TrainReport::empty(w.clone());
    let mut t = 0u64;
    for epoch in 0..tc.epochs {
        let start = Instant::now();
        let mut epoch_loss = 0.0;
        for _ in 0..steps {
            let mut sum: Option<Weights<T>> = None;
            let mut losses = Vec::with_capacity(g_d);
            for d in 0..g_d {
                let sample = sample_vertices(ds.n(), tc.batch_size, group_seed(tc.seed, d), t)?;
                let dropout = (cfg.dropout > 0.0).then_some(DropoutCtx {
                    seed: tc.seed,
                    dp_group: d,
                    step: t,
                });
                let r = serial_step(ds, cfg, &w, sample, dropout)?;
                losses.push(r.loss.as_f64());
                match &mut sum {
                    None => sum = Some(r.grads),
                    Some(s) => {
                        for (a, b) in s.iter_mut().zip(r.grads.iter()) {
                            a.add_assign(b)?;
                        }
                    }
                }
            }
            let mut grads = sum.expect("g_d >= 1");
            let div = T::cast_from_f64(g_d as f64);
            for m in grads.iter_mut() {
                m.as_mut_slice().iter_mut().for_each(|v| *v = *v / div);
            }
            opt.step(&mut w, &grads);
            let step_loss = losses.iter().sum::<f64>() / g_d as f64;
            report.step_losses.push(step_loss);
            epoch_loss += step_loss;
            t += 1;
        }
        let acc = if tc.eval {
            serial_eval(ds, cfg, &w)?.1
        } else {
            SplitAccuracy::default()
        };
        report.epochs.push(EpochRecord {
            epoch,
            step: t,
            loss: epoch_loss / steps as f64,
            acc,
            t_sample_ms: 0.0,
            t_fwd_ms: start.elapsed().as_secs_f64() * 1e3,
            t_bwd_ms: 0.0,
            t_dpsync_ms: 0.0,
            bytes: [0; 4],
        });
    }
    report.weights = w;
    report.stats = CommStats::default();
    Ok(report)
}

/// Outcome of a central finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// Largest per-tensor relative error.
    pub max_rel: f64,
    /// `(tensor, relative error)` for every parameter tensor.
    pub per_tensor: Vec<(String, f64)>,
    pub checked: usize,
}

/// Compare analytic gradients of the masked mini-batch loss against
/// central differences with step `h`, perturbing every parameter element.
///
/// A tensor's error is `max|fd − an| / max(max|an|, max|fd|)`, i.e. relative
/// to the tensor's gradient scale, so near-zero entries do not divide by
/// noise.
pub fn finite_difference_check(
    ds: &Dataset<f64>,
    cfg: &ModelConfig,
    w: &Weights<f64>,
    sample: SampleSet,
    dropout: Option<DropoutCtx>,
    h: f64,
) -> Result<FdReport> {
    let mb = minibatch_from_sample(ds, sample, true)?;
    let mask: Vec<bool> = mb.split.iter().map(|&s| s == Split::Train).collect();
    let loss_at = |w: &Weights<f64>| -> Result<f64> {
        let (logits, _) = serial_forward(cfg, w, &mb.adjacency, &mb.features, dropout)?;
        Ok(serial_loss(&logits, &mb.labels, Some(&mask))?.0)
    };
    let (logits, cache) = serial_forward(cfg, w, &mb.adjacency, &mb.features, dropout)?;
    let (_, dlogits) = serial_loss(&logits, &mb.labels, Some(&mask))?;
    let analytic = serial_backward(cfg, w, &mb.adjacency_t, &cache, &dlogits)?;
    let names = w.names();
    let mut probe = w.clone();
    let mut per_tensor = Vec::with_capacity(names.len());
    let mut checked = 0;
    let n_tensors = names.len();
    for ti in 0..n_tensors {
        let len = w.iter().nth(ti).expect("tensor").as_slice().len();
        let an = analytic.iter().nth(ti).expect("tensor").as_slice().to_vec();
        let mut fd = vec![0.0; len];
        for (k, fdk) in fd.iter_mut().enumerate() {
            let orig = probe.iter().nth(ti).expect("tensor").as_slice()[k];
            probe.iter_mut().nth(ti).expect("tensor").as_mut_slice()[k] = orig + h;
            let up = loss_at(&probe)?;
            probe.iter_mut().nth(ti).expect("tensor").as_mut_slice()[k] = orig - h;
            let down = loss_at(&probe)?;
            probe.iter_mut().nth(ti).expect("tensor").as_mut_slice()[k] = orig;
            *fdk = (up - down) / (2.0 * h);
            checked += 1;
        }
        let diff = fd.iter().zip(&an).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = fd.iter().chain(&an).map(|v| v.abs()).fold(0.0, f64::max);
        let rel = if scale == 0.0 { diff } else { diff / scale };
        per_tensor.push((names[ti].clone(), rel));
    }
    let max_rel = per_tensor.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(FdReport {
        max_rel,
        per_tensor,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, SbmParams};

    fn small(n: usize, seed: u64) -> Dataset<f64> {
        generate_sbm(&SbmParams {
            n,
            n_classes: 3,
            avg_degree: 4.0,
            homophily: 0.8,
            d_in: 5,
            signal: 1.0,
            seed,
        })
        .unwrap()
        .cast()
    }

    #[test]
    fn identity_chain_matches_dense_product() {
        let mut cfg = ModelConfig::new(1, 3, 3, 3);
        cfg.rmsnorm = false;
        cfg.residual = false;
        cfg.relu = false;
        let x = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 - 5.0);
        let mut w = Weights::<f64>::init(&cfg, 1);
        w.layers[0].w = Matrix::identity(3);
        let a = CsrMatrix::identity(4);
        let (logits, _) = serial_forward(&cfg, &w, &a, &x, None).unwrap();
        let want = x.matmul(&w.w_in).unwrap().matmul(&w.w_out).unwrap();
        assert_eq!(logits, want);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let ds = small(12, 1);
        let cfg = ModelConfig::new(2, 5, 4, 3);
        let w = Weights::<f64>::init(&cfg, 2);
        let (logits, cache) = serial_forward(&cfg, &w, &ds.adjacency, &ds.features, None).unwrap();
        let zero = Matrix::zeros(logits.rows(), logits.cols());
        let g = serial_backward(&cfg, &w, &ds.adjacency.transpose(), &cache, &zero).unwrap();
        assert!(g.iter().all(|m| m.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn eval_is_repeatable() {
        let ds = small(20, 3);
        let cfg = ModelConfig::new(2, 5, 4, 3).with_dropout(0.5);
        let w = Weights::<f64>::init(&cfg, 2);
        let a = serial_eval(&ds, &cfg, &w).unwrap();
        let b = serial_eval(&ds, &cfg, &w).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let ds = small(16, 4);
        let mut cfg = ModelConfig::new(2, 5, 8, 3);
        cfg.dropout = 0.0;
        let w = Weights::<f64>::init(&cfg, 5);
        let s = sample_vertices(16, 12, 1, 0).unwrap();
        let r = finite_difference_check(&ds, &cfg, &w, s, None, 1e-5).unwrap();
        assert!(r.max_rel < 1e-6, "{:?}", r.per_tensor);
        assert_eq!(r.checked, w.numel());
    }

    #[test]
    fn dropout_masks_are_replayed_in_backward() {
        let ds = small(14, 6);
        let cfg = ModelConfig::new(2, 5, 6, 3).with_dropout(0.3);
        let w = Weights::<f64>::init(&cfg, 7);
        let s = sample_vertices(14, 10, 2, 0).unwrap();
        let d = Some(DropoutCtx {
            seed: 1,
            dp_group: 0,
            step: 0,
        });
        let r = finite_difference_check(&ds, &cfg, &w, s, d, 1e-5).unwrap();
        assert!(r.max_rel < 1e-6, "{:?}", r.per_tensor);
    }
}
