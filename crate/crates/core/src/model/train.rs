//! Distributed trainer: one thread per rank, optional per-rank prefetch
//! worker, gradient averaging across replicas and full-graph evaluation.

use std::collections::BTreeMap;
use std::sync::mpsc::sync_channel;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::comm::{run_grid, Axis, CommStats, Communicator, DeviceGrid, FabricConfig, Phase, Precision};
use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::graph::{Dataset, Split};
use crate::pmm::{assemble, parallel_cross_entropy, Ctx, ShardedTensor, INPUT_LAYOUT};
use crate::rng::group_seed;
use crate::sampling::{minibatch_from_sample, sample_vertices, SampleSet};
use crate::scalar::Scalar;

use super::dist::{backward, dp_sync, forward, DropoutCtx, RankBatch, RankModel, RankSampler};
use super::{slice_weights, write_blocks, ModelConfig, Optimizer, OptimizerKind, Weights};

/// Steps per epoch: enough that all replicas together draw about `n` samples.
pub fn steps_per_epoch(n: usize, batch: usize, g_d: usize) -> usize {
    n.div_ceil(batch * g_d).max(1)
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub grid: DeviceGrid,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub prefetch: bool,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Run a full-graph evaluation after every epoch.
    pub eval: bool,
    /// Cap on concurrently computing workers; `None` means one per rank.
    pub threads: Option<usize>,
    pub timeout: Duration,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, grid: DeviceGrid, batch_size: usize) -> Self {
        Self {
            model,
            grid,
            batch_size,
            epochs: 1,
            seed: 0,
            precision: Precision::Fp32,
            prefetch: false,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            eval: true,
            threads: None,
            timeout: Duration::from_secs(120),
        }
    }

    pub fn validate<T: Scalar>(&self, ds: &Dataset<T>) -> Result<()> {
        self.model.validate()?;
        let n = ds.n();
        if self.batch_size < 2 || self.batch_size > n {
            return Err(Error::input(format!("batch size {} outside [2, {n}]", self.batch_size)));
        }
        if self.model.d_in != ds.d_in() || self.model.d_out != ds.n_classes {
            return Err(Error::input(format!(
                "model expects d_in={} d_out={}, dataset has {} features and {} classes",
                self.model.d_in,
                self.model.d_out,
                ds.d_in(),
                ds.n_classes
            )));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::input(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    fn fabric(&self) -> FabricConfig {
        FabricConfig {
            timeout: self.timeout,
            threads: self.threads,
            ..Default::default()
        }
    }
}

/// Fraction of correctly classified vertices per split.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplitAccuracy {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

pub fn split_accuracy<T: Scalar>(logits: &Matrix<T>, labels: &[u32], split: &[Split]) -> SplitAccuracy {
    let pred = logits.argmax_rows();
    let acc = |which: Split| {
        let (mut hit, mut total) = (0usize, 0usize);
        for v in 0..labels.len() {
            if split[v] == which {
                total += 1;
                hit += usize::from(pred[v] == labels[v] as usize);
            }
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    };
    SplitAccuracy {
        train: acc(Split::Train),
        val: acc(Split::Val),
        test: acc(Split::Test),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Global steps completed at the end of this epoch.
    pub step: u64,
    pub loss: f64,
    pub acc: SplitAccuracy,
    pub t_sample_ms: f64,
    pub t_fwd_ms: f64,
    pub t_bwd_ms: f64,
    pub t_dpsync_ms: f64,
    /// Training bytes this epoch, indexed by [`Axis::index`].
    pub bytes: [u64; 4],
}

#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    pub epochs: Vec<EpochRecord>,
    /// Per-step loss averaged over replicas.
    pub step_losses: Vec<f64>,
    /// Loss of each `(step, replica)`.
    pub group_losses: BTreeMap<(u64, usize), f64>,
    /// Adjacency nonzeros built by each `(step, replica)`, summed over its ranks.
    pub sampled_edges: BTreeMap<(u64, usize), u64>,
    pub weights: Weights<T>,
    pub stats: CommStats,
}

impl<T: Scalar> TrainReport<T> {
    pub(crate) fn empty(weights: Weights<T>) -> Self {
        Self {
            epochs: Vec::new(),
            step_losses: Vec::new(),
            group_losses: BTreeMap::new(),
            sampled_edges: BTreeMap::new(),
            weights,
            stats: CommStats::default(),
        }
    }

    pub fn final_accuracy(&self) -> SplitAccuracy {
        self.epochs.last().map(|e| e.acc).unwrap_or_default()
    }
}

/// Results gathered from the rank threads.
struct Sink<T> {
    losses: Mutex<BTreeMap<(u64, usize), f64>>,
    edges: Mutex<BTreeMap<(u64, usize), u64>>,
    timings: Mutex<Vec<[f64; 4]>>,
    eval_logits: Mutex<Vec<Matrix<T>>>,
    weights: Mutex<Weights<T>>,
}

fn lock<X>(m: &Mutex<X>) -> std::sync::MutexGuard<'_, X> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn is_group_root(comm: &Communicator) -> bool {
    let c = comm.coord();
    c.x == 0 && c.y == 0 && c.z == 0
}

/// Forward over the whole graph on one replica; logit blocks land in `out`.
fn eval_into<T: Scalar>(
    comm: &Communicator,
    m: &RankModel,
    w: &Weights<T>,
    batch: &RankBatch<T>,
    precision: Precision,
    out: &Mutex<Matrix<T>>,
) -> Result<()> {
    let ctx = Ctx::new(comm, precision, &batch.split);
    let (logits, _) = forward(&ctx, m, w, batch, None)?;
    lock(out).write_block(logits.rows.start, logits.cols.start, &logits.block);
    Ok(())
}

/// Train on `grid`. Every replica samples its own stream; gradients are
/// averaged over replicas each step.
pub fn train<T: Scalar>(ds: &Dataset<T>, tc: &TrainConfig) -> Result<TrainReport<T>> {
    tc.validate(ds)?;
    let cfg = &tc.model;
    let n = ds.n();
    let g_d = tc.grid.dims()[0];
    let steps = steps_per_epoch(n, tc.batch_size, g_d);
    let total = (steps * tc.epochs) as u64;
    let init = Weights::<T>::init(cfg, tc.seed);
    let sink = Sink {
        losses: Mutex::new(BTreeMap::new()),
        edges: Mutex::new(BTreeMap::new()),
        timings: Mutex::new(vec![[0.0; 4]; total as usize]),
        eval_logits: Mutex::new(Vec::new()),
        weights: Mutex::new(init.zeros_like()),
    };
    let eval_slots: Vec<Mutex<Matrix<T>>> = (0..if tc.eval { tc.epochs } else { 0 })
        .map(|_| Mutex::new(Matrix::zeros(n, cfg.d_out)))
        .collect();

    let (_, stats) = run_grid(tc.grid, tc.fabric(), |comm| {
        let coord = comm.coord();
        let m = RankModel::new(cfg, tc.grid, coord);
        let mut sampler = RankSampler::new(ds, &m)?;
        comm.set_phase(Phase::Sampling);
        let eval_batch = if tc.eval && coord.d == 0 {
            Some(sampler.build(SampleSet::full(n), false)?)
        } else {
            None
        };
        let mut w = slice_weights(&init, &m.specs);
        let mut opt = Optimizer::<T>::new(tc.optimizer, tc.lr);
        let seed = group_seed(tc.seed, coord.d);
        let b = tc.batch_size;
        let limiter = comm.fabric().limiter();

        std::thread::scope(|s| -> Result<()> {
            let (tx, rx) = sync_channel::<Result<RankBatch<T>>>(1);
            let mut inline = None;
            let worker = if tc.prefetch {
                let mut sampler = sampler;
                Some(s.spawn(move || {
                    for t in 0..total {
                        limiter.acquire();
                        let r = sample_vertices(n, b, seed, t).and_then(|smp| sampler.build(smp, true));
                        limiter.release();
                        if tx.send(r).is_err() {
                            break;
                        }
                    }
                }))
            } else {
                drop(tx);
                inline = Some(sampler);
                None
            };

            let result = (|| -> Result<()> {
                let mut t = 0u64;
                for epoch in 0..tc.epochs {
                    for _ in 0..steps {
                        comm.set_step(t);
                        comm.set_phase(Phase::Sampling);
                        let t0 = Instant::now();
                        let batch = match inline.as_mut() {
                            Some(smp) => smp.build(sample_vertices(n, b, seed, t)?, true)?,
                            None => comm
                                .blocking(|| rx.recv())
                                .map_err(|_| Error::contract("prefetch worker stopped early"))??,
                        };
                        let t_sample = ms(t0);
                        *lock(&sink.edges).entry((t, coord.d)).or_default() += batch.sampled_edges();

                        comm.set_phase(Phase::Forward);
                        let t1 = Instant::now();
                        let ctx = Ctx::new(comm, tc.precision, &batch.split);
                        let dropout = (cfg.dropout > 0.0).then_some(DropoutCtx {
                            seed: tc.seed,
                            dp_group: coord.d,
                            step: t,
                        });
                        let (logits, cache) = forward(&ctx, &m, &w, &batch, dropout)?;
                        let (loss, dlogits) =
                            parallel_cross_entropy(&ctx, &logits, &batch.labels, Some(&batch.mask))?;
                        let t_fwd = ms(t1);
                        if is_group_root(comm) {
                            lock(&sink.losses).insert((t, coord.d), loss.as_f64());
                        }

                        comm.set_phase(Phase::Backward);
                        let t2 = Instant::now();
                        let mut grads = backward(&ctx, &m, &w, &batch, &cache, &dlogits)?;
                        let t_bwd = ms(t2);

                        comm.set_phase(Phase::DpSync);
                        let t3 = Instant::now();
                        dp_sync(comm, &mut grads)?;
                        let t_sync = ms(t3);
                        opt.step(&mut w, &grads);
                        if comm.rank() == 0 {
                            lock(&sink.timings)[t as usize] = [t_sample, t_fwd, t_bwd, t_sync];
                        }
                        t += 1;
                    }
                    if let Some(eb) = &eval_batch {
                        comm.set_phase(Phase::Eval);
                        eval_into(comm, &m, &w, eb, tc.precision, &eval_slots[epoch])?;
                    }
                }
                Ok(())
            })();
            drop(rx);
            if let Some(h) = worker {
                comm.blocking(|| h.join())
                    .map_err(|_| Error::contract("prefetch worker panicked"))?;
            }
            result
        })?;

        if coord.d == 0 {
            write_blocks(&mut lock(&sink.weights), &w, &m.specs);
        }
        Ok(())
    })?;

    let losses = sink.losses.into_inner().unwrap_or_else(|e| e.into_inner());
    let timings = sink.timings.into_inner().unwrap_or_else(|e| e.into_inner());
    let _ = sink.eval_logits;
    let mut report = TrainReport::empty(sink.weights.into_inner().unwrap_or_else(|e| e.into_inner()));
    for t in 0..total {
        let l: f64 = (0..g_d).map(|d| losses[&(t, d)]).sum::<f64>() / g_d as f64;
        report.step_losses.push(l);
    }
    for epoch in 0..tc.epochs {
        let range = (epoch * steps) as u64..((epoch + 1) * steps) as u64;
        let mut bytes = [0u64; 4];
        for axis in Axis::ALL {
            bytes[axis.index()] = stats.bytes_where(|k| {
                range.contains(&k.step) && k.axis == axis && k.phase != Phase::Eval
            });
        }
        let sum_t = |i: usize| range.clone().map(|t| timings[t as usize][i]).sum::<f64>();
        let acc = if tc.eval {
            let logits = lock(&eval_slots[epoch]).clone();
            split_accuracy(&logits, &ds.labels, &ds.split)
        } else {
            SplitAccuracy::default()
        };
        report.epochs.push(EpochRecord {
            epoch,
            step: range.end,
            loss: range.clone().map(|t| report.step_losses[t as usize]).sum::<f64>() / steps as f64,
            acc,
            t_sample_ms: sum_t(0),
            t_fwd_ms: sum_t(1),
            t_bwd_ms: sum_t(2),
            t_dpsync_ms: sum_t(3),
            bytes,
        });
    }
    report.group_losses = losses;
    report.sampled_edges = sink.edges.into_inner().unwrap_or_else(|e| e.into_inner());
    report.stats = stats;
    Ok(report)
}

/// One distributed full-graph forward; returns assembled logits and accuracy.
pub fn evaluate_full_graph<T: Scalar>(
    ds: &Dataset<T>,
    cfg: &ModelConfig,
    grid: DeviceGrid,
    weights: &Weights<T>,
    precision: Precision,
) -> Result<(Matrix<T>, SplitAccuracy)> {
    let pmm = DeviceGrid::new(1, grid.dim(Axis::X), grid.dim(Axis::Y), grid.dim(Axis::Z))?;
    let out = Mutex::new(Matrix::zeros(ds.n(), cfg.d_out));
    run_grid(pmm, FabricConfig::default(), |comm| {
        comm.set_phase(Phase::Eval);
        let m = RankModel::new(cfg, pmm, comm.coord());
        let mut sampler = RankSampler::new(ds, &m)?;
        let batch = sampler.build(SampleSet::full(ds.n()), false)?;
        let w = slice_weights(weights, &m.specs);
        eval_into(comm, &m, &w, &batch, precision, &out)
    })?;
    let logits = out.into_inner().unwrap_or_else(|e| e.into_inner());
    let acc = split_accuracy(&logits, &ds.labels, &ds.split);
    Ok((logits, acc))
}

/// One forward/backward step on `grid` from given global weights, with
/// everything reassembled for comparison against the serial reference.
#[derive(Clone, Debug)]
pub struct DistStep<T> {
    /// Per replica.
    pub losses: Vec<T>,
    pub logits: Vec<Matrix<T>>,
    /// Per-replica gradients before averaging.
    pub local_grads: Vec<Weights<T>>,
    /// Gradients after averaging over replicas.
    pub grads: Weights<T>,
    pub stats: CommStats,
}

#[allow(clippy::too_many_arguments)]
pub fn distributed_step<T: Scalar>(
    ds: &Dataset<T>,
    cfg: &ModelConfig,
    grid: DeviceGrid,
    weights: &Weights<T>,
    batch_size: usize,
    seed: u64,
    step: u64,
    precision: Precision,
) -> Result<DistStep<T>> {
    let g_d = grid.dims()[0];
    let zeros = weights.zeros_like();
    let local = Mutex::new(vec![zeros.clone(); g_d]);
    let synced = Mutex::new(zeros);
    type Parts<T> = Vec<(usize, T, ShardedTensor<T>)>;
    let (parts, stats): (Parts<T>, _) = run_grid(grid, FabricConfig::default(), |comm| {
        let coord = comm.coord();
        let m = RankModel::new(cfg, grid, coord);
        let mut sampler = RankSampler::new(ds, &m)?;
        comm.set_step(step);
        comm.set_phase(Phase::Sampling);
        let sample = sample_vertices(ds.n(), batch_size, group_seed(seed, coord.d), step)?;
        let batch = sampler.build(sample, true)?;
        let w = slice_weights(weights, &m.specs);
        comm.set_phase(Phase::Forward);
        let ctx = Ctx::new(comm, precision, &batch.split);
        let dropout = (cfg.dropout > 0.0).then_some(DropoutCtx {
            seed,
            dp_group: coord.d,
            step,
        });
        let (logits, cache) = forward(&ctx, &m, &w, &batch, dropout)?;
        let (loss, dlogits) = parallel_cross_entropy(&ctx, &logits, &batch.labels, Some(&batch.mask))?;
        comm.set_phase(Phase::Backward);
        let mut grads = backward(&ctx, &m, &w, &batch, &cache, &dlogits)?;
        write_blocks(&mut lock(&local)[coord.d], &grads, &m.specs);
        comm.set_phase(Phase::DpSync);
        dp_sync(comm, &mut grads)?;
        if coord.d == 0 {
            write_blocks(&mut lock(&synced), &grads, &m.specs);
        }
        Ok((coord.d, loss, logits))
    })?;
    let mut losses = vec![T::zero(); g_d];
    let mut logits = Vec::with_capacity(g_d);
    for d in 0..g_d {
        let mine: Vec<ShardedTensor<T>> = parts.iter().filter(|p| p.0 == d).map(|p| p.2.clone()).collect();
        losses[d] = parts.iter().find(|p| p.0 == d).expect("replica").1;
        logits.push(assemble(&mine));
    }
    Ok(DistStep {
        losses,
        logits,
        local_grads: local.into_inner().unwrap_or_else(|e| e.into_inner()),
        grads: synced.into_inner().unwrap_or_else(|e| e.into_inner()),
        stats,
    })
}

/// Outcome of comparing every rank's locally built batch with the serial one.
#[derive(Clone, Debug, Default)]
pub struct SamplingCheck {
    /// Human-readable description of each disagreement.
    pub mismatches: Vec<String>,
    pub sampling_bytes: u64,
    pub sampling_calls: u64,
}

impl SamplingCheck {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.sampling_bytes == 0 && self.sampling_calls == 0
    }
}

fn same<T: Scalar>(a: T, b: T) -> bool {
    a.as_f64().to_bits() == b.as_f64().to_bits()
}

/// Paste `block` into `dense` at `(r0, c0)`. Cells already written by a
/// replica must agree bit for bit.
fn paste<T: Scalar>(dense: &mut Matrix<T>, seen: &mut [bool], r0: usize, c0: usize, block: &Matrix<T>) -> bool {
    let mut ok = r0 + block.rows() <= dense.rows() && c0 + block.cols() <= dense.cols();
    if !ok {
        return false;
    }
    for i in 0..block.rows() {
        for j in 0..block.cols() {
            let k = (r0 + i) * dense.cols() + c0 + j;
            let v = block.get(i, j);
            if seen[k] {
                ok &= same(dense.as_slice()[k], v);
            } else {
                seen[k] = true;
                dense.as_mut_slice()[k] = v;
            }
        }
    }
    ok
}

/// Build one step's batch on every rank of `grid` and check the pieces
/// reassemble bit-exactly into the serial mini-batch of each replica.
pub fn sampling_matches_serial<T: Scalar>(
    ds: &Dataset<T>,
    grid: DeviceGrid,
    layers: usize,
    batch_size: usize,
    seed: u64,
    step: u64,
) -> Result<SamplingCheck> {
    let cfg = ModelConfig::new(layers, ds.d_in(), 1, ds.n_classes);
    cfg.validate()?;
    let n = ds.n();
    let (parts, stats) = run_grid(grid, FabricConfig::default(), |comm| {
        comm.set_step(step);
        comm.set_phase(Phase::Sampling);
        let m = RankModel::new(&cfg, grid, comm.coord());
        let mut sampler = RankSampler::new(ds, &m)?;
        let sample = sample_vertices(n, batch_size, group_seed(seed, comm.coord().d), step)?;
        Ok((m, sampler.build(sample, true)?))
    })?;
    let mut out = SamplingCheck {
        sampling_bytes: stats.phase_bytes(Phase::Sampling),
        sampling_calls: stats.calls_where(|k| k.phase == Phase::Sampling),
        ..Default::default()
    };
    for d in 0..grid.dims()[0] {
        let sample = sample_vertices(n, batch_size, group_seed(seed, d), step)?;
        let serial = minibatch_from_sample(ds, sample.clone(), true)?;
        let want = [serial.adjacency.to_dense(), serial.adjacency_t.to_dense()];
        let b = sample.batch_size();
        let mine: Vec<_> = parts.iter().filter(|(m, _)| m.coord.d == d).collect();
        for p in 0..cfg.layers.min(3) {
            for (which, name) in [(0, "adjacency"), (1, "transpose")] {
                let mut dense = Matrix::<T>::zeros(b, b);
                let mut seen = vec![false; b * b];
                let mut ok = true;
                for (_, batch) in &mine {
                    let sh = &batch.adj[p];
                    let pos = |ids: &[usize]| ids.first().map_or(0, |&v| sample.position(v).expect("sampled"));
                    ok &= if which == 0 {
                        paste(&mut dense, &mut seen, pos(&sh.s_r), pos(&sh.s_c), &sh.a_loc.to_dense())
                    } else {
                        paste(&mut dense, &mut seen, pos(&sh.s_c), pos(&sh.s_r), &sh.a_t_loc.to_dense())
                    };
                }
                if !ok || dense.as_slice().iter().zip(want[which].as_slice()).any(|(a, b)| !same(*a, *b)) {
                    out.mismatches.push(format!("replica {d} plane {} {name}", p + 1));
                }
            }
        }
        let mut x = Matrix::<T>::zeros(b, ds.d_in());
        let mut seen = vec![false; b * ds.d_in()];
        let mut ok = true;
        let mut labels = vec![None; b];
        for (m, batch) in &mine {
            let rows = batch.split.range(INPUT_LAYOUT.rows, m.coord.get(INPUT_LAYOUT.rows));
            let cols = crate::dense::block_range(ds.d_in(), grid.dim(INPUT_LAYOUT.cols), m.coord.get(INPUT_LAYOUT.cols));
            ok &= batch.x.shape() == (rows.len(), cols.len());
            ok &= paste(&mut x, &mut seen, rows.start, cols.start, &batch.x);
            let lrows = batch.split.range(m.sched.logits().rows, m.coord.get(m.sched.logits().rows));
            for (i, pos) in lrows.enumerate() {
                let y = batch.labels[i];
                ok &= labels[pos].is_none_or(|old| old == y);
                labels[pos] = Some(y);
                ok &= batch.mask[i] == (serial.split[pos] == Split::Train);
            }
        }
        if !ok || !seen.iter().all(|&s| s) || x != serial.features {
            out.mismatches.push(format!("replica {d} features"));
        }
        if labels.iter().zip(&serial.labels).any(|(a, b)| *a != Some(*b)) {
            out.mismatches.push(format!("replica {d} labels"));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, SbmParams};
    use crate::model::{reference_train, serial_step};

    fn small(n: usize, seed: u64) -> Dataset<f64> {
        generate_sbm(&SbmParams {
            n,
            n_classes: 3,
            avg_degree: 4.0,
            homophily: 0.8,
            d_in: 6,
            signal: 1.0,
            seed,
        })
        .unwrap()
        .cast()
    }

    fn grid(d: usize, x: usize, y: usize, z: usize) -> DeviceGrid {
        DeviceGrid::new(d, x, y, z).unwrap()
    }

    #[test]
    fn steps_cover_the_graph() {
        assert_eq!(steps_per_epoch(100, 25, 1), 4);
        assert_eq!(steps_per_epoch(100, 25, 2), 2);
        assert_eq!(steps_per_epoch(101, 25, 2), 3);
        assert_eq!(steps_per_epoch(10, 10, 4), 1);
    }

    #[test]
    fn accuracy_counts_per_split() {
        let logits = Matrix::from_vec(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let acc = split_accuracy(&logits, &[0, 0, 0, 1], &[Split::Train, Split::Train, Split::Val, Split::Unused]);
        assert_eq!(acc, SplitAccuracy { train: 0.5, val: 1.0, test: 0.0 });
    }

    #[test]
    fn sharded_step_matches_serial() {
        let ds = small(30, 3);
        let cfg = ModelConfig::new(3, 6, 6, 3).with_dropout(0.2);
        let w = Weights::<f64>::init(&cfg, 4);
        for g in [grid(1, 1, 1, 1), grid(1, 2, 1, 3), grid(1, 3, 2, 2), grid(2, 2, 2, 1)] {
            let got = distributed_step(&ds, &cfg, g, &w, 10, 9, 2, Precision::Fp32).unwrap();
            for d in 0..g.dims()[0] {
                let sample = sample_vertices(30, 10, group_seed(9, d), 2).unwrap();
                let want = serial_step(&ds, &cfg, &w, sample, Some(DropoutCtx { seed: 9, dp_group: d, step: 2 })).unwrap();
                assert!((got.losses[d] - want.loss).abs() < 1e-12, "{g}");
                assert!(got.logits[d].max_abs_diff(&want.logits) < 1e-12, "{g}");
                assert!(got.local_grads[d].max_abs_diff(&want.grads) < 1e-12, "{g}");
            }
        }
    }

    #[test]
    fn trainer_matches_reference_and_prefetch_is_invisible() {
        let ds = small(40, 5);
        let mut tc = TrainConfig::new(ModelConfig::new(2, 6, 4, 3), grid(2, 1, 2, 1), 8);
        tc.epochs = 2;
        tc.seed = 11;
        tc.lr = 1e-2;
        let want = reference_train(&ds, &tc).unwrap();
        let got = train(&ds, &tc).unwrap();
        tc.prefetch = true;
        let pre = train(&ds, &tc).unwrap();
        assert_eq!(got.step_losses.len(), 2 * steps_per_epoch(40, 8, 2));
        for (a, b) in got.step_losses.iter().zip(&want.step_losses) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(got.weights.max_abs_diff(&want.weights) < 1e-10);
        assert_eq!(got.step_losses, pre.step_losses);
        assert_eq!(got.weights, pre.weights);
        assert_eq!(got.stats.phase_bytes(Phase::Sampling), 0);
        let (_, acc) = evaluate_full_graph(&ds, &tc.model, tc.grid, &got.weights, Precision::Fp32).unwrap();
        assert_eq!(acc, got.final_accuracy());
    }

    #[test]
    fn rank_batches_reassemble_serial() {
        let ds = small(50, 8);
        for g in [grid(1, 1, 1, 1), grid(1, 2, 3, 1), grid(2, 2, 2, 2), grid(1, 3, 2, 2)] {
            for (seed, step) in [(0, 0), (4, 9)] {
                let r = sampling_matches_serial(&ds, g, 3, 17, seed, step).unwrap();
                assert!(r.passed(), "{g}: {:?}", r.mismatches);
            }
        }
    }

    #[test]
    fn rejects_bad_batch() {
        let ds = small(20, 1);
        let tc = TrainConfig::new(ModelConfig::new(1, 6, 4, 3), grid(1, 1, 1, 1), 1);
        assert!(matches!(train(&ds, &tc), Err(Error::Input(_))));
        let tc = TrainConfig::new(ModelConfig::new(1, 5, 4, 3), grid(1, 1, 1, 1), 4);
        assert!(matches!(train(&ds, &tc), Err(Error::Input(_))));
    }
}
