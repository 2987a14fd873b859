//! Per-rank sharded forward and backward passes.

use crate::comm::{Axis, Communicator, DeviceGrid, Precision, RankCoord, ReduceOp};
use crate::dense::{block_range, Matrix};
use crate::error::{Error, Result};
use crate::graph::{Dataset, Split};
use crate::pmm::{
    fused_elementwise_bwd, fused_elementwise_fwd, parallel_rmsnorm_bwd, parallel_rmsnorm_fwd, reshard,
    sharded_gemm, sharded_gemm_bwd, sharded_spmm, sharded_spmm_bwd, BatchSplit, Ctx, DimKind, DropoutKey,
    FusedCache, RmsCache, RotationSchedule, ShardedTensor, INPUT_LAYOUT, RMS_EPS,
};
use crate::sampling::SampleSet;
use crate::scalar::Scalar;
use crate::shardsample::{
    build_local_from_sample, locate_ranges, CsrShard, MiniBatchShard, RemapTable, VertexSlice,
};

use super::{param_specs, BlockSpec, ModelConfig, Params, Weights};

/// Static placement facts for one rank.
#[derive(Clone, Debug)]
pub struct RankModel {
    pub cfg: ModelConfig,
    pub grid: DeviceGrid,
    pub coord: RankCoord,
    pub specs: Params<BlockSpec>,
    pub sched: RotationSchedule,
}

impl RankModel {
    pub fn new(cfg: &ModelConfig, grid: DeviceGrid, coord: RankCoord) -> Self {
        Self {
            cfg: cfg.clone(),
            grid,
            coord,
            specs: param_specs(cfg, grid, coord),
            sched: cfg.schedule(),
        }
    }

    /// Number of distinct adjacency shards this model needs.
    pub fn planes(&self) -> usize {
        self.cfg.layers.min(3)
    }

    fn vertex_block(&self, n: usize, axis: Axis) -> std::ops::Range<usize> {
        block_range(n, self.grid.dim(axis), self.coord.get(axis))
    }
}

/// Everything one rank needs for one step.
#[derive(Clone, Debug)]
pub struct RankBatch<T> {
    pub sample: SampleSet,
    pub split: BatchSplit,
    /// Adjacency shard for each distinct rotation plane (layer 1, 2, 3).
    pub adj: Vec<MiniBatchShard<T>>,
    /// Input features on (X,Z).
    pub x: Matrix<T>,
    /// Labels and loss mask for the logit rows held here.
    pub labels: Vec<u32>,
    pub mask: Vec<bool>,
}

impl<T> RankBatch<T> {
    /// Edges in this rank's adjacency blocks.
    pub fn sampled_edges(&self) -> u64 {
        self.adj.iter().map(|s| s.work.nnz_kept).sum()
    }
}

/// Rank-local data and scratch for building batches without communication.
#[derive(Debug)]
pub struct RankSampler<T> {
    shards: Vec<CsrShard<T>>,
    features: VertexSlice<T>,
    labels: VertexSlice<T>,
    remap: RemapTable,
    grid: DeviceGrid,
}

impl<T: Scalar> RankSampler<T> {
    pub fn new(ds: &Dataset<T>, m: &RankModel) -> Result<Self> {
        let n = ds.n();
        let shards = (1..=m.planes())
            .map(|l| {
                let lay = m.sched.adjacency(l);
                CsrShard::from_global(&ds.adjacency, m.vertex_block(n, lay.rows), m.vertex_block(n, lay.cols))
            })
            .collect::<Result<Vec<_>>>()?;
        let features = VertexSlice::from_dataset(
            ds,
            m.vertex_block(n, INPUT_LAYOUT.rows),
            block_range(ds.d_in(), m.grid.dim(INPUT_LAYOUT.cols), m.coord.get(INPUT_LAYOUT.cols)),
        );
        let labels = VertexSlice::from_dataset(ds, m.vertex_block(n, m.sched.logits().rows), 0..0);
        Ok(Self {
            shards,
            features,
            labels,
            remap: RemapTable::new(n),
            grid: m.grid,
        })
    }

    /// Build this rank's share of the mini-batch over `sample`. Training
    /// batches rescale edges and mask the loss to training vertices.
    pub fn build(&mut self, sample: SampleSet, training: bool) -> Result<RankBatch<T>> {
        let adj = self
            .shards
            .iter()
            .map(|s| build_local_from_sample(s, None, &sample, &mut self.remap, training))
            .collect::<Result<Vec<_>>>()?;
        let (feat_rows, _) = locate_ranges(&sample, self.features.rows.clone(), 0..0);
        let (x, _, _) = self.features.gather(feat_rows)?;
        let (label_rows, _) = locate_ranges(&sample, self.labels.rows.clone(), 0..0);
        let (_, labels, split) = self.labels.gather(label_rows)?;
        let mask = split.iter().map(|&s| !training || s == Split::Train).collect();
        Ok(RankBatch {
            split: BatchSplit::new(&sample, self.grid),
            sample,
            adj,
            x,
            labels,
            mask,
        })
    }
}

/// Keys for dropout masks during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutCtx {
    pub seed: u64,
    pub dp_group: usize,
    pub step: u64,
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    h_in: ShardedTensor<T>,
    agg: ShardedTensor<T>,
    rms: Option<RmsCache<T>>,
    fused: FusedCache<T>,
}

/// Activations saved by [`forward`].
#[derive(Clone, Debug)]
pub struct RankCache<T> {
    x: ShardedTensor<T>,
    layers: Vec<LayerCache<T>>,
    h_last: ShardedTensor<T>,
}

fn view<T: Scalar>(block: &Matrix<T>, spec: &BlockSpec, shape: (usize, usize)) -> ShardedTensor<T> {
    ShardedTensor {
        block: block.clone(),
        layout: spec.layout,
        rows: spec.rows.clone(),
        cols: spec.cols.clone(),
        shape,
        kinds: (DimKind::Even, DimKind::Even),
    }
}

/// Sharded forward pass; returns logits on the schedule's logit layout.
pub fn forward<T: Scalar>(
    ctx: &Ctx<'_>,
    m: &RankModel,
    w: &Weights<T>,
    batch: &RankBatch<T>,
    dropout: Option<DropoutCtx>,
) -> Result<(ShardedTensor<T>, RankCache<T>)> {
    let cfg = &m.cfg;
    let b = batch.sample.batch_size();
    let x = ShardedTensor {
        block: batch.x.clone(),
        layout: INPUT_LAYOUT,
        rows: batch.split.range(INPUT_LAYOUT.rows, m.coord.get(INPUT_LAYOUT.rows)),
        cols: block_range(cfg.d_in, m.grid.dim(INPUT_LAYOUT.cols), m.coord.get(INPUT_LAYOUT.cols)),
        shape: (b, cfg.d_in),
        kinds: (DimKind::Batch, DimKind::Even),
    };
    let mut h = sharded_gemm(ctx, &x, &view(&w.w_in, &m.specs.w_in, (cfg.d_in, cfg.d_h)))?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 1..=cfg.layers {
        let lw = &w.layers[l - 1];
        let ls = &m.specs.layers[l - 1];
        let shard = &batch.adj[RotationSchedule::shard_index(l)];
        let agg = sharded_spmm(ctx, &shard.a_loc, &h)?;
        let g = sharded_gemm(ctx, &agg, &view(&lw.w, &ls.w, (cfg.d_h, cfg.d_h)))?;
        let (z, rms) = if cfg.rmsnorm {
            let (z, c) = parallel_rmsnorm_fwd(ctx, &g, lw.gamma.as_slice(), RMS_EPS)?;
            (z, Some(c))
        } else {
            (g, None)
        };
        let residual = if cfg.residual {
            Some(reshard(ctx, &h, z.layout)?)
        } else {
            None
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
        let (out, fused) = fused_elementwise_fwd(&z, residual.as_ref(), key, cfg.relu)?;
        layers.push(LayerCache {
            h_in: h,
            agg,
            rms,
            fused,
        });
        h = out;
    }
    let logits = sharded_gemm(ctx, &h, &view(&w.w_out, &m.specs.w_out, (cfg.d_h, cfg.d_out)))?;
    Ok((logits, RankCache { x, layers, h_last: h }))
}

/// Sharded backward pass from `∂L/∂logits`; returns this rank's gradient blocks.
pub fn backward<T: Scalar>(
    ctx: &Ctx<'_>,
    m: &RankModel,
    w: &Weights<T>,
    batch: &RankBatch<T>,
    cache: &RankCache<T>,
    grad_logits: &ShardedTensor<T>,
) -> Result<Weights<T>> {
    let cfg = &m.cfg;
    if cache.layers.len() != cfg.layers {
        return Err(Error::contract("activation cache does not match the model"));
    }
    let mut grads = w.zeros_like();
    let (dh, dw_out) = sharded_gemm_bwd(
        ctx,
        &cache.h_last,
        &view(&w.w_out, &m.specs.w_out, (cfg.d_h, cfg.d_out)),
        grad_logits,
        true,
    )?;
    grads.w_out = dw_out;
    let mut dh = dh.expect("requested");
    for l in (1..=cfg.layers).rev() {
        let lc = &cache.layers[l - 1];
        let lw = &w.layers[l - 1];
        let ls = &m.specs.layers[l - 1];
        let dz = fused_elementwise_bwd(&lc.fused, &dh);
        let dg = match &lc.rms {
            Some(rc) => {
                let (dg, dgamma) = parallel_rmsnorm_bwd(ctx, rc, lw.gamma.as_slice(), &dz)?;
                grads.layers[l - 1].gamma = Matrix::from_vec(1, dgamma.len(), dgamma)?;
                dg
            }
            None => dz,
        };
        let (dagg, dw) = sharded_gemm_bwd(ctx, &lc.agg, &view(&lw.w, &ls.w, (cfg.d_h, cfg.d_h)), &dg, true)?;
        grads.layers[l - 1].w = dw;
        let shard = &batch.adj[RotationSchedule::shard_index(l)];
        let mut dh_in = sharded_spmm_bwd(ctx, &shard.a_t_loc, &dagg.expect("requested"))?;
        if cfg.residual {
            let skip = reshard(ctx, &dh, lc.h_in.layout)?;
            dh_in.block.add_assign(&skip.block)?;
        }
        dh = dh_in;
    }
    let (_, dw_in) = sharded_gemm_bwd(
        ctx,
        &cache.x,
        &view(&w.w_in, &m.specs.w_in, (cfg.d_in, cfg.d_h)),
        &dh,
        false,
    )?;
    grads.w_in = dw_in;
    Ok(grads)
}

/// Average gradient blocks across data-parallel replicas: one fused
/// full-precision all-reduce over D, then division by `G_d`.
pub fn dp_sync<T: Scalar>(comm: &Communicator, grads: &mut Weights<T>) -> Result<()> {
    let mut flat: Vec<T> = grads.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    comm.all_reduce(Axis::D, &mut flat, ReduceOp::Sum, Precision::Fp32)?;
    let g_d = T::cast_from_f64(comm.group_size(Axis::D) as f64);
    let mut it = flat.into_iter();
    for m in grads.iter_mut() {
        for v in m.as_mut_slice() {
            *v = it.next().expect("length") / g_d;
        }
    }
    Ok(())
}
