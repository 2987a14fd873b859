//! 3D parallel matrix operators over the X/Y/Z axes of one replica.
//!
//! A [`Layout`] names the grid axis that partitions a tensor's rows and the
//! axis that partitions its columns; the tensor is replicated along the
//! remaining axis. With a feature tensor on `(r, c)` and third axis `t`:
//!
//! * the adjacency block lives on `(t, r)`, so `Ã·F` reduces over `r` and
//!   lands on `(t, c)`;
//! * the weight lives on `(c, r)`, so `H·W` reduces over `c` and lands on
//!   `(t, r)`.
//!
//! Each layer therefore moves the features one step around the cycle
//! `(X,Y) → (Z,X) → (Y,Z) → (X,Y)`, and the adjacency plane rotates
//! ZX → YZ → XY with period three.
//!
//! Leaf kernels are public so the serial reference trainer can run the exact
//! same arithmetic without any collectives.

use std::fmt;
use std::ops::Range;

use crate::comm::{Axis, Communicator, DeviceGrid, Precision, ReduceOp};
use crate::dense::{block_range, Matrix};
use crate::error::{Error, Result};
use crate::graph::CsrMatrix;
use crate::rng::{hash_words, unit_f64};
use crate::sampling::SampleSet;
use crate::scalar::Scalar;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Plane {
    XY,
    YZ,
    ZX,
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Plane::XY => "XY",
            Plane::YZ => "YZ",
            Plane::ZX => "ZX",
        };
        f.write_str(s)
    }
}

/// Ordered (row axis, column axis) pair over X/Y/Z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Layout {
    pub rows: Axis,
    pub cols: Axis,
}

impl Layout {
    pub const fn new(rows: Axis, cols: Axis) -> Self {
        Self { rows, cols }
    }

    /// Axis along which the tensor is replicated.
    pub fn third(&self) -> Axis {
        match (self.rows, self.cols) {
            (Axis::X, Axis::Y) | (Axis::Y, Axis::X) => Axis::Z,
            (Axis::Y, Axis::Z) | (Axis::Z, Axis::Y) => Axis::X,
            (Axis::Z, Axis::X) | (Axis::X, Axis::Z) => Axis::Y,
            _ => panic!("layout {self:?} is not a plane"),
        }
    }

    pub fn plane(&self) -> Plane {
        match self.third() {
            Axis::Z => Plane::XY,
            Axis::X => Plane::YZ,
            _ => Plane::ZX,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.rows != self.cols && self.rows != Axis::D && self.cols != Axis::D
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.rows, self.cols)
    }
}

/// Layout of the raw input features and of the input-projection weight.
pub const INPUT_LAYOUT: Layout = Layout::new(Axis::X, Axis::Z);
pub const W_IN_LAYOUT: Layout = Layout::new(Axis::Z, Axis::Y);
/// Layout of the first layer's input (output of the input projection).
pub const H0_LAYOUT: Layout = Layout::new(Axis::X, Axis::Y);

/// Plane holding the adjacency for 1-based `layer`.
pub fn rotation_plane(layer: usize) -> Plane {
    assert!(layer >= 1, "layers are 1-based");
    [Plane::ZX, Plane::YZ, Plane::XY][(layer - 1) % 3]
}

/// Per-layer layouts for an `L`-layer model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RotationSchedule {
    inputs: Vec<Layout>,
}

impl RotationSchedule {
    pub fn new(layers: usize) -> Self {
        let mut inputs = Vec::with_capacity(layers + 1);
        let mut cur = H0_LAYOUT;
        for _ in 0..=layers {
            inputs.push(cur);
            cur = Layout::new(cur.third(), cur.rows);
        }
        Self { inputs }
    }

    pub fn layers(&self) -> usize {
        self.inputs.len() - 1
    }

    /// Feature layout entering 1-based `layer`.
    pub fn input(&self, layer: usize) -> Layout {
        self.inputs[layer - 1]
    }

    /// Feature layout leaving 1-based `layer`.
    pub fn output(&self, layer: usize) -> Layout {
        self.inputs[layer]
    }

    /// Adjacency block layout for 1-based `layer`: (third, input rows).
    pub fn adjacency(&self, layer: usize) -> Layout {
        let f = self.input(layer);
        Layout::new(f.third(), f.rows)
    }

    /// Weight layout for 1-based `layer`: (input cols, input rows).
    pub fn weight(&self, layer: usize) -> Layout {
        let f = self.input(layer);
        Layout::new(f.cols, f.rows)
    }

    /// Layout of the last hidden features.
    pub fn last(&self) -> Layout {
        *self.inputs.last().expect("non-empty")
    }

    /// Output-head weight layout.
    pub fn w_out(&self) -> Layout {
        let h = self.last();
        Layout::new(h.cols, h.third())
    }

    /// Logit layout.
    pub fn logits(&self) -> Layout {
        let h = self.last();
        Layout::new(h.rows, h.third())
    }

    /// Index of the distinct adjacency shard (0..3) used by `layer`.
    pub fn shard_index(layer: usize) -> usize {
        (layer - 1) % 3
    }
}

/// How a tensor dimension is split across an axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DimKind {
    /// Sampled vertices, split by which contiguous vertex block they fall in.
    Batch,
    /// Feature dimension, split into even blocks.
    Even,
}

/// Sample-dependent offsets of the batch dimension along X, Y and Z.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchSplit {
    offsets: [Vec<usize>; 4],
    len: usize,
}

impl BatchSplit {
    pub fn new(sample: &SampleSet, grid: DeviceGrid) -> Self {
        let n = sample.graph_size();
        let mk = |axis: Axis| -> Vec<usize> {
            let g = grid.dim(axis);
            (0..=g)
                .map(|i| {
                    if i == g {
                        sample.batch_size()
                    } else {
                        sample.rank_of(block_range(n, g, i).start)
                    }
                })
                .collect()
        };
        Self {
            offsets: [vec![0, sample.batch_size()], mk(Axis::X), mk(Axis::Y), mk(Axis::Z)],
            len: sample.batch_size(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self, axis: Axis, coord: usize) -> Range<usize> {
        let o = &self.offsets[axis.index()];
        o[coord]..o[coord + 1]
    }
}

/// Dense block of a globally `shape`d matrix laid out on `layout`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardedTensor<T> {
    pub block: Matrix<T>,
    pub layout: Layout,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub shape: (usize, usize),
    pub kinds: (DimKind, DimKind),
}

impl<T: Scalar> ShardedTensor<T> {
    /// Cut this rank's block out of a global matrix.
    pub fn from_global(ctx: &Ctx<'_>, global: &Matrix<T>, layout: Layout, kinds: (DimKind, DimKind)) -> Self {
        let shape = global.shape();
        let rows = ctx.range(kinds.0, shape.0, layout.rows);
        let cols = ctx.range(kinds.1, shape.1, layout.cols);
        Self {
            block: global.slice(rows.clone(), cols.clone()),
            layout,
            rows,
            cols,
            shape,
            kinds,
        }
    }

    fn check(&self) -> Result<()> {
        if self.block.shape() != (self.rows.len(), self.cols.len()) {
            return Err(Error::contract(format!(
                "block {:?} does not match ranges {:?}x{:?}",
                self.block.shape(),
                self.rows,
                self.cols
            )));
        }
        Ok(())
    }
}

/// Write every block into a global matrix. Replicated blocks overwrite each
/// other with identical values.
pub fn assemble<T: Scalar>(parts: &[ShardedTensor<T>]) -> Matrix<T> {
    let shape = parts[0].shape;
    let mut out = Matrix::zeros(shape.0, shape.1);
    for p in parts {
        out.write_block(p.rows.start, p.cols.start, &p.block);
    }
    out
}

/// Per-rank operator context.
pub struct Ctx<'a> {
    pub comm: &'a Communicator,
    pub precision: Precision,
    pub batch: &'a BatchSplit,
}

impl<'a> Ctx<'a> {
    pub fn new(comm: &'a Communicator, precision: Precision, batch: &'a BatchSplit) -> Self {
        Self { comm, precision, batch }
    }

    pub fn coord(&self, axis: Axis) -> usize {
        self.comm.coord().get(axis)
    }

    pub fn range_at(&self, kind: DimKind, len: usize, axis: Axis, coord: usize) -> Range<usize> {
        match kind {
            DimKind::Batch => self.batch.range(axis, coord),
            DimKind::Even => block_range(len, self.comm.group_size(axis), coord),
        }
    }

    pub fn range(&self, kind: DimKind, len: usize, axis: Axis) -> Range<usize> {
        self.range_at(kind, len, axis, self.coord(axis))
    }

    fn reduce<T: Scalar>(&self, axis: Axis, block: &mut Matrix<T>, precision: Precision) -> Result<()> {
        self.comm.all_reduce(axis, block.as_mut_slice(), ReduceOp::Sum, precision)
    }
}

/// `Ã·F`: local product reduced over the feature row axis.
pub fn sharded_spmm<T: Scalar>(ctx: &Ctx<'_>, a_loc: &CsrMatrix<T>, f: &ShardedTensor<T>) -> Result<ShardedTensor<T>> {
    f.check()?;
    let t = f.layout.third();
    let rows = ctx.range(DimKind::Batch, f.shape.0, t);
    if a_loc.n_cols() != f.block.rows() || a_loc.n_rows() != rows.len() {
        return Err(Error::contract(format!(
            "spmm shard {}x{} against features {:?} with output rows {:?}",
            a_loc.n_rows(),
            a_loc.n_cols(),
            f.block.shape(),
            rows
        )));
    }
    let mut local = a_loc.spmm(&f.block)?;
    ctx.reduce(f.layout.rows, &mut local, ctx.precision)?;
    Ok(ShardedTensor {
        block: local,
        layout: Layout::new(t, f.layout.cols),
        rows,
        cols: f.cols.clone(),
        shape: f.shape,
        kinds: f.kinds,
    })
}

/// Gradient of [`sharded_spmm`] with respect to `F`, using `Ãᵀ`.
pub fn sharded_spmm_bwd<T: Scalar>(
    ctx: &Ctx<'_>,
    a_t_loc: &CsrMatrix<T>,
    grad_h: &ShardedTensor<T>,
) -> Result<ShardedTensor<T>> {
    grad_h.check()?;
    let r = grad_h.layout.third();
    let rows = ctx.range(DimKind::Batch, grad_h.shape.0, r);
    if a_t_loc.n_cols() != grad_h.block.rows() || a_t_loc.n_rows() != rows.len() {
        return Err(Error::contract(format!(
            "spmm backward shard {}x{} against gradient {:?}",
            a_t_loc.n_rows(),
            a_t_loc.n_cols(),
            grad_h.block.shape()
        )));
    }
    let mut local = a_t_loc.spmm(&grad_h.block)?;
    ctx.reduce(grad_h.layout.rows, &mut local, ctx.precision)?;
    Ok(ShardedTensor {
        block: local,
        layout: Layout::new(r, grad_h.layout.cols),
        rows,
        cols: grad_h.cols.clone(),
        shape: grad_h.shape,
        kinds: grad_h.kinds,
    })
}

/// `H·W` with `H` on `(p, q)` and `W` on `(q, s)`; reduced over `q`, result on `(p, s)`.
pub fn sharded_gemm<T: Scalar>(ctx: &Ctx<'_>, h: &ShardedTensor<T>, w: &ShardedTensor<T>) -> Result<ShardedTensor<T>> {
    h.check()?;
    w.check()?;
    if h.layout.cols != w.layout.rows || w.layout.cols != h.layout.third() || h.cols != w.rows {
        return Err(Error::contract(format!(
            "gemm {} {:?} · {} {:?}",
            h.layout, h.cols, w.layout, w.rows
        )));
    }
    let mut local = h.block.matmul(&w.block)?;
    ctx.reduce(h.layout.cols, &mut local, ctx.precision)?;
    Ok(ShardedTensor {
        block: local,
        layout: Layout::new(h.layout.rows, w.layout.cols),
        rows: h.rows.clone(),
        cols: w.cols.clone(),
        shape: (h.shape.0, w.shape.1),
        kinds: (h.kinds.0, w.kinds.1),
    })
}

/// Gradients of [`sharded_gemm`]: `∇H = ∇O·Wᵀ` reduced over `s` and
/// `∇W = Hᵀ·∇O` reduced over `p`. The two reductions run on orthogonal
/// groups and are in flight together. `∇H` is skipped when not needed.
pub fn sharded_gemm_bwd<T: Scalar>(
    ctx: &Ctx<'_>,
    h: &ShardedTensor<T>,
    w: &ShardedTensor<T>,
    grad_out: &ShardedTensor<T>,
    need_input_grad: bool,
) -> Result<(Option<ShardedTensor<T>>, Matrix<T>)> {
    grad_out.check()?;
    if grad_out.layout != Layout::new(h.layout.rows, w.layout.cols) || grad_out.rows != h.rows || grad_out.cols != w.cols {
        return Err(Error::contract(format!(
            "gemm backward gradient {} {:?}x{:?}",
            grad_out.layout, grad_out.rows, grad_out.cols
        )));
    }
    let gw_local = h.block.matmul_tn(&grad_out.block)?;
    let pw = ctx
        .comm
        .post_all_reduce(h.layout.rows, gw_local.into_vec(), ReduceOp::Sum, ctx.precision)?;
    let ph = if need_input_grad {
        let gh_local = grad_out.block.matmul_nt(&w.block)?;
        Some(
            ctx.comm
                .post_all_reduce(w.layout.cols, gh_local.into_vec(), ReduceOp::Sum, ctx.precision)?,
        )
    } else {
        None
    };
    let gh = match ph {
        Some(p) => {
            let v = ctx.comm.wait(p)?;
            Some(ShardedTensor {
                block: Matrix::from_vec(h.rows.len(), h.cols.len(), v.to_vec())?,
                layout: h.layout,
                rows: h.rows.clone(),
                cols: h.cols.clone(),
                shape: h.shape,
                kinds: h.kinds,
            })
        }
        None => None,
    };
    let gw = ctx.comm.wait(pw)?;
    Ok((gh, Matrix::from_vec(w.rows.len(), w.cols.len(), gw.to_vec())?))
}

// ---- RMSNorm -----------------------------------------------------------

pub fn rms_row_sumsq<T: Scalar>(x: &Matrix<T>) -> Vec<T> {
    (0..x.rows()).map(|i| x.row(i).iter().fold(T::zero(), |a, &v| a + v * v)).collect()
}

/// `y = γ ⊙ x / rms` with `rms = sqrt(ss/d + eps)`. Returns `(y, rms)`.
pub fn rms_apply<T: Scalar>(x: &Matrix<T>, ss: &[T], gamma: &[T], d: usize, eps: f64) -> (Matrix<T>, Vec<T>) {
    let d = T::cast_from_f64(d as f64);
    let eps = T::cast_from_f64(eps);
    let rms: Vec<T> = ss.iter().map(|&s| (s / d + eps).sqrt()).collect();
    let y = Matrix::from_fn(x.rows(), x.cols(), |i, j| gamma[j] * x.get(i, j) / rms[i]);
    (y, rms)
}

/// Row sums of `dy ⊙ γ ⊙ x`.
pub fn rms_row_dot<T: Scalar>(dy: &Matrix<T>, x: &Matrix<T>, gamma: &[T]) -> Vec<T> {
    (0..x.rows())
        .map(|i| {
            dy.row(i)
                .iter()
                .zip(x.row(i))
                .zip(gamma)
                .fold(T::zero(), |a, ((&g, &v), &w)| a + g * w * v)
        })
        .collect()
}

/// `dx = γ⊙dy/rms − x·dot/(d·rms³)`.
pub fn rms_grad_input<T: Scalar>(
    dy: &Matrix<T>,
    x: &Matrix<T>,
    gamma: &[T],
    rms: &[T],
    dot: &[T],
    d: usize,
) -> Matrix<T> {
    let d = T::cast_from_f64(d as f64);
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        let r = rms[i];
        gamma[j] * dy.get(i, j) / r - x.get(i, j) * dot[i] / (d * r * r * r)
    })
}

/// Column sums of `dy ⊙ x / rms`.
pub fn rms_grad_gamma<T: Scalar>(dy: &Matrix<T>, x: &Matrix<T>, rms: &[T]) -> Vec<T> {
    let mut g = vec![T::zero(); x.cols()];
    for i in 0..x.rows() {
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = *gj + dy.get(i, j) * x.get(i, j) / rms[i];
        }
    }
    g
}

#[derive(Clone, Debug)]
pub struct RmsCache<T> {
    pub x: ShardedTensor<T>,
    pub rms: Vec<T>,
}

/// Row-wise RMSNorm of a column-sharded tensor; the sum of squares is
/// all-reduced over the column axis in full precision.
pub fn parallel_rmsnorm_fwd<T: Scalar>(
    ctx: &Ctx<'_>,
    x: &ShardedTensor<T>,
    gamma: &[T],
    eps: f64,
) -> Result<(ShardedTensor<T>, RmsCache<T>)> {
    x.check()?;
    if gamma.len() != x.cols.len() {
        return Err(Error::contract(format!(
            "gamma shard of {} for {} columns",
            gamma.len(),
            x.cols.len()
        )));
    }
    let mut ss = rms_row_sumsq(&x.block);
    ctx.comm.all_reduce(x.layout.cols, &mut ss, ReduceOp::Sum, Precision::Fp32)?;
    let (y, rms) = rms_apply(&x.block, &ss, gamma, x.shape.1, eps);
    let out = ShardedTensor { block: y, ..x.clone() };
    Ok((out, RmsCache { x: x.clone(), rms }))
}

/// Returns `(∇x, ∇γ shard)`; `∇γ` is summed over the row axis.
pub fn parallel_rmsnorm_bwd<T: Scalar>(
    ctx: &Ctx<'_>,
    cache: &RmsCache<T>,
    gamma: &[T],
    dy: &ShardedTensor<T>,
) -> Result<(ShardedTensor<T>, Vec<T>)> {
    let x = &cache.x;
    if dy.layout != x.layout || dy.block.shape() != x.block.shape() {
        return Err(Error::contract("rmsnorm backward gradient does not match cache"));
    }
    let dot = rms_row_dot(&dy.block, &x.block, gamma);
    let pd = ctx.comm.post_all_reduce(x.layout.cols, dot, ReduceOp::Sum, Precision::Fp32)?;
    let gg = rms_grad_gamma(&dy.block, &x.block, &cache.rms);
    let pg = ctx.comm.post_all_reduce(x.layout.rows, gg, ReduceOp::Sum, Precision::Fp32)?;
    let dot = ctx.comm.wait(pd)?;
    let dx = rms_grad_input(&dy.block, &x.block, gamma, &cache.rms, &dot, x.shape.1);
    let gg = ctx.comm.wait(pg)?;
    Ok((ShardedTensor { block: dx, ..x.clone() }, gg.to_vec()))
}

// ---- fused ReLU + dropout + residual ---------------------------------------

/// Identity of one dropout mask. Masks depend on global coordinates only, so
/// every replica of a block draws the same mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub dp_group: usize,
    pub step: u64,
    pub layer: usize,
}

impl DropoutKey {
    /// Inverted-dropout multiplier for global element `(row, col)`.
    pub fn scale(&self, rate: f64, row: usize, col: usize) -> f64 {
        let h = hash_words(&[self.seed, self.dp_group as u64, self.step, self.layer as u64, row as u64, col as u64]);
        if unit_f64(h) < rate {
            0.0
        } else {
            1.0 / (1.0 - rate)
        }
    }
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::input(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// `out = dropout(relu(z)) + residual` on a block whose top-left element has
/// global coordinates `(row0, col0)`. Returns the output and the dropout
/// multipliers when dropout is active.
pub fn fused_block_fwd<T: Scalar>(
    z: &Matrix<T>,
    residual: Option<&Matrix<T>>,
    dropout: Option<(DropoutKey, f64)>,
    relu: bool,
    row0: usize,
    col0: usize,
) -> Result<(Matrix<T>, Option<Vec<T>>)> {
    if let Some(r) = residual {
        if r.shape() != z.shape() {
            return Err(Error::contract(format!("residual {:?} vs {:?}", r.shape(), z.shape())));
        }
    }
    let scale: Option<Vec<T>> = match dropout {
        Some((key, rate)) if rate > 0.0 => {
            check_dropout_rate(rate)?;
            Some(
                (0..z.rows() * z.cols())
                    .map(|k| {
                        let (i, j) = (k / z.cols().max(1), k % z.cols().max(1));
                        T::cast_from_f64(key.scale(rate, row0 + i, col0 + j))
                    })
                    .collect(),
            )
        }
        Some((_, rate)) => {
            check_dropout_rate(rate)?;
            None
        }
        None => None,
    };
    let mut out = z.clone();
    for (k, v) in out.as_mut_slice().iter_mut().enumerate() {
        let mut a = if relu { v.max(T::zero()) } else { *v };
        if let Some(s) = &scale {
            a = a * s[k];
        }
        *v = a;
    }
    if let Some(r) = residual {
        out.add_assign(r)?;
    }
    Ok((out, scale))
}

/// Gradient reaching `z` through dropout and ReLU; the residual branch
/// receives `grad` unchanged.
pub fn fused_block_bwd<T: Scalar>(z: &Matrix<T>, scale: Option<&[T]>, relu: bool, grad: &Matrix<T>) -> Matrix<T> {
    let mut out = grad.clone();
    for (k, g) in out.as_mut_slice().iter_mut().enumerate() {
        let mut v = *g;
        if let Some(s) = scale {
            v = v * s[k];
        }
        if relu && z.as_slice()[k] <= T::zero() {
            v = T::zero();
        }
        *g = v;
    }
    out
}

#[derive(Clone, Debug)]
pub struct FusedCache<T> {
    pub z: Matrix<T>,
    pub scale: Option<Vec<T>>,
    pub relu: bool,
}

/// Sharded form of [`fused_block_fwd`]; `residual` must already be on `z`'s layout.
pub fn fused_elementwise_fwd<T: Scalar>(
    z: &ShardedTensor<T>,
    residual: Option<&ShardedTensor<T>>,
    dropout: Option<(DropoutKey, f64)>,
    relu: bool,
) -> Result<(ShardedTensor<T>, FusedCache<T>)> {
    if let Some(r) = residual {
        if r.layout != z.layout || r.rows != z.rows || r.cols != z.cols {
            return Err(Error::contract(format!(
                "residual on {} must be resharded to {} first",
                r.layout, z.layout
            )));
        }
    }
    let (out, scale) = fused_block_fwd(
        &z.block,
        residual.map(|r| &r.block),
        dropout,
        relu,
        z.rows.start,
        z.cols.start,
    )?;
    Ok((
        ShardedTensor { block: out, ..z.clone() },
        FusedCache {
            z: z.block.clone(),
            scale,
            relu,
        },
    ))
}

pub fn fused_elementwise_bwd<T: Scalar>(cache: &FusedCache<T>, grad: &ShardedTensor<T>) -> ShardedTensor<T> {
    ShardedTensor {
        block: fused_block_bwd(&cache.z, cache.scale.as_deref(), cache.relu, &grad.block),
        ..grad.clone()
    }
}

// ---- cross-entropy ----------------------------------------------------------

/// Row maxima (−∞ for an empty column block).
pub fn ce_row_max<T: Scalar>(o: &Matrix<T>) -> Vec<T> {
    (0..o.rows())
        .map(|i| o.row(i).iter().fold(T::neg_infinity(), |m, &v| m.max(v)))
        .collect()
}

/// Per-row `Σ exp(o − max)` over this block's classes and the shifted target
/// logit when the label falls in `[col0, col0 + cols)` (zero otherwise),
/// packed as `[sumexp..., target...]`.
pub fn ce_partials<T: Scalar>(o: &Matrix<T>, max: &[T], labels: &[u32], col0: usize) -> Vec<T> {
    let n = o.rows();
    let mut out = vec![T::zero(); 2 * n];
    for i in 0..n {
        out[i] = o.row(i).iter().fold(T::zero(), |a, &v| a + (v - max[i]).exp());
        let y = labels[i] as usize;
        if (col0..col0 + o.cols()).contains(&y) {
            out[n + i] = o.get(i, y - col0) - max[i];
        }
    }
    out
}

/// `(Σ loss, count)` over masked rows.
pub fn ce_loss_sum<T: Scalar>(partials: &[T], mask: Option<&[bool]>) -> [T; 2] {
    let n = partials.len() / 2;
    let mut acc = [T::zero(), T::zero()];
    for i in 0..n {
        if mask.is_none_or(|m| m[i]) {
            acc[0] = acc[0] + (partials[i].ln() - partials[n + i]);
            acc[1] = acc[1] + T::one();
        }
    }
    acc
}

/// `(softmax − onehot) / count` on masked rows, zero elsewhere.
pub fn ce_grad<T: Scalar>(
    o: &Matrix<T>,
    max: &[T],
    partials: &[T],
    labels: &[u32],
    col0: usize,
    mask: Option<&[bool]>,
    count: T,
) -> Matrix<T> {
    let n = o.rows();
    Matrix::from_fn(n, o.cols(), |i, j| {
        if count == T::zero() || !mask.is_none_or(|m| m[i]) {
            return T::zero();
        }
        let p = (o.get(i, j) - max[i]).exp() / partials[i];
        let hot = if labels[i] as usize == col0 + j { T::one() } else { T::zero() };
        (p - hot) / count
    })
}

pub fn check_labels(labels: &[u32], n_classes: usize) -> Result<()> {
    if let Some(&y) = labels.iter().find(|&&y| y as usize >= n_classes) {
        return Err(Error::input(format!("label {y} >= {n_classes} classes")));
    }
    Ok(())
}

/// Mean cross-entropy over masked rows of class-sharded logits, with its
/// gradient. Every reduction runs in full precision.
pub fn parallel_cross_entropy<T: Scalar>(
    ctx: &Ctx<'_>,
    logits: &ShardedTensor<T>,
    labels: &[u32],
    mask: Option<&[bool]>,
) -> Result<(T, ShardedTensor<T>)> {
    logits.check()?;
    let n = logits.block.rows();
    if labels.len() != n || mask.is_some_and(|m| m.len() != n) {
        return Err(Error::contract("labels or mask do not match logit rows"));
    }
    check_labels(labels, logits.shape.1)?;
    let class_axis = logits.layout.cols;
    let mut max = ce_row_max(&logits.block);
    ctx.comm.all_reduce(class_axis, &mut max, ReduceOp::Max, Precision::Fp32)?;
    let mut partials = ce_partials(&logits.block, &max, labels, logits.cols.start);
    ctx.comm.all_reduce(class_axis, &mut partials, ReduceOp::Sum, Precision::Fp32)?;
    let mut acc = ce_loss_sum(&partials, mask);
    ctx.comm.all_reduce(logits.layout.rows, &mut acc, ReduceOp::Sum, Precision::Fp32)?;
    let [sum, count] = acc;
    let loss = if count == T::zero() { T::zero() } else { sum / count };
    let grad = ce_grad(&logits.block, &max, &partials, labels, logits.cols.start, mask, count);
    Ok((loss, ShardedTensor { block: grad, ..logits.clone() }))
}

// ---- resharding --------------------------------------------------------------

/// Move a tensor to another layout: all-gather along each source axis whose
/// partition changes, then slice this rank's target block.
pub fn reshard<T: Scalar>(ctx: &Ctx<'_>, t: &ShardedTensor<T>, to: Layout) -> Result<ShardedTensor<T>> {
    t.check()?;
    if t.layout == to {
        return Ok(t.clone());
    }
    let (n_rows, n_cols) = t.shape;
    let mut block = t.block.clone();
    let mut rows = t.rows.clone();
    let mut cols = t.cols.clone();
    if t.layout.rows != to.rows {
        let axis = t.layout.rows;
        let parts = ctx.comm.all_gather_parts(axis, block.into_vec())?;
        let blocks = parts
            .into_iter()
            .enumerate()
            .map(|(i, p)| Matrix::from_vec(ctx.range_at(t.kinds.0, n_rows, axis, i).len(), cols.len(), p))
            .collect::<Result<Vec<_>>>()?;
        block = Matrix::vstack(&blocks, cols.len())?;
        rows = 0..n_rows;
    }
    if t.layout.cols != to.cols {
        let axis = t.layout.cols;
        let parts = ctx.comm.all_gather_parts(axis, block.into_vec())?;
        let blocks = parts
            .into_iter()
            .enumerate()
            .map(|(i, p)| Matrix::from_vec(rows.len(), ctx.range_at(t.kinds.1, n_cols, axis, i).len(), p))
            .collect::<Result<Vec<_>>>()?;
        block = Matrix::hstack(&blocks, rows.len())?;
        cols = 0..n_cols;
    }
    let new_rows = ctx.range(t.kinds.0, n_rows, to.rows);
    let new_cols = ctx.range(t.kinds.1, n_cols, to.cols);
    let local_r = new_rows.start - rows.start..new_rows.end - rows.start;
    let local_c = new_cols.start - cols.start..new_cols.end - cols.start;
    Ok(ShardedTensor {
        block: block.slice(local_r, local_c),
        layout: to,
        rows: new_rows,
        cols: new_cols,
        shape: t.shape,
        kinds: t.kinds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{run_grid, FabricConfig};
    use crate::sampling::sample_vertices;

    const XY: Layout = Layout::new(Axis::X, Axis::Y);
    const ZX: Layout = Layout::new(Axis::Z, Axis::X);

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    fn grid(x: usize, y: usize, z: usize) -> DeviceGrid {
        DeviceGrid::new(1, x, y, z).unwrap()
    }

    fn pseudo(rows: usize, cols: usize, salt: u64) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |i, j| unit_f64(hash_words(&[salt, i as u64, j as u64])) * 2.0 - 1.0)
    }

    #[test]
    fn rotation_cycle() {
        let planes: Vec<Plane> = (1..=7).map(rotation_plane).collect();
        use Plane::*;
        assert_eq!(planes, vec![ZX, YZ, XY, ZX, YZ, XY, ZX]);
        let s = RotationSchedule::new(7);
        for l in 1..=7 {
            assert_eq!(s.adjacency(l).plane(), rotation_plane(l));
            assert_eq!(s.output(l).rows, s.adjacency(l).rows);
        }
        assert_eq!(s.input(1), H0_LAYOUT);
        assert_eq!(s.output(1), super::tests::ZX);
        assert_eq!(s.output(3), super::tests::XY);
        assert_eq!(W_IN_LAYOUT.cols, H0_LAYOUT.cols);
        assert_eq!(INPUT_LAYOUT.third(), W_IN_LAYOUT.cols);
    }

    #[test]
    fn rms_serial_example() {
        let x = m(1, 2, &[3.0, 4.0]);
        let ss = rms_row_sumsq(&x);
        let (y, rms) = rms_apply(&x, &ss, &[1.0, 1.0], 2, 0.0);
        assert!((rms[0] - 12.5f64.sqrt()).abs() < 1e-12);
        assert!((y.get(0, 0) - 0.848_528).abs() < 1e-6);
        assert!((y.get(0, 1) - 1.131_371).abs() < 1e-6);
        let ones = Matrix::from_fn(2, 3, |_, _| 1.0f64);
        let (y, _) = rms_apply(&ones, &rms_row_sumsq(&ones), &[1.0; 3], 3, RMS_EPS);
        assert!(y.as_slice().iter().all(|&v| v == 1.0 / (1.0 + RMS_EPS).sqrt()));
    }

    #[test]
    fn ce_two_class_symmetric() {
        let o = m(1, 2, &[0.0, 0.0]);
        let max = ce_row_max(&o);
        let p = ce_partials(&o, &max, &[0], 0);
        let [s, c] = ce_loss_sum(&p, None);
        assert!((s / c - std::f64::consts::LN_2).abs() < 1e-12);
        let g = ce_grad(&o, &max, &p, &[0], 0, None, c);
        assert_eq!(g.as_slice(), &[-0.5, 0.5]);
        let big = m(1, 2, &[50.0, -50.0]);
        let max = ce_row_max(&big);
        let p = ce_partials(&big, &max, &[0], 0);
        assert!(ce_loss_sum(&p, None)[0] < 1e-12);
        assert!(check_labels(&[2], 2).is_err());
    }

    #[test]
    fn dropout_mean_is_preserved() {
        let key = DropoutKey {
            seed: 3,
            dp_group: 0,
            step: 1,
            layer: 2,
        };
        let n = 100_000;
        let mean: f64 = (0..n).map(|k| key.scale(0.5, k, 7)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!(check_dropout_rate(1.0).is_err());
        assert!(check_dropout_rate(-0.1).is_err());
    }

    #[test]
    fn fused_examples() {
        let z = m(1, 3, &[-1.0, 0.5, 2.0]);
        let h = m(1, 3, &[1.0, 1.0, 1.0]);
        let (out, s) = fused_block_fwd(&z, Some(&h), None, true, 0, 0).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 1.5, 3.0]);
        assert!(s.is_none());
        let neg = m(2, 2, &[-1.0, -2.0, 0.0, -0.5]);
        let (out, _) = fused_block_fwd(&neg, Some(&Matrix::zeros(2, 2)), None, true, 0, 0).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
        let g = fused_block_bwd(&z, None, true, &m(1, 3, &[1.0, 1.0, 1.0]));
        assert_eq!(g.as_slice(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn spmm_x_group_example() {
        // A = [[1,2],[3,4]] split by columns over X; F = [[1],[2]] split by rows.
        let (out, stats) = run_grid(grid(2, 1, 1), FabricConfig::default(), |c| {
            let s = SampleSet::full(2);
            let split = BatchSplit::new(&s, c.grid());
            let ctx = Ctx::new(c, Precision::Fp32, &split);
            let x = c.coord().x;
            let a_loc = if x == 0 {
                CsrMatrix::from_triplets(2, 1, vec![(0, 0, 1.0f64), (1, 0, 3.0)]).unwrap()
            } else {
                CsrMatrix::from_triplets(2, 1, vec![(0, 0, 2.0f64), (1, 0, 4.0)]).unwrap()
            };
            let f = ShardedTensor {
                block: m(1, 1, &[(x + 1) as f64]),
                layout: XY,
                rows: x..x + 1,
                cols: 0..1,
                shape: (2, 1),
                kinds: (DimKind::Batch, DimKind::Even),
            };
            let h = sharded_spmm(&ctx, &a_loc, &f)?;
            Ok(h.block.into_vec())
        })
        .unwrap();
        assert_eq!(out, vec![vec![5.0, 11.0], vec![5.0, 11.0]]);
        assert_eq!(stats.axis_bytes(Axis::X), 2 * 8);
    }

    /// Run one sharded op per rank and reassemble, for every grid ≤ 3×3×3.
    fn grids() -> Vec<DeviceGrid> {
        let mut v = Vec::new();
        for x in 1..=3 {
            for y in 1..=3 {
                for z in 1..=3 {
                    v.push(grid(x, y, z));
                }
            }
        }
        v
    }

    #[test]
    fn gemm_and_backward_match_dense() {
        let (b, k, n) = (7, 5, 4);
        let h = pseudo(b, k, 1);
        let w = pseudo(k, n, 2);
        let go = pseudo(b, n, 3);
        let want = h.matmul(&w).unwrap();
        let want_gh = go.matmul_nt(&w).unwrap();
        let want_gw = h.matmul_tn(&go).unwrap();
        let hl = XY;
        let wl = Layout::new(Axis::Y, Axis::Z);
        for g in [grid(1, 1, 1), grid(2, 3, 1), grid(3, 2, 2), grid(2, 2, 3)] {
            let (parts, _) = run_grid(g, FabricConfig::default(), |c| {
                let s = SampleSet::full(b);
                let split = BatchSplit::new(&s, c.grid());
                let ctx = Ctx::new(c, Precision::Fp32, &split);
                let hs = ShardedTensor::from_global(&ctx, &h, hl, (DimKind::Batch, DimKind::Even));
                let ws = ShardedTensor::from_global(&ctx, &w, wl, (DimKind::Even, DimKind::Even));
                let out = sharded_gemm(&ctx, &hs, &ws)?;
                let gos = ShardedTensor::from_global(&ctx, &go, out.layout, out.kinds);
                let (gh, gw) = sharded_gemm_bwd(&ctx, &hs, &ws, &gos, true)?;
                let gw = ShardedTensor { block: gw, ..ws.clone() };
                Ok((out, gh.unwrap(), gw))
            })
            .unwrap();
            let out: Vec<_> = parts.iter().map(|p| p.0.clone()).collect();
            let gh: Vec<_> = parts.iter().map(|p| p.1.clone()).collect();
            let gw: Vec<_> = parts.iter().map(|p| p.2.clone()).collect();
            assert!(assemble(&out).max_abs_diff(&want) < 1e-12, "{g}");
            assert!(assemble(&gh).max_abs_diff(&want_gh) < 1e-12, "{g}");
            assert!(assemble(&gw).max_abs_diff(&want_gw) < 1e-12, "{g}");
        }
    }

    #[test]
    fn spmm_and_backward_match_dense_on_samples() {
        let ds = crate::graph::generate_synthetic(30, 4.0, 2, 2, 5).unwrap().cast::<f64>();
        let s = sample_vertices(30, 11, 2, 3).unwrap();
        let mb = crate::sampling::minibatch_from_sample(&ds, s.clone(), true).unwrap();
        let f = pseudo(11, 5, 9);
        let gh = pseudo(11, 5, 10);
        let want = mb.adjacency.spmm(&f).unwrap();
        let want_bwd = mb.adjacency_t.spmm(&gh).unwrap();
        for g in grids() {
            let (parts, _) = run_grid(g, FabricConfig::default(), |c| {
                let split = BatchSplit::new(&s, c.grid());
                let ctx = Ctx::new(c, Precision::Fp32, &split);
                let co = c.coord();
                let adj = Layout::new(Axis::Z, Axis::X);
                let shard = crate::shardsample::CsrShard::from_global(
                    &ds.adjacency,
                    block_range(30, g.dim(adj.rows), co.get(adj.rows)),
                    block_range(30, g.dim(adj.cols), co.get(adj.cols)),
                )?;
                let mut remap = crate::shardsample::RemapTable::new(30);
                let local = crate::shardsample::build_local_from_sample(&shard, None, &s, &mut remap, true)?;
                let fs = ShardedTensor::from_global(&ctx, &f, XY, (DimKind::Batch, DimKind::Even));
                let h = sharded_spmm(&ctx, &local.a_loc, &fs)?;
                let ghs = ShardedTensor::from_global(&ctx, &gh, h.layout, h.kinds);
                let gf = sharded_spmm_bwd(&ctx, &local.a_t_loc, &ghs)?;
                assert_eq!(gf.layout, XY);
                Ok((h, gf))
            })
            .unwrap();
            let h: Vec<_> = parts.iter().map(|p| p.0.clone()).collect();
            let gf: Vec<_> = parts.iter().map(|p| p.1.clone()).collect();
            assert!(assemble(&h).max_abs_diff(&want) < 1e-12, "{g}");
            assert!(assemble(&gf).max_abs_diff(&want_bwd) < 1e-12, "{g}");
        }
    }

    #[test]
    fn rmsnorm_split_matches_serial() {
        let x = pseudo(6, 7, 4);
        let gamma: Vec<f64> = (0..7).map(|j| 0.5 + j as f64 * 0.1).collect();
        let dy = pseudo(6, 7, 5);
        let (want_y, rms) = rms_apply(&x, &rms_row_sumsq(&x), &gamma, 7, RMS_EPS);
        let dot = rms_row_dot(&dy, &x, &gamma);
        let want_dx = rms_grad_input(&dy, &x, &gamma, &rms, &dot, 7);
        let want_gg = rms_grad_gamma(&dy, &x, &rms);
        for g in [grid(2, 3, 1), grid(3, 1, 2), grid(1, 2, 3)] {
            let (parts, _) = run_grid(g, FabricConfig::default(), |c| {
                let s = SampleSet::full(6);
                let split = BatchSplit::new(&s, c.grid());
                let ctx = Ctx::new(c, Precision::Fp32, &split);
                let xs = ShardedTensor::from_global(&ctx, &x, XY, (DimKind::Batch, DimKind::Even));
                let gs = &gamma[xs.cols.clone()];
                let (y, cache) = parallel_rmsnorm_fwd(&ctx, &xs, gs, RMS_EPS)?;
                let dys = ShardedTensor::from_global(&ctx, &dy, XY, xs.kinds);
                let (dx, gg) = parallel_rmsnorm_bwd(&ctx, &cache, gs, &dys)?;
                let gg = ShardedTensor {
                    block: Matrix::from_vec(1, gg.len(), gg)?,
                    layout: XY,
                    rows: 0..1,
                    cols: xs.cols.clone(),
                    shape: (1, 7),
                    kinds: xs.kinds,
                };
                Ok((y, dx, gg))
            })
            .unwrap();
            let y: Vec<_> = parts.iter().map(|p| p.0.clone()).collect();
            let dx: Vec<_> = parts.iter().map(|p| p.1.clone()).collect();
            let gg: Vec<_> = parts.iter().map(|p| p.2.clone()).collect();
            assert!(assemble(&y).max_abs_diff(&want_y) < 1e-12);
            assert!(assemble(&dx).max_abs_diff(&want_dx) < 1e-12);
            let want_gg = Matrix::from_vec(1, 7, want_gg.clone()).unwrap();
            assert!(assemble(&gg).max_abs_diff(&want_gg) < 1e-12);
        }
    }

    #[test]
    fn rmsnorm_halves_of_three_four() {
        let (out, _) = run_grid(grid(1, 2, 1), FabricConfig::default(), |c| {
            let s = SampleSet::full(1);
            let split = BatchSplit::new(&s, c.grid());
            let ctx = Ctx::new(c, Precision::Fp32, &split);
            let y = c.coord().y;
            let xs = ShardedTensor {
                block: m(1, 1, &[[3.0, 4.0][y]]),
                layout: XY,
                rows: 0..1,
                cols: y..y + 1,
                shape: (1, 2),
                kinds: (DimKind::Batch, DimKind::Even),
            };
            let (o, _) = parallel_rmsnorm_fwd(&ctx, &xs, &[1.0], 0.0)?;
            Ok(o.block.get(0, 0))
        })
        .unwrap();
        assert!((out[0] - 0.848_528).abs() < 1e-6);
        assert!((out[1] - 1.131_371).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_class_split_matches_serial() {
        let o = pseudo(5, 6, 11).cast::<f32>();
        let labels = vec![0u32, 5, 2, 3, 1];
        let mask = vec![true, false, true, true, true];
        let max = ce_row_max(&o);
        let p = ce_partials(&o, &max, &labels, 0);
        let [s, c] = ce_loss_sum(&p, Some(&mask));
        let want = s / c;
        let want_g = ce_grad(&o, &max, &p, &labels, 0, Some(&mask), c);
        for g in [grid(1, 2, 1), grid(2, 1, 3), grid(3, 2, 2)] {
            let (parts, _) = run_grid(g, FabricConfig::default(), |cm| {
                let s = SampleSet::full(5);
                let split = BatchSplit::new(&s, cm.grid());
                let ctx = Ctx::new(cm, Precision::Bf16, &split);
                let lay = Layout::new(Axis::X, Axis::Z);
                let os = ShardedTensor::from_global(&ctx, &o, lay, (DimKind::Batch, DimKind::Even));
                let r = os.rows.clone();
                let (loss, grad) = parallel_cross_entropy(&ctx, &os, &labels[r.clone()], Some(&mask[r]))?;
                Ok((loss, grad))
            })
            .unwrap();
            for (loss, _) in &parts {
                assert!((loss - want).abs() < 1e-6, "{g}: {loss} vs {want}");
            }
            let grads: Vec<_> = parts.into_iter().map(|p| p.1).collect();
            assert!(assemble(&grads).max_abs_diff(&want_g) < 1e-6);
        }
    }

    #[test]
    fn reshard_preserves_global_matrix() {
        let n = 9;
        let d = 5;
        let s = sample_vertices(20, n, 1, 1).unwrap();
        let x = pseudo(n, d, 12);
        let layouts = [XY, ZX, Layout::new(Axis::Y, Axis::Z), Layout::new(Axis::Y, Axis::X)];
        for g in grids() {
            for &from in &layouts {
                for &to in &layouts {
                    let (parts, stats) = run_grid(g, FabricConfig::default(), |c| {
                        let split = BatchSplit::new(&s, c.grid());
                        let ctx = Ctx::new(c, Precision::Fp32, &split);
                        let t = ShardedTensor::from_global(&ctx, &x, from, (DimKind::Batch, DimKind::Even));
                        let r = reshard(&ctx, &t, to)?;
                        let direct = ShardedTensor::from_global(&ctx, &x, to, t.kinds);
                        assert_eq!(r, direct);
                        Ok(r)
                    })
                    .unwrap();
                    assert_eq!(assemble(&parts), x);
                    if from == to || g.pmm_size() == 1 {
                        assert_eq!(stats.total_bytes(), 0);
                    }
                }
            }
        }
    }

    #[test]
    fn replicas_stay_bit_identical() {
        let s = sample_vertices(40, 13, 7, 0).unwrap();
        let z = pseudo(13, 6, 21).cast::<f32>();
        let key = DropoutKey {
            seed: 1,
            dp_group: 0,
            step: 0,
            layer: 1,
        };
        let (parts, _) = run_grid(grid(2, 2, 2), FabricConfig::default(), |c| {
            let split = BatchSplit::new(&s, c.grid());
            let ctx = Ctx::new(c, Precision::Fp32, &split);
            let zs = ShardedTensor::from_global(&ctx, &z, ZX, (DimKind::Batch, DimKind::Even));
            let (o, _) = fused_elementwise_fwd(&zs, None, Some((key, 0.4)), true)?;
            Ok((c.coord(), o))
        })
        .unwrap();
        for (ca, a) in &parts {
            for (cb, b) in &parts {
                if ca.z == cb.z && ca.x == cb.x {
                    assert_eq!(a.block.as_slice(), b.block.as_slice());
                }
            }
        }
        let (full, _) = fused_block_fwd(&z, None, Some((key, 0.4)), true, 0, 0).unwrap();
        let blocks: Vec<_> = parts.into_iter().map(|p| p.1).collect();
        assert_eq!(assemble(&blocks), full);
    }
}
