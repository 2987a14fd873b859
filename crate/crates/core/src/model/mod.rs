//! GCN model: configuration, parameters, optimizer, the per-rank sharded
//! forward/backward, the trainer and the serial reference.

mod dist;
mod serial;
mod train;

use std::ops::Range;

use rand::Rng;

use crate::dense::{block_range, Matrix};
use crate::error::{Error, Result};
use crate::pmm::{check_dropout_rate, Layout, RotationSchedule, W_IN_LAYOUT};
use crate::comm::{DeviceGrid, RankCoord};
use crate::rng::{mix64, stream};
use crate::scalar::Scalar;

pub use dist::{backward, dp_sync, forward, DropoutCtx, RankBatch, RankCache, RankModel, RankSampler};
pub use serial::{
    finite_difference_check, reference_train, serial_backward, serial_eval, serial_forward, serial_loss,
    serial_step, FdReport, SerialCache, StepResult,
};
pub use train::{
    distributed_step, evaluate_full_graph, sampling_matches_serial, split_accuracy, steps_per_epoch, train, DistStep, EpochRecord,
    SamplingCheck, SplitAccuracy, TrainConfig, TrainReport,
};

/// Architecture and regularisation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_in: usize,
    pub d_h: usize,
    pub d_out: usize,
    pub dropout: f64,
    pub rmsnorm: bool,
    pub residual: bool,
    pub relu: bool,
}

impl ModelConfig {
    pub fn new(layers: usize, d_in: usize, d_h: usize, d_out: usize) -> Self {
        Self {
            layers,
            d_in,
            d_h,
            d_out,
            dropout: 0.0,
            rmsnorm: true,
            residual: true,
            relu: true,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_in == 0 || self.d_h == 0 || self.d_out == 0 {
            return Err(Error::input(format!(
                "layers and dims must be >= 1 (L={}, d_in={}, d_h={}, d_out={})",
                self.layers, self.d_in, self.d_h, self.d_out
            )));
        }
        check_dropout_rate(self.dropout)
    }

    pub fn schedule(&self) -> RotationSchedule {
        RotationSchedule::new(self.layers)
    }
}

/// Weights of one GCN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<M> {
    pub w: M,
    /// RMSNorm scale, stored as a `1 × d_h` row.
    pub gamma: M,
}

/// Every trainable tensor, either global or one rank's blocks (and, with
/// `M = BlockSpec`, where those blocks sit).
#[derive(Clone, Debug, PartialEq)]
pub struct Params<M> {
    pub w_in: M,
    pub layers: Vec<LayerParams<M>>,
    pub w_out: M,
}

pub type Weights<T> = Params<Matrix<T>>;

impl<M> Params<M> {
    /// Tensors in a fixed order: `w_in`, then `w_l, gamma_l` per layer, then `w_out`.
    pub fn iter(&self) -> impl Iterator<Item = &M> {
        std::iter::once(&self.w_in)
            .chain(self.layers.iter().flat_map(|l| [&l.w, &l.gamma]))
            .chain(std::iter::once(&self.w_out))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut M> {
        std::iter::once(&mut self.w_in)
            .chain(self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.gamma]))
            .chain(std::iter::once(&mut self.w_out))
    }

    pub fn map<N>(&self, mut f: impl FnMut(&M) -> N) -> Params<N> {
        Params {
            w_in: f(&self.w_in),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    w: f(&l.w),
                    gamma: f(&l.gamma),
                })
                .collect(),
            w_out: f(&self.w_out),
        }
    }

    /// Tensor names in [`Params::iter`] order.
    pub fn names(&self) -> Vec<String> {
        let mut v = vec!["w_in".to_string()];
        for l in 1..=self.layers.len() {
            v.push(format!("w_{l}"));
            v.push(format!("gamma_{l}"));
        }
        v.push("w_out".into());
        v
    }
}

impl<T: Scalar> Weights<T> {
    /// Xavier-uniform weights and unit RMSNorm scales, drawn globally so
    /// every grid starts from the same model.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let xavier = |rows: usize, cols: usize, tag: u64| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let mut rng = stream(mix64(seed, tag));
            let v: Vec<T> = (0..rows * cols)
                .map(|_| T::cast_from_f64(rng.random_range(-a..a)))
                .collect();
            Matrix::from_vec(rows, cols, v).expect("shape")
        };
        Params {
            w_in: xavier(cfg.d_in, cfg.d_h, 0x1000),
            layers: (1..=cfg.layers)
                .map(|l| LayerParams {
                    w: xavier(cfg.d_h, cfg.d_h, 0x1000 + l as u64),
                    gamma: Matrix::from_fn(1, cfg.d_h, |_, _| T::one()),
                })
                .collect(),
            w_out: xavier(cfg.d_h, cfg.d_out, 0x2000),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|m| Matrix::zeros(m.rows(), m.cols()))
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        self.map(|m| m.cast())
    }

    /// Largest `|a − b| / max(|b|, floor)` over all elements.
    pub fn max_rel_diff(&self, other: &Self, floor: f64) -> f64 {
        self.iter()
            .zip(other.iter())
            .flat_map(|(a, b)| {
                a.as_slice()
                    .iter()
                    .zip(b.as_slice())
                    .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs() / y.as_f64().abs().max(floor))
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn numel(&self) -> usize {
        self.iter().map(|m| m.rows() * m.cols()).sum()
    }
}

/// Placement of one rank's block of a parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub layout: Layout,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

/// Block placement of every parameter for the rank at `coord`.
///
/// `W_in` sits on (Z,Y); `W_l` on (input cols, input rows) of its layer;
/// `γ_l` follows the columns of the layer output; `W_out` on (cols, third)
/// of the last hidden layout.
pub fn param_specs(cfg: &ModelConfig, grid: DeviceGrid, coord: RankCoord) -> Params<BlockSpec> {
    let sched = cfg.schedule();
    let spec = |layout: Layout, rows: usize, cols: usize| BlockSpec {
        layout,
        rows: block_range(rows, grid.dim(layout.rows), coord.get(layout.rows)),
        cols: block_range(cols, grid.dim(layout.cols), coord.get(layout.cols)),
    };
    Params {
        w_in: spec(W_IN_LAYOUT, cfg.d_in, cfg.d_h),
        layers: (1..=cfg.layers)
            .map(|l| {
                let out = sched.output(l);
                LayerParams {
                    w: spec(sched.weight(l), cfg.d_h, cfg.d_h),
                    gamma: BlockSpec {
                        layout: out,
                        rows: 0..1,
                        cols: block_range(cfg.d_h, grid.dim(out.cols), coord.get(out.cols)),
                    },
                }
            })
            .collect(),
        w_out: spec(sched.w_out(), cfg.d_h, cfg.d_out),
    }
}

/// Cut this rank's blocks out of global weights.
pub fn slice_weights<T: Scalar>(global: &Weights<T>, specs: &Params<BlockSpec>) -> Weights<T> {
    let mut specs_it = specs.iter();
    global.map(|m| {
        let s = specs_it.next().expect("same structure");
        m.slice(s.rows.clone(), s.cols.clone())
    })
}

/// Write one rank's blocks into global tensors.
pub fn write_blocks<T: Scalar>(global: &mut Weights<T>, local: &Weights<T>, specs: &Params<BlockSpec>) {
    for ((g, l), s) in global.iter_mut().zip(local.iter()).zip(specs.iter()) {
        g.write_block(s.rows.start, s.cols.start, l);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// SGD or Adam with bias correction, applied element-wise to whatever
/// blocks it is given.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Option<(Weights<T>, Weights<T>)>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: None,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, w: &mut Weights<T>, g: &Weights<T>) {
        self.t += 1;
        let lr = T::cast_from_f64(self.lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for (wm, gm) in w.iter_mut().zip(g.iter()) {
                    for (x, &d) in wm.as_mut_slice().iter_mut().zip(gm.as_slice()) {
                        *x = *x - lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (m, v) = self.moments.get_or_insert_with(|| (w.zeros_like(), w.zeros_like()));
                let b1 = T::cast_from_f64(self.beta1);
                let b2 = T::cast_from_f64(self.beta2);
                let c1 = T::cast_from_f64(1.0 - self.beta1.powi(self.t as i32));
                let c2 = T::cast_from_f64(1.0 - self.beta2.powi(self.t as i32));
                let eps = T::cast_from_f64(self.eps);
                let one = T::one();
                let tensors = w.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut());
                for (((wm, gm), mm), vm) in tensors {
                    let it = wm
                        .as_mut_slice()
                        .iter_mut()
                        .zip(gm.as_slice())
                        .zip(mm.as_mut_slice())
                        .zip(vm.as_mut_slice());
                    for (((x, &d), mi), vi) in it {
                        *mi = b1 * *mi + (one - b1) * d;
                        *vi = b2 * *vi + (one - b2) * d * d;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *x = *x - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}
