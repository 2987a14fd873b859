//! Serial uniform vertex sampling, induced subgraphs and unbiased rescaling.
//!
//! This is the reference path; the per-rank construction in
//! [`crate::shardsample`] must reproduce it exactly.

use rand::Rng;

use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::graph::{CsrMatrix, Dataset, Split};
use crate::rng::stream;
use crate::scalar::Scalar;

/// Sorted set of `B` distinct vertex ids drawn for one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSet {
    vertices: Vec<usize>,
    graph_size: usize,
    seed: u64,
    step: u64,
}

impl SampleSet {
    /// Every vertex of an `n`-vertex graph (full-graph evaluation).
    pub fn full(n: usize) -> Self {
        Self {
            vertices: (0..n).collect(),
            graph_size: n,
            seed: 0,
            step: 0,
        }
    }

    /// Explicit sample; ids must be strictly increasing and below `n`.
    pub fn from_vertices(vertices: Vec<usize>, n: usize, step: u64) -> Result<Self> {
        if vertices.windows(2).any(|w| w[0] >= w[1]) || vertices.last().is_some_and(|&v| v >= n) {
            return Err(Error::input("sample ids must be strictly increasing and in range"));
        }
        Ok(Self {
            vertices,
            graph_size: n,
            seed: 0,
            step,
        })
    }

    pub fn vertices(&self) -> &[usize] {
        &self.vertices
    }

    pub fn batch_size(&self) -> usize {
        self.vertices.len()
    }

    pub fn graph_size(&self) -> usize {
        self.graph_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Position of global vertex `v` in the sorted sample.
    pub fn position(&self, v: usize) -> Option<usize> {
        self.vertices.binary_search(&v).ok()
    }

    /// Number of sampled ids below `v`.
    pub fn rank_of(&self, v: usize) -> usize {
        self.vertices.partition_point(|&u| u < v)
    }
}

/// Draw `b` of `n` vertices uniformly without replacement: the first `b`
/// entries of a Fisher–Yates permutation seeded with `seed + step`, sorted.
pub fn sample_vertices(n: usize, b: usize, seed: u64, step: u64) -> Result<SampleSet> {
    if b == 0 || b > n {
        return Err(Error::input(format!("batch size {b} outside [1, {n}]")));
    }
    let mut rng = stream(seed.wrapping_add(step));
    let mut perm: Vec<usize> = (0..n).collect();
    for i in 0..b {
        let j = rng.random_range(i..n);
        perm.swap(i, j);
    }
    perm.truncate(b);
    perm.sort_unstable();
    Ok(SampleSet {
        vertices: perm,
        graph_size: n,
        seed,
        step,
    })
}

/// Rows and columns of `a` restricted to the sample, reindexed by position
/// in the sample. Values are copied unchanged.
pub fn induce_subgraph<T: Scalar>(a: &CsrMatrix<T>, s: &SampleSet) -> Result<CsrMatrix<T>> {
    let n = s.graph_size();
    if a.n_rows() != n || a.n_cols() != n {
        return Err(Error::contract(format!(
            "sample over {n} vertices applied to {}x{} matrix",
            a.n_rows(),
            a.n_cols()
        )));
    }
    let b = s.batch_size();
    let mut row_ptr = Vec::with_capacity(b + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    for &v in s.vertices() {
        let (cols, vals) = a.row(v);
        for (&u, &w) in cols.iter().zip(vals) {
            if let Some(j) = s.position(u) {
                col_idx.push(j);
                values.push(w);
            }
        }
        row_ptr.push(col_idx.len());
    }
    Ok(CsrMatrix::from_parts_unchecked(b, b, row_ptr, col_idx, values))
}

/// Conditional inclusion probability of a neighbour given its partner is
/// sampled: `(b - 1) / (n - 1)`.
pub fn inclusion_probability(b: usize, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::input("rescaling needs a graph of at least two vertices"));
    }
    if b < 2 || b > n {
        return Err(Error::input(format!(
            "batch size {b} cannot rescale off-diagonal edges (need 2 <= b <= {n})"
        )));
    }
    Ok((b - 1) as f64 / (n - 1) as f64)
}

/// The divisor applied to off-diagonal weights, in the element type.
pub(crate) fn edge_divisor<T: Scalar>(b: usize, n: usize) -> Result<T> {
    inclusion_probability(b, n).map(T::cast_from_f64)
}

/// Divide off-diagonal values by `(b-1)/(n-1)`; the diagonal is untouched.
pub fn rescale_edges<T: Scalar>(a_s: &CsrMatrix<T>, b: usize, n: usize) -> Result<CsrMatrix<T>> {
    let p: T = edge_divisor(b, n)?;
    if a_s.n_rows() != b || a_s.n_cols() != b {
        return Err(Error::contract(format!(
            "rescale expects {b}x{b}, got {}x{}",
            a_s.n_rows(),
            a_s.n_cols()
        )));
    }
    Ok(a_s.map_values(|i, j, v| if i == j { v } else { v / p }))
}

/// One step's serial mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch<T> {
    pub adjacency: CsrMatrix<T>,
    pub adjacency_t: CsrMatrix<T>,
    pub features: Matrix<T>,
    pub labels: Vec<u32>,
    pub split: Vec<Split>,
    pub sample: SampleSet,
}

/// Sample, induce, rescale and slice: one complete serial mini-batch.
pub fn build_minibatch<T: Scalar>(
    ds: &Dataset<T>,
    b: usize,
    seed: u64,
    step: u64,
) -> Result<MiniBatch<T>> {
    let n = ds.n();
    if b < 2 || b > n {
        return Err(Error::input(format!("batch size {b} outside [2, {n}]")));
    }
    let sample = sample_vertices(n, b, seed, step)?;
    minibatch_from_sample(ds, sample, true)
}

/// Mini-batch over an explicit sample. With `rescale = false` the induced
/// weights are kept as-is (full-graph evaluation).
pub fn minibatch_from_sample<T: Scalar>(
    ds: &Dataset<T>,
    sample: SampleSet,
    rescale: bool,
) -> Result<MiniBatch<T>> {
    let induced = induce_subgraph(&ds.adjacency, &sample)?;
    let adjacency = if rescale {
        rescale_edges(&induced, sample.batch_size(), ds.n())?
    } else {
        induced
    };
    let adjacency_t = adjacency.transpose();
    let v = sample.vertices();
    Ok(MiniBatch {
        adjacency,
        adjacency_t,
        features: ds.features.select_rows(v),
        labels: v.iter().map(|&i| ds.labels[i]).collect(),
        split: v.iter().map(|&i| ds.split[i]).collect(),
        sample,
    })
}

/// Monte Carlo check of the sampled aggregation against the full graph for
/// per-vertex scalar features `x`.
#[derive(Clone, Debug)]
pub struct UnbiasednessReport {
    /// Mean rescaled aggregation for each vertex, over batches containing it.
    pub estimate: Vec<f64>,
    /// Full-graph aggregation `Σ_u a_vu x_u`.
    pub exact: Vec<f64>,
    /// Number of batches that contained each vertex.
    pub hits: Vec<u64>,
    pub trials: u64,
}

impl UnbiasednessReport {
    pub fn inclusion_frequency(&self) -> Vec<f64> {
        self.hits
            .iter()
            .map(|&h| h as f64 / self.trials as f64)
            .collect()
    }

    /// Per-vertex `|estimate - exact| / |exact|` (absolute error where exact is 0).
    pub fn relative_bias(&self) -> Vec<f64> {
        self.estimate
            .iter()
            .zip(&self.exact)
            .map(|(&e, &x)| {
                let d = (e - x).abs();
                if x == 0.0 {
                    d
                } else {
                    d / x.abs()
                }
            })
            .collect()
    }

    pub fn max_relative_bias(&self) -> f64 {
        self.relative_bias().into_iter().fold(0.0, f64::max)
    }
}

pub fn monte_carlo_aggregation<T: Scalar>(
    a: &CsrMatrix<T>,
    x: &[f64],
    b: usize,
    trials: u64,
    seed: u64,
) -> Result<UnbiasednessReport> {
    let n = a.n_rows();
    if x.len() != n {
        return Err(Error::input(format!("{} feature values for {n} vertices", x.len())));
    }
    let exact = (0..n)
        .map(|v| {
            let (cols, vals) = a.row(v);
            cols.iter().zip(vals).map(|(&u, &w)| w.as_f64() * x[u]).sum()
        })
        .collect();
    let mut sum = vec![0.0f64; n];
    let mut hits = vec![0u64; n];
    // A vertex whose estimate never varies gets that value, not a rounded mean.
    let mut first = vec![f64::NAN; n];
    let mut varied = vec![false; n];
    for t in 0..trials {
        let s = sample_vertices(n, b, seed, t)?;
        let a_s = if b == n {
            induce_subgraph(a, &s)?
        } else {
            rescale_edges(&induce_subgraph(a, &s)?, b, n)?
        };
        let verts = s.vertices();
        for (i, &v) in verts.iter().enumerate() {
            let (cols, vals) = a_s.row(i);
            let agg: f64 = cols
                .iter()
                .zip(vals)
                .map(|(&j, &w)| w.as_f64() * x[verts[j]])
                .sum();
            sum[v] += agg;
            if hits[v] == 0 {
                first[v] = agg;
            } else if agg != first[v] {
                varied[v] = true;
            }
            hits[v] += 1;
        }
    }
    let estimate = (0..n)
        .map(|v| match (hits[v], varied[v]) {
            (0, _) => f64::NAN,
            (_, false) => first[v],
            (h, true) => sum[v] / h as f64,
        })
        .collect();
    Ok(UnbiasednessReport {
        estimate,
        exact,
        hits,
        trials,
    })
}
