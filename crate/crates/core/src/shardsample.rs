//! Communication-free per-rank mini-batch construction.
//!
//! Every rank derives the same sorted sample from the shared seed and step,
//! then cuts its own block out of its local adjacency shard in four phases:
//! locate the sampled rows/columns, extract the sampled rows, filter to
//! sampled columns with a step-tagged remap, and rescale + assemble both the
//! block and its transpose.

use std::ops::Range;

use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::graph::{CsrMatrix, Dataset, Split};
use crate::sampling::{edge_divisor, sample_vertices, SampleSet};
use crate::scalar::Scalar;

/// Rows `[r0, r1)` × columns `[c0, c1)` of a global adjacency, with column
/// ids kept global.
#[derive(Clone, Debug)]
pub struct CsrShard<T> {
    rows: Range<usize>,
    cols: Range<usize>,
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> CsrShard<T> {
    pub fn from_global(a: &CsrMatrix<T>, rows: Range<usize>, cols: Range<usize>) -> Result<Self> {
        let n = a.n_rows();
        if a.n_cols() != n || rows.end > n || cols.end > n || rows.start > rows.end || cols.start > cols.end {
            return Err(Error::input(format!(
                "shard {rows:?}x{cols:?} outside {}x{}",
                a.n_rows(),
                a.n_cols()
            )));
        }
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for v in rows.clone() {
            let (c, w) = a.row(v);
            let lo = c.partition_point(|&j| j < cols.start);
            let hi = c.partition_point(|&j| j < cols.end);
            col_idx.extend_from_slice(&c[lo..hi]);
            values.extend_from_slice(&w[lo..hi]);
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            rows,
            cols,
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn rows(&self) -> Range<usize> {
        self.rows.clone()
    }

    pub fn cols(&self) -> Range<usize> {
        self.cols.clone()
    }

    /// Vertex count of the graph this shard was cut from.
    pub fn graph_size(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }
}

/// Persistent vertex → compact-index map. An entry is live only while its
/// tag equals the current step, so the table is never cleared.
#[derive(Clone, Debug)]
pub struct RemapTable {
    tags: Vec<u64>,
    row_local: Vec<u32>,
    col_local: Vec<u32>,
    writes: u64,
}

const NEVER: u64 = u64::MAX;

impl RemapTable {
    pub fn new(n: usize) -> Self {
        Self {
            tags: vec![NEVER; n],
            row_local: vec![0; n],
            col_local: vec![0; n],
            writes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Total entries written over the table's lifetime.
    pub fn writes(&self) -> u64 {
        self.writes
    }

    fn stamp(&mut self, s_r: &[usize], s_c: &[usize], step: u64) {
        for (i, &v) in s_r.iter().enumerate() {
            self.tags[v] = step;
            self.row_local[v] = i as u32;
        }
        for (j, &v) in s_c.iter().enumerate() {
            self.tags[v] = step;
            self.col_local[v] = j as u32;
        }
        self.writes += (s_r.len() + s_c.len()) as u64;
    }

    #[inline]
    fn row(&self, v: usize, step: u64) -> usize {
        debug_assert_eq!(self.tags[v], step, "stale remap entry for {v}");
        self.row_local[v] as usize
    }

    #[inline]
    fn col(&self, v: usize, step: u64) -> usize {
        debug_assert_eq!(self.tags[v], step, "stale remap entry for {v}");
        self.col_local[v] as usize
    }
}

/// Sampled ids inside the row range and inside the column range, located
/// by binary search on the sorted sample.
pub fn locate_ranges<'a>(
    s: &'a SampleSet,
    rows: Range<usize>,
    cols: Range<usize>,
) -> (&'a [usize], &'a [usize]) {
    let v = s.vertices();
    let cut = |r: Range<usize>| {
        let lo = v.partition_point(|&x| x < r.start);
        let hi = v.partition_point(|&x| x < r.end);
        &v[lo..hi]
    };
    (cut(rows), cut(cols))
}

/// Inclusive prefix sum.
pub fn prefix_sum(counts: &[usize]) -> Vec<usize> {
    counts
        .iter()
        .scan(0usize, |acc, &c| {
            *acc += c;
            Some(*acc)
        })
        .collect()
}

/// Index of the first prefix entry strictly greater than `q`, i.e. the
/// owning row of flat position `q`.
#[inline]
pub fn search_sorted_right(prefix: &[usize], q: usize) -> usize {
    prefix.partition_point(|&p| p <= q)
}

/// Flat nonzeros of the sampled rows, global ids, plus the owning sampled-row
/// position of each triple.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowTriples<T> {
    pub rows_g: Vec<usize>,
    pub cols_g: Vec<usize>,
    pub vals: Vec<T>,
    pub owner: Vec<usize>,
}

impl<T> RowTriples<T> {
    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }
}

/// Gather every nonzero of the sampled rows: nnz per row from the row
/// pointer, prefix sum, ownership by sorted search, one gather.
pub fn extract_rows<T: Scalar>(shard: &CsrShard<T>, s_r: &[usize]) -> Result<RowTriples<T>> {
    if let Some(&v) = s_r.iter().find(|&&v| !shard.rows.contains(&v)) {
        return Err(Error::contract(format!(
            "sampled row {v} outside shard rows {:?}",
            shard.rows
        )));
    }
    let r0 = shard.rows.start;
    let counts: Vec<usize> = s_r
        .iter()
        .map(|&v| shard.row_ptr[v - r0 + 1] - shard.row_ptr[v - r0])
        .collect();
    let prefix = prefix_sum(&counts);
    let total = prefix.last().copied().unwrap_or(0);
    let mut out = RowTriples {
        rows_g: Vec::with_capacity(total),
        cols_g: Vec::with_capacity(total),
        vals: Vec::with_capacity(total),
        owner: Vec::with_capacity(total),
    };
    for q in 0..total {
        let own = search_sorted_right(&prefix, q);
        let start = if own == 0 { 0 } else { prefix[own - 1] };
        let v = s_r[own];
        let k = shard.row_ptr[v - r0] + (q - start);
        out.rows_g.push(v);
        out.cols_g.push(shard.col_idx[k]);
        out.vals.push(shard.values[k]);
        out.owner.push(own);
    }
    Ok(out)
}

/// Triples restricted to sampled columns, with compact and global ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompactTriples<T> {
    pub rows_c: Vec<usize>,
    pub cols_c: Vec<usize>,
    pub rows_g: Vec<usize>,
    pub cols_g: Vec<usize>,
    pub vals: Vec<T>,
    pub n_rows: usize,
    pub n_cols: usize,
}

/// Keep triples whose column is sampled and remap both ids into
/// `[0, |s_r|) × [0, |s_c|)` through the step-tagged table.
pub fn filter_and_remap<T: Scalar>(
    triples: &RowTriples<T>,
    s_r: &[usize],
    s_c: &[usize],
    remap: &mut RemapTable,
    step: u64,
) -> CompactTriples<T> {
    remap.stamp(s_r, s_c, step);
    let mut out = CompactTriples {
        n_rows: s_r.len(),
        n_cols: s_c.len(),
        ..Default::default()
    };
    for k in 0..triples.len() {
        let j = triples.cols_g[k];
        if s_c.binary_search(&j).is_err() {
            continue;
        }
        let i = triples.rows_g[k];
        out.rows_c.push(remap.row(i, step));
        out.cols_c.push(remap.col(j, step));
        out.rows_g.push(i);
        out.cols_g.push(j);
        out.vals.push(triples.vals[k]);
    }
    out
}

/// Divide off-diagonal values (by global id) by `(b-1)/(n-1)` when
/// `rescale`, then build the block and its transpose in one pass.
pub fn assemble_shard<T: Scalar>(
    mut t: CompactTriples<T>,
    b: usize,
    n: usize,
    rescale: bool,
) -> Result<(CsrMatrix<T>, CsrMatrix<T>)> {
    if rescale {
        let p: T = edge_divisor(b, n)?;
        for k in 0..t.vals.len() {
            if t.rows_g[k] != t.cols_g[k] {
                t.vals[k] = t.vals[k] / p;
            }
        }
    }
    let nnz = t.vals.len();
    let mut row_ptr = vec![0usize; t.n_rows + 1];
    let mut t_ptr = vec![0usize; t.n_cols + 1];
    for k in 0..nnz {
        row_ptr[t.rows_c[k] + 1] += 1;
        t_ptr[t.cols_c[k] + 1] += 1;
    }
    for i in 0..t.n_rows {
        row_ptr[i + 1] += row_ptr[i];
    }
    for j in 0..t.n_cols {
        t_ptr[j + 1] += t_ptr[j];
    }
    let mut next = t_ptr.clone();
    let mut t_cols = vec![0usize; nnz];
    let mut t_vals = vec![T::zero(); nnz];
    for k in 0..nnz {
        let slot = next[t.cols_c[k]];
        t_cols[slot] = t.rows_c[k];
        t_vals[slot] = t.vals[k];
        next[t.cols_c[k]] += 1;
    }
    let a = CsrMatrix::from_parts_unchecked(t.n_rows, t.n_cols, row_ptr, t.cols_c, t.vals);
    let at = CsrMatrix::from_parts_unchecked(t.n_cols, t.n_rows, t_ptr, t_cols, t_vals);
    Ok((a, at))
}

/// Vertex data a rank holds locally: feature rows `rows` restricted to
/// feature columns `feature_cols`, plus labels and split tags for `rows`.
#[derive(Clone, Debug)]
pub struct VertexSlice<T> {
    pub rows: Range<usize>,
    pub feature_cols: Range<usize>,
    pub features: Matrix<T>,
    pub labels: Vec<u32>,
    pub split: Vec<Split>,
}

impl<T: Scalar> VertexSlice<T> {
    pub fn from_dataset(ds: &Dataset<T>, rows: Range<usize>, feature_cols: Range<usize>) -> Self {
        Self {
            features: ds.features.slice(rows.clone(), feature_cols.clone()),
            labels: ds.labels[rows.clone()].to_vec(),
            split: ds.split[rows.clone()].to_vec(),
            rows,
            feature_cols,
        }
    }

    /// Features, labels and tags of the listed global vertices.
    pub fn gather(&self, ids: &[usize]) -> Result<(Matrix<T>, Vec<u32>, Vec<Split>)> {
        if let Some(&v) = ids.iter().find(|&&v| !self.rows.contains(&v)) {
            return Err(Error::contract(format!(
                "vertex {v} not held locally ({:?})",
                self.rows
            )));
        }
        let local: Vec<usize> = ids.iter().map(|&v| v - self.rows.start).collect();
        Ok((
            self.features.select_rows(&local),
            local.iter().map(|&i| self.labels[i]).collect(),
            local.iter().map(|&i| self.split[i]).collect(),
        ))
    }
}

/// Work done by one local build.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WorkCounters {
    /// Nonzeros read from sampled rows; equals the sampled-row nnz.
    pub nnz_touched: u64,
    /// Triples surviving the column filter (edges of the local block).
    pub nnz_kept: u64,
    pub remap_writes: u64,
}

/// One rank's block of a step's mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatchShard<T> {
    pub a_loc: CsrMatrix<T>,
    pub a_t_loc: CsrMatrix<T>,
    /// Present when a [`VertexSlice`] was supplied.
    pub x_s: Option<Matrix<T>>,
    pub y_s: Vec<u32>,
    pub split_s: Vec<Split>,
    pub s_r: Vec<usize>,
    pub s_c: Vec<usize>,
    pub work: WorkCounters,
}

/// Full per-rank pipeline for the step's shared sample. Touches only local
/// data; no rank talks to any other.
pub fn build_local_minibatch<T: Scalar>(
    shard: &CsrShard<T>,
    slice: Option<&VertexSlice<T>>,
    b: usize,
    seed: u64,
    step: u64,
    remap: &mut RemapTable,
) -> Result<MiniBatchShard<T>> {
    let n = shard.graph_size();
    if b < 2 || b > n {
        return Err(Error::input(format!("batch size {b} outside [2, {n}]")));
    }
    let sample = sample_vertices(n, b, seed, step)?;
    build_local_from_sample(shard, slice, &sample, remap, true)
}

/// [`build_local_minibatch`] for an already drawn sample. `rescale = false`
/// keeps the normalized weights (full-graph evaluation).
pub fn build_local_from_sample<T: Scalar>(
    shard: &CsrShard<T>,
    slice: Option<&VertexSlice<T>>,
    sample: &SampleSet,
    remap: &mut RemapTable,
    rescale: bool,
) -> Result<MiniBatchShard<T>> {
    if sample.graph_size() != shard.graph_size() || remap.len() != shard.graph_size() {
        return Err(Error::contract(format!(
            "sample over {} vertices, shard over {}, remap over {}",
            sample.graph_size(),
            shard.graph_size(),
            remap.len()
        )));
    }
    let (s_r, s_c) = locate_ranges(sample, shard.rows(), shard.cols());
    let triples = extract_rows(shard, s_r)?;
    let touched = triples.len() as u64;
    let writes_before = remap.writes();
    let compact = filter_and_remap(&triples, s_r, s_c, remap, sample.step());
    let kept = compact.vals.len() as u64;
    let (a_loc, a_t_loc) = assemble_shard(compact, sample.batch_size(), sample.graph_size(), rescale)?;
    let (x_s, y_s, split_s) = match slice {
        Some(sl) if sl.rows == shard.rows => {
            let (x, y, sp) = sl.gather(s_r)?;
            (Some(x), y, sp)
        }
        Some(sl) => {
            return Err(Error::contract(format!(
                "vertex slice rows {:?} do not match shard rows {:?}",
                sl.rows, shard.rows
            )))
        }
        None => (None, Vec::new(), Vec::new()),
    };
    Ok(MiniBatchShard {
        a_loc,
        a_t_loc,
        x_s,
        y_s,
        split_s,
        s_r: s_r.to_vec(),
        s_c: s_c.to_vec(),
        work: WorkCounters {
            nnz_touched: touched,
            nnz_kept: kept,
            remap_writes: remap.writes() - writes_before,
        },
    })
}
