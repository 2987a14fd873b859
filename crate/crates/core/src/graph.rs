//! Graphs, normalized adjacency, datasets and their on-disk formats.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::rng::{mix64, stream};
use crate::scalar::Scalar;

/// Compressed sparse row matrix in canonical form: column indices strictly
/// increasing within each row, all values finite.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix<T> {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    /// Build from raw arrays, checking every canonical-form invariant.
    pub fn try_new(
        n_rows: usize,
        n_cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<T>,
    ) -> Result<Self> {
        let m = Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        };
        m.check_canonical()?;
        Ok(m)
    }

    pub(crate) fn from_parts_unchecked(
        n_rows: usize,
        n_cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<T>,
    ) -> Self {
        let m = Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        };
        debug_assert!(m.check_canonical().is_ok(), "{:?}", m.check_canonical());
        m
    }

    /// Build from `(row, col, value)` triplets in any order. Duplicate
    /// coordinates are rejected.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(usize, usize, T)>,
    ) -> Result<Self> {
        triplets.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        for (k, &(i, j, v)) in triplets.iter().enumerate() {
            if i >= n_rows || j >= n_cols {
                return Err(Error::input(format!(
                    "entry ({i},{j}) outside {n_rows}x{n_cols}"
                )));
            }
            if k > 0 && triplets[k - 1].0 == i && triplets[k - 1].1 == j {
                return Err(Error::input(format!("duplicate entry ({i},{j})")));
            }
            row_ptr[i + 1] += 1;
            col_idx.push(j);
            values.push(v);
        }
        for i in 0..n_rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self::try_new(n_rows, n_cols, row_ptr, col_idx, values)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_parts_unchecked(n, n, (0..=n).collect(), (0..n).collect(), vec![T::one(); n])
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self::from_parts_unchecked(n_rows, n_cols, vec![0; n_rows + 1], vec![], vec![])
    }

    pub fn check_canonical(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(format!("non-canonical CSR: {m}")));
        if self.row_ptr.len() != self.n_rows + 1 {
            return bad(format!(
                "row_ptr has {} entries for {} rows",
                self.row_ptr.len(),
                self.n_rows
            ));
        }
        if self.row_ptr[0] != 0 {
            return bad("row_ptr[0] != 0".into());
        }
        if self.row_ptr[self.n_rows] != self.col_idx.len() || self.col_idx.len() != self.values.len()
        {
            return bad("row_ptr end, col_idx and values lengths disagree".into());
        }
        for i in 0..self.n_rows {
            let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
            if s > e {
                return bad(format!("row_ptr decreases at row {i}"));
            }
            let cols = &self.col_idx[s..e];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("row {i} columns not strictly increasing"));
            }
            if cols.last().is_some_and(|&c| c >= self.n_cols) {
                return bad(format!("row {i} column out of range"));
            }
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return bad("non-finite value".into());
        }
        Ok(())
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    #[inline]
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[T]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> Option<T> {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).ok().map(|k| vals[k])
    }

    /// Exact transpose via a stable counting sort on columns.
    pub fn transpose(&self) -> Self {
        let mut row_ptr = vec![0usize; self.n_cols + 1];
        for &j in &self.col_idx {
            row_ptr[j + 1] += 1;
        }
        for j in 0..self.n_cols {
            row_ptr[j + 1] += row_ptr[j];
        }
        let mut next = row_ptr.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![T::zero(); self.nnz()];
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                let slot = next[j];
                col_idx[slot] = i;
                values[slot] = v;
                next[j] += 1;
            }
        }
        Self::from_parts_unchecked(self.n_cols, self.n_rows, row_ptr, col_idx, values)
    }

    pub fn to_dense(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out.set(i, j, v);
            }
        }
        out
    }

    /// `self · f`, accumulating each output row in CSR column order.
    pub fn spmm(&self, f: &Matrix<T>) -> Result<Matrix<T>> {
        if self.n_cols != f.rows() {
            return Err(Error::contract(format!(
                "spmm {}x{} · {}x{}",
                self.n_rows,
                self.n_cols,
                f.rows(),
                f.cols()
            )));
        }
        let d = f.cols();
        let mut out = Matrix::zeros(self.n_rows, d);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            let o = out.row_mut(i);
            for (&j, &a) in cols.iter().zip(vals) {
                for (oc, &x) in o.iter_mut().zip(f.row(j)) {
                    *oc = *oc + a * x;
                }
            }
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> CsrMatrix<U> {
        CsrMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: self.values.iter().map(|v| U::cast_from_f64(v.as_f64())).collect(),
        }
    }

    /// Same structure with each value replaced by `f(row, col, value)`.
    pub fn map_values(&self, mut f: impl FnMut(usize, usize, T) -> T) -> Self {
        let mut values = Vec::with_capacity(self.nnz());
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                values.push(f(i, j, v));
            }
        }
        Self {
            values,
            ..self.clone()
        }
    }
}

/// Free-function form of [`CsrMatrix::transpose`].
pub fn csr_transpose<T: Scalar>(a: &CsrMatrix<T>) -> CsrMatrix<T> {
    a.transpose()
}

/// Symmetrize and deduplicate an undirected edge list, then build
/// `D̂^{-1/2}(A + I)D̂^{-1/2}` in canonical CSR. Self-loops present in the
/// input are dropped and re-added exactly once.
pub fn normalize_adjacency<T: Scalar>(edges: &[(usize, usize)], n: usize) -> Result<CsrMatrix<T>> {
    if n == 0 {
        return Err(Error::input("graph must have at least one vertex"));
    }
    let mut degree = vec![1usize; n];
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(edges.len() * 2 + n);
    for &(u, v) in edges {
        if u >= n || v >= n {
            return Err(Error::input(format!("edge ({u},{v}) references vertex >= {n}")));
        }
        if u != v {
            pairs.push((u, v));
            pairs.push((v, u));
        }
    }
    pairs.extend((0..n).map(|v| (v, v)));
    pairs.sort_unstable();
    pairs.dedup();
    for &(u, v) in &pairs {
        if u != v {
            degree[u] += 1;
        }
    }
    let mut row_ptr = vec![0usize; n + 1];
    for &(u, _) in &pairs {
        row_ptr[u + 1] += 1;
    }
    for i in 0..n {
        row_ptr[i + 1] += row_ptr[i];
    }
    let values = pairs
        .iter()
        .map(|&(u, v)| T::cast_from_f64(1.0 / ((degree[u] * degree[v]) as f64).sqrt()))
        .collect();
    let col_idx = pairs.into_iter().map(|(_, v)| v).collect();
    CsrMatrix::try_new(n, n, row_ptr, col_idx, values)
}

/// Per-vertex role in the evaluation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
    Unused = 3,
}

impl Split {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            3 => Some(Split::Unused),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unused => "unused",
        })
    }
}

/// Node-classification dataset: normalized adjacency, features, labels and
/// split tags. Immutable once constructed.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T = f32> {
    pub adjacency: CsrMatrix<T>,
    pub features: Matrix<T>,
    pub labels: Vec<u32>,
    pub n_classes: usize,
    pub split: Vec<Split>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        adjacency: CsrMatrix<T>,
        features: Matrix<T>,
        labels: Vec<u32>,
        n_classes: usize,
        split: Vec<Split>,
    ) -> Result<Self> {
        let ds = Self {
            adjacency,
            features,
            labels,
            n_classes,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.adjacency.n_rows()
    }

    pub fn d_in(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.adjacency.n_rows();
        if self.adjacency.n_cols() != n {
            return Err(Error::input("adjacency must be square"));
        }
        if self.features.rows() != n || self.labels.len() != n || self.split.len() != n {
            return Err(Error::input(format!(
                "vertex count mismatch: adjacency {n}, features {}, labels {}, split {}",
                self.features.rows(),
                self.labels.len(),
                self.split.len()
            )));
        }
        if let Some((v, &c)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &c)| c as usize >= self.n_classes)
        {
            return Err(Error::input(format!(
                "vertex {v} has class {c} >= {}",
                self.n_classes
            )));
        }
        self.adjacency.check_canonical()
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            adjacency: self.adjacency.cast(),
            features: self.features.cast(),
            labels: self.labels.clone(),
            n_classes: self.n_classes,
            split: self.split.clone(),
        }
    }

    /// Off-diagonal structure as an undirected edge list with `u < v`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for u in 0..self.n() {
            for &v in self.adjacency.row(u).0 {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn count_split(&self, which: Split) -> usize {
        self.split.iter().filter(|&&s| s == which).count()
    }
}

/// Erdős–Rényi edges with expected degree `avg_degree`, generated by
/// geometric skipping in O(n + m).
fn random_edges(n: usize, avg_degree: f64, seed: u64) -> Vec<(usize, usize)> {
    if n < 2 || avg_degree <= 0.0 {
        return Vec::new();
    }
    let p = (avg_degree / (n - 1) as f64).min(1.0);
    let mut rng = stream(seed);
    let mut edges = Vec::new();
    if p >= 1.0 {
        for v in 1..n {
            for w in 0..v {
                edges.push((w, v));
            }
        }
        return edges;
    }
    let log_q = (1.0 - p).ln();
    let (mut v, mut w) = (1usize, -1i64);
    while v < n {
        let r: f64 = rng.random();
        w += 1 + ((1.0 - r).ln() / log_q).floor() as i64;
        while w >= v as i64 && v < n {
            w -= v as i64;
            v += 1;
        }
        if v < n {
            edges.push((w as usize, v));
        }
    }
    edges
}

/// Deterministic 60/20/20 train/val/test assignment.
fn random_split(n: usize, seed: u64) -> Vec<Split> {
    let mut rng = stream(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = n * 3 / 5;
    let n_val = n / 5;
    let mut split = vec![Split::Test; n];
    for (rank, &v) in order.iter().enumerate() {
        split[v] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    split
}

fn normal_features(n: usize, d_in: usize, seed: u64) -> Matrix<f32> {
    let mut rng = stream(seed);
    Matrix::from_fn(n, d_in, |_, _| rng.sample::<f32, _>(StandardNormal))
}

/// Random graph with i.i.d. standard-normal features and classes assigned by
/// degree quantile (vertices sorted by degree, cut into `n_classes` equal
/// bins, higher degree → higher class).
pub fn generate_synthetic(
    n: usize,
    avg_degree: f64,
    d_in: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Dataset<f32>> {
    if n == 0 {
        return Err(Error::input("n must be >= 1"));
    }
    if !(avg_degree >= 0.0) {
        return Err(Error::input("avg_degree must be >= 0"));
    }
    if n_classes < 2 {
        return Err(Error::input("need at least two classes"));
    }
    if n_classes > n {
        return Err(Error::input(format!("{n_classes} classes for {n} vertices")));
    }
    let edges = random_edges(n, avg_degree, mix64(seed, 1));
    let adjacency = normalize_adjacency::<f32>(&edges, n)?;
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (adjacency.row(v).0.len(), v));
    let mut labels = vec![0u32; n];
    for (rank, &v) in by_degree.iter().enumerate() {
        labels[v] = (rank * n_classes / n) as u32;
    }
    Dataset::new(
        adjacency,
        normal_features(n, d_in, mix64(seed, 2)),
        labels,
        n_classes,
        random_split(n, mix64(seed, 3)),
    )
}

/// Parameters of the homophilous block-model generator.
#[derive(Clone, Debug)]
pub struct SbmParams {
    pub n: usize,
    pub n_classes: usize,
    pub avg_degree: f64,
    /// Probability that an edge stays inside its source vertex's class.
    pub homophily: f64,
    pub d_in: usize,
    /// Scale of the per-class feature centroid relative to unit noise.
    pub signal: f64,
    pub seed: u64,
}

/// Stochastic-block-style dataset whose labels are learnable from graph
/// structure plus noisy class-dependent features.
pub fn generate_sbm(p: &SbmParams) -> Result<Dataset<f32>> {
    let SbmParams {
        n,
        n_classes,
        avg_degree,
        homophily,
        d_in,
        signal,
        seed,
    } = *p;
    if n_classes < 2 || n_classes > n {
        return Err(Error::input(format!("{n_classes} classes for {n} vertices")));
    }
    if !(0.0..=1.0).contains(&homophily) || !(avg_degree >= 0.0) {
        return Err(Error::input("homophily must lie in [0,1], avg_degree >= 0"));
    }
    let mut rng = stream(mix64(seed, 11));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut labels = vec![0u32; n];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (rank, &v) in order.iter().enumerate() {
        let c = rank % n_classes;
        labels[v] = c as u32;
        members[c].push(v);
    }
    let m = (n as f64 * avg_degree / 2.0).round() as usize;
    let mut edges = Vec::with_capacity(m);
    for _ in 0..m {
        let u = rng.random_range(0..n);
        let v = if rng.random::<f64>() < homophily {
            let pool = &members[labels[u] as usize];
            pool[rng.random_range(0..pool.len())]
        } else {
            rng.random_range(0..n)
        };
        edges.push((u, v));
    }
    let adjacency = normalize_adjacency::<f32>(&edges, n)?;
    let mut frng = stream(mix64(seed, 12));
    let centroids =
        Matrix::<f32>::from_fn(n_classes, d_in, |_, _| frng.sample::<f32, _>(StandardNormal));
    let noise = normal_features(n, d_in, mix64(seed, 13));
    let features = Matrix::from_fn(n, d_in, |i, j| {
        (signal as f32) * centroids.get(labels[i] as usize, j) + noise.get(i, j)
    });
    Dataset::new(
        adjacency,
        features,
        labels,
        n_classes,
        random_split(n, mix64(seed, 14)),
    )
}

const FEATURE_MAGIC: &[u8; 4] = b"SGNF";
const LABEL_MAGIC: &[u8; 4] = b"SGNL";
const SPLIT_MAGIC: &[u8; 4] = b"SGNS";

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

struct Header<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl<'a> Header<'a> {
    fn magic(&self, want: &[u8; 4]) -> Result<()> {
        match self.bytes.get(..4) {
            Some(m) if m == want => Ok(()),
            _ => Err(format_err(
                self.path,
                0,
                format!("bad magic, expected {:?}", String::from_utf8_lossy(want)),
            )),
        }
    }

    fn u64_at(&self, offset: usize) -> Result<u64> {
        self.bytes
            .get(offset..offset + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| format_err(self.path, offset, "truncated header"))
    }

    fn expect_len(&self, header: usize, count: usize, width: usize) -> Result<()> {
        let want = header + count * width;
        if self.bytes.len() != want {
            return Err(format_err(
                self.path,
                self.bytes.len().min(want),
                format!("expected {want} bytes, file has {}", self.bytes.len()),
            ));
        }
        Ok(())
    }
}

/// Parse a whitespace-separated `u v` edge list; `#` starts a comment.
pub fn read_edge_list(path: &Path) -> Result<Vec<(usize, usize)>> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| format_err(path, e.valid_up_to(), "edge list is not UTF-8"))?;
    let mut edges = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let body = line.split('#').next().unwrap_or("").trim();
        if !body.is_empty() {
            let mut it = body.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<usize> {
                tok.and_then(|t| t.parse().ok())
                    .ok_or_else(|| format_err(path, offset, format!("malformed edge line {body:?}")))
            };
            let u = parse(it.next())?;
            let v = parse(it.next())?;
            if it.next().is_some() {
                return Err(format_err(path, offset, format!("extra tokens in {body:?}")));
            }
            edges.push((u, v));
        }
        offset += line.len();
    }
    Ok(edges)
}

pub fn read_features(path: &Path) -> Result<Matrix<f32>> {
    let bytes = read_file(path)?;
    let h = Header { path, bytes: &bytes };
    h.magic(FEATURE_MAGIC)?;
    let n = h.u64_at(4)? as usize;
    let d = h.u64_at(12)? as usize;
    let count = n
        .checked_mul(d)
        .ok_or_else(|| format_err(path, 4, "n·d_in overflows"))?;
    h.expect_len(20, count, 4)?;
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(n, d, data)
}

pub fn read_labels(path: &Path) -> Result<(Vec<u32>, usize)> {
    let bytes = read_file(path)?;
    let h = Header { path, bytes: &bytes };
    h.magic(LABEL_MAGIC)?;
    let n = h.u64_at(4)? as usize;
    let n_classes = h.u64_at(12)? as usize;
    h.expect_len(20, n, 4)?;
    let mut labels = Vec::with_capacity(n);
    for (i, c) in bytes[20..].chunks_exact(4).enumerate() {
        let v = i32::from_le_bytes(c.try_into().unwrap());
        if v < 0 || v as usize >= n_classes {
            return Err(format_err(
                path,
                20 + 4 * i,
                format!("class id {v} outside [0, {n_classes})"),
            ));
        }
        labels.push(v as u32);
    }
    Ok((labels, n_classes))
}

pub fn read_split(path: &Path) -> Result<Vec<Split>> {
    let bytes = read_file(path)?;
    let h = Header { path, bytes: &bytes };
    h.magic(SPLIT_MAGIC)?;
    let n = h.u64_at(4)? as usize;
    h.expect_len(12, n, 1)?;
    bytes[12..]
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            Split::from_tag(t).ok_or_else(|| format_err(path, 12 + i, format!("bad split tag {t}")))
        })
        .collect()
}

/// Load a dataset from the four on-disk files and validate it.
pub fn load_dataset(
    graph_path: &Path,
    feature_path: &Path,
    label_path: &Path,
    split_path: &Path,
) -> Result<Dataset<f32>> {
    let features = read_features(feature_path)?;
    let n = features.rows();
    let (labels, n_classes) = read_labels(label_path)?;
    if labels.len() != n {
        return Err(format_err(
            label_path,
            4,
            format!("{} labels for {n} feature rows", labels.len()),
        ));
    }
    let split = read_split(split_path)?;
    if split.len() != n {
        return Err(format_err(
            split_path,
            4,
            format!("{} split tags for {n} feature rows", split.len()),
        ));
    }
    let edges = read_edge_list(graph_path)?;
    if let Some(&(u, v)) = edges.iter().find(|&&(u, v)| u >= n || v >= n) {
        return Err(format_err(
            graph_path,
            0,
            format!("edge ({u},{v}) references vertex >= {n}"),
        ));
    }
    let adjacency = normalize_adjacency(&edges, n)?;
    Dataset::new(adjacency, features, labels, n_classes, split)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_edge_list(path: &Path, edges: &[(usize, usize)]) -> Result<()> {
    let mut s = String::with_capacity(edges.len() * 12);
    s.push_str("# u v\n");
    for &(u, v) in edges {
        s.push_str(&format!("{u} {v}\n"));
    }
    write_file(path, s.as_bytes())
}

pub fn write_features(path: &Path, x: &Matrix<f32>) -> Result<()> {
    let mut b = Vec::with_capacity(20 + 4 * x.as_slice().len());
    b.extend_from_slice(FEATURE_MAGIC);
    b.extend_from_slice(&(x.rows() as u64).to_le_bytes());
    b.extend_from_slice(&(x.cols() as u64).to_le_bytes());
    for v in x.as_slice() {
        b.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &b)
}

pub fn write_labels(path: &Path, labels: &[u32], n_classes: usize) -> Result<()> {
    let mut b = Vec::with_capacity(20 + 4 * labels.len());
    b.extend_from_slice(LABEL_MAGIC);
    b.extend_from_slice(&(labels.len() as u64).to_le_bytes());
    b.extend_from_slice(&(n_classes as u64).to_le_bytes());
    for &c in labels {
        b.extend_from_slice(&(c as i32).to_le_bytes());
    }
    write_file(path, &b)
}

pub fn write_split(path: &Path, split: &[Split]) -> Result<()> {
    let mut b = Vec::with_capacity(12 + split.len());
    b.extend_from_slice(SPLIT_MAGIC);
    b.extend_from_slice(&(split.len() as u64).to_le_bytes());
    b.extend(split.iter().map(|&s| s as u8));
    write_file(path, &b)
}

/// File names used by [`save_dataset`] inside a directory.
pub const EDGE_FILE: &str = "edges.txt";
pub const FEATURE_FILE: &str = "features.sgnf";
pub const LABEL_FILE: &str = "labels.sgnl";
pub const SPLIT_FILE: &str = "split.sgns";

pub fn save_dataset(dir: &Path, ds: &Dataset<f32>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_edge_list(&dir.join(EDGE_FILE), &ds.edges())?;
    write_features(&dir.join(FEATURE_FILE), &ds.features)?;
    write_labels(&dir.join(LABEL_FILE), &ds.labels, ds.n_classes)?;
    write_split(&dir.join(SPLIT_FILE), &ds.split)
}

pub fn load_dataset_dir(dir: &Path) -> Result<Dataset<f32>> {
    load_dataset(
        &dir.join(EDGE_FILE),
        &dir.join(FEATURE_FILE),
        &dir.join(LABEL_FILE),
        &dir.join(SPLIT_FILE),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Dense oracle for the normalized adjacency.
    fn dense_normalized(edges: &[(usize, usize)], n: usize) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; n]; n];
        for &(u, v) in edges {
            if u != v {
                a[u][v] = 1.0;
                a[v][u] = 1.0;
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        (0..n)
            .map(|i| (0..n).map(|j| a[i][j] / (deg[i] * deg[j]).sqrt()).collect())
            .collect()
    }

    #[test]
    fn single_vertex() {
        let a = normalize_adjacency::<f64>(&[], 1).unwrap();
        assert_eq!(a.to_dense().as_slice(), &[1.0]);
    }

    #[test]
    fn single_edge_is_all_halves() {
        let a = normalize_adjacency::<f64>(&[(0, 1)], 2).unwrap();
        assert_eq!(a.to_dense().as_slice(), &[0.5; 4]);
    }

    #[test]
    fn star_center_leaf_entries() {
        let a = normalize_adjacency::<f64>(&[(0, 1), (0, 2), (0, 3)], 4).unwrap();
        let want = 1.0 / (2.0 * 2f64.sqrt());
        for leaf in 1..4 {
            assert!((a.get(0, leaf).unwrap() - want).abs() < 1e-15);
            assert!((a.get(leaf, 0).unwrap() - want).abs() < 1e-15);
            assert_eq!(a.get(leaf, leaf), Some(0.5));
        }
        assert_eq!(a.get(0, 0), Some(0.25));
        assert!((want - 0.353553).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            normalize_adjacency::<f32>(&[], 0),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            normalize_adjacency::<f32>(&[(0, 3)], 3),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn duplicates_and_self_loops_collapse() {
        let a = normalize_adjacency::<f64>(&[(0, 1), (1, 0), (0, 1), (1, 1)], 2).unwrap();
        assert_eq!(a.nnz(), 4);
        assert_eq!(a.to_dense().as_slice(), &[0.5; 4]);
    }

    #[test]
    fn transpose_examples() {
        let x = CsrMatrix::<f32>::from_triplets(1, 1, vec![(0, 0, 2.5)]).unwrap();
        assert_eq!(x.transpose(), x);
        let a = CsrMatrix::<f32>::from_triplets(2, 3, vec![(0, 2, 7.0)]).unwrap();
        let t = csr_transpose(&a);
        assert_eq!((t.n_rows(), t.n_cols()), (3, 2));
        assert_eq!(t.get(2, 0), Some(7.0));
        assert_eq!(t.nnz(), 1);
        let sym = normalize_adjacency::<f32>(&[(0, 1), (1, 2)], 3).unwrap();
        assert_eq!(sym.transpose(), sym);
    }

    #[test]
    fn try_new_rejects_non_canonical() {
        assert!(CsrMatrix::<f32>::try_new(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(CsrMatrix::<f32>::try_new(1, 3, vec![0, 1], vec![3], vec![1.0]).is_err());
        assert!(CsrMatrix::<f32>::try_new(1, 3, vec![0, 1], vec![0], vec![f32::NAN]).is_err());
        assert!(CsrMatrix::<f32>::try_new(2, 3, vec![0, 1], vec![0], vec![1.0]).is_err());
        assert!(CsrMatrix::<f32>::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 0, 2.0)]).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(200, 6.0, 8, 4, 9).unwrap();
        let b = generate_synthetic(200, 6.0, 8, 4, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(200, 6.0, 8, 4, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_zero_degree_has_only_self_loops() {
        let d = generate_synthetic(50, 0.0, 4, 2, 1).unwrap();
        assert_eq!(d.adjacency, CsrMatrix::identity(50));
    }

    #[test]
    fn synthetic_mean_degree_near_target() {
        let d = generate_synthetic(1000, 10.0, 4, 32, 3).unwrap();
        // empirical count straight off the CSR rows, self-loop excluded
        let total: usize = (0..1000).map(|v| d.adjacency.row(v).0.len() - 1).sum();
        let mean = total as f64 / 1000.0;
        assert!((mean - 10.0).abs() < 2.0, "mean degree {mean}");
    }

    #[test]
    fn synthetic_classes_follow_degree() {
        let d = generate_synthetic(400, 8.0, 4, 4, 5).unwrap();
        let deg = |v: usize| d.adjacency.row(v).0.len();
        for u in 0..400 {
            for v in 0..400 {
                if d.labels[u] < d.labels[v] {
                    assert!(deg(u) <= deg(v));
                }
            }
        }
        for c in 0..4u32 {
            assert_eq!(d.labels.iter().filter(|&&l| l == c).count(), 100);
        }
    }

    #[test]
    fn synthetic_rejects_too_many_classes() {
        assert!(generate_synthetic(3, 1.0, 2, 4, 0).is_err());
        assert!(generate_synthetic(3, 1.0, 2, 1, 0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(64, 4.0, 5, 3, 2).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(back.features.as_slice(), ds.features.as_slice());
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.split, ds.split);
        assert_eq!(back.adjacency, ds.adjacency);
    }

    #[test]
    fn load_reports_file_and_offset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(8, 2.0, 2, 2, 2).unwrap();
        save_dataset(dir.path(), &ds).unwrap();

        let lp = dir.path().join(LABEL_FILE);
        let mut labels = ds.labels.clone();
        labels[3] = 7;
        write_labels(&lp, &labels, 2).unwrap();
        match load_dataset_dir(dir.path()) {
            Err(Error::Format { path, offset, .. }) => {
                assert_eq!(path, lp);
                assert_eq!(offset, 20 + 12);
            }
            other => panic!("{other:?}"),
        }
        write_labels(&lp, &ds.labels, 2).unwrap();

        let fp = dir.path().join(FEATURE_FILE);
        let mut raw = fs::read(&fp).unwrap();
        raw[0] = b'X';
        fs::write(&fp, &raw).unwrap();
        assert!(matches!(
            load_dataset_dir(dir.path()),
            Err(Error::Format { offset: 0, .. })
        ));
        raw[0] = b'S';
        raw.pop();
        fs::write(&fp, &raw).unwrap();
        assert!(matches!(load_dataset_dir(dir.path()), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn normalized_matches_dense_oracle(
            n in 1usize..24,
            raw in proptest::collection::vec((0usize..24, 0usize..24), 0..60),
        ) {
            let edges: Vec<_> = raw.into_iter().map(|(u, v)| (u % n, v % n)).collect();
            let a = normalize_adjacency::<f64>(&edges, n).unwrap();
            a.check_canonical().unwrap();
            let want = dense_normalized(&edges, n);
            let got = a.to_dense();
            for i in 0..n {
                prop_assert!(a.get(i, i).is_some());
                for j in 0..n {
                    prop_assert!((got.get(i, j) - want[i][j]).abs() < 1e-14);
                    prop_assert_eq!(got.get(i, j), got.get(j, i));
                }
            }
        }

        #[test]
        fn transpose_is_involution(
            rows in 1usize..10, cols in 1usize..10,
            raw in proptest::collection::btree_set((0usize..10, 0usize..10), 0..40),
        ) {
            let t: Vec<_> = raw.into_iter()
                .filter(|&(i, j)| i < rows && j < cols)
                .map(|(i, j)| (i, j, (i * 10 + j) as f32 + 0.5))
                .collect();
            let a = CsrMatrix::from_triplets(rows, cols, t).unwrap();
            let at = a.transpose();
            at.check_canonical().unwrap();
            prop_assert_eq!(at.to_dense(), a.to_dense().transpose());
            prop_assert_eq!(at.transpose(), a);
        }
    }
}
