//! Binary classification datasets: LibSVM parsing and serialization,
//! client partitioning, and synthetic generators.

use std::fmt::Write as _;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{sigmoid, Shard};
use crate::rng::{SeedTree, StreamRng};

const SHUFFLE_STREAM: u64 = 2;
const DIRICHLET_STREAM: u64 = 3;
const GAUSSIAN_STREAM: u64 = 4;
const ADULT_STREAM: u64 = 5;

/// Category counts of the one-hot feature groups used by
/// [`adult_like`]. They sum to 122.
pub const ADULT_GROUPS: [usize; 14] = [5, 8, 5, 16, 5, 7, 14, 6, 5, 2, 2, 2, 5, 40];
/// Row count of the `a5a` training file.
pub const ADULT_ROWS: usize = 6414;

/// A sparse row with 0-based, strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseRow {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseRow {
    pub fn from_dense(x: &[f64]) -> Self {
        let mut row = SparseRow::default();
        for (j, &v) in x.iter().enumerate() {
            if v != 0.0 {
                row.indices.push(j);
                row.values.push(v);
            }
        }
        row
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    fn write_dense(&self, out: &mut [f64]) {
        for (&j, &v) in self.indices.iter().zip(&self.values) {
            out[j] = v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    rows: Vec<SparseRow>,
    labels: Vec<f64>,
    dim: usize,
}

impl Dataset {
    pub fn new(rows: Vec<SparseRow>, labels: Vec<f64>, dim: usize) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::input(format!("{} rows but {} labels", rows.len(), labels.len())));
        }
        if let Some(b) = labels.iter().find(|&&b| b != 1.0 && b != -1.0) {
            return Err(Error::input(format!("label {b} is not -1 or +1")));
        }
        for (s, row) in rows.iter().enumerate() {
            if row.indices.len() != row.values.len() {
                return Err(Error::input(format!("row {s}: index and value counts differ")));
            }
            if row.indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::input(format!("row {s}: indices are not strictly increasing")));
            }
            if row.indices.last().is_some_and(|&j| j >= dim) {
                return Err(Error::input(format!("row {s}: index exceeds dimension {dim}")));
            }
        }
        Ok(Self { rows, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[SparseRow] {
        &self.rows
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Pads the feature space to `dim` columns, e.g. when a file's largest
    /// index is smaller than the documented dimension.
    pub fn with_dim(mut self, dim: usize) -> Result<Self> {
        if dim < self.dim {
            return Err(Error::input(format!("cannot shrink dimension {} to {dim}", self.dim)));
        }
        self.dim = dim;
        Ok(self)
    }

    pub fn dense_row(&self, s: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.rows[s].write_dense(&mut out);
        out
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// Reads LibSVM text: `label index:value ...` per line, 1-based indices.
///
/// Labels must be all in {-1, +1} or all in {0, 1}; the latter are mapped to
/// {-1, +1}. The dimension is the largest index seen.
pub fn parse_libsvm<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut raw_labels = Vec::new();
    let mut label_lines = Vec::new();
    let mut dim = 0usize;
    for (k, line) in reader.lines().enumerate() {
        let lineno = k + 1;
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().unwrap_or_default();
        let label: f64 = label_tok
            .parse()
            .map_err(|_| parse_err(lineno, format!("label {label_tok:?} is not a number")))?;
        let mut row = SparseRow::default();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(lineno, format!("malformed pair {tok:?}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| parse_err(lineno, format!("malformed index in {tok:?}")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| parse_err(lineno, format!("malformed value in {tok:?}")))?;
            if idx == 0 {
                return Err(parse_err(lineno, "feature indices start at 1"));
            }
            if !val.is_finite() {
                return Err(parse_err(lineno, format!("non-finite value in {tok:?}")));
            }
            if row.indices.last().is_some_and(|&last| idx - 1 <= last) {
                return Err(parse_err(lineno, format!("index {idx} is not strictly increasing")));
            }
            row.indices.push(idx - 1);
            row.values.push(val);
            dim = dim.max(idx);
        }
        rows.push(row);
        raw_labels.push(label);
        label_lines.push(lineno);
    }
    let zero_one = raw_labels.iter().all(|&b| b == 0.0 || b == 1.0);
    let mut labels = Vec::with_capacity(raw_labels.len());
    for (&b, &lineno) in raw_labels.iter().zip(&label_lines) {
        let mapped = match b {
            _ if zero_one && b == 0.0 => -1.0,
            _ if b == 1.0 => 1.0,
            _ if b == -1.0 => -1.0,
            _ => return Err(parse_err(lineno, format!("label {b} is not binary (expected -1/+1 or 0/1)"))),
        };
        labels.push(mapped);
    }
    Dataset::new(rows, labels, dim)
}

pub fn read_libsvm(path: &std::path::Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::input(format!("cannot open {}: {e}", path.display())))?;
    parse_libsvm(std::io::BufReader::new(file))
}

/// LibSVM text that [`parse_libsvm`] reads back to the same dataset, as long
/// as the largest column carries a nonzero somewhere.
pub fn to_libsvm(dataset: &Dataset) -> String {
    let mut out = String::new();
    for (row, &b) in dataset.rows.iter().zip(&dataset.labels) {
        out.push_str(if b > 0.0 { "+1" } else { "-1" });
        for (&j, &v) in row.indices.iter().zip(&row.values) {
            let _ = write!(out, " {}:{}", j + 1, v);
        }
        out.push('\n');
    }
    out
}

/// Shuffles the rows with `seed` and deals `⌊rows/n⌋` consecutive rows to
/// each client. The remainder is discarded.
pub fn partition(dataset: &Dataset, n: usize, seed: u64) -> Result<Vec<Shard>> {
    if n == 0 {
        return Err(Error::input("cannot partition across zero clients"));
    }
    if n > dataset.len() {
        return Err(Error::input(format!("{} rows cannot be split across {n} clients", dataset.len())));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = SeedTree::new(seed).stream(SHUFFLE_STREAM, 0);
    order.shuffle(&mut rng);
    let m = dataset.len() / n;
    let d = dataset.dim;
    (0..n)
        .map(|i| {
            let mut features = vec![0.0; m * d];
            let mut labels = Vec::with_capacity(m);
            for (slot, &s) in order[i * m..(i + 1) * m].iter().enumerate() {
                dataset.rows[s].write_dense(&mut features[slot * d..(slot + 1) * d]);
                labels.push(dataset.labels[s]);
            }
            Shard::from_flat(features, labels, d)
        })
        .collect()
}

/// `n` points drawn from Dirichlet(α·1_d), one per client, with labels from
/// a fair coin.
pub fn dirichlet_synthetic(n: usize, d: usize, alpha: f64, seed: u64) -> Result<Dataset> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::input(format!("Dirichlet parameter must be positive, got {alpha}")));
    }
    if n == 0 || d < 2 {
        return Err(Error::input(format!("need n >= 1 and d >= 2, got n = {n}, d = {d}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::input(e.to_string()))?;
    let tree = SeedTree::new(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let mut rng = tree.stream(DIRICHLET_STREAM, s as u64);
        let mut x = sample_simplex(&gamma, d, &mut rng);
        // With tiny α every draw can underflow to zero.
        if x.iter().all(|&v| v == 0.0) {
            x[rng.random_range(0..d)] = 1.0;
        }
        labels.push(if rng.random::<bool>() { 1.0 } else { -1.0 });
        rows.push(SparseRow::from_dense(&x));
    }
    Dataset::new(rows, labels, d)
}

fn sample_simplex(gamma: &Gamma<f64>, d: usize, rng: &mut StreamRng) -> Vec<f64> {
    let mut x: Vec<f64> = (0..d).map(|_| gamma.sample(rng)).collect();
    let total: f64 = x.iter().sum();
    if total > 0.0 {
        x.iter_mut().for_each(|v| *v /= total);
    }
    x
}

/// Gaussian features `N(0, 1/d)` with labels drawn from a logistic model
/// around a random unit-norm direction scaled by `signal`.
pub fn gaussian_logistic(rows: usize, d: usize, signal: f64, seed: u64) -> Result<Dataset> {
    if rows == 0 || d == 0 {
        return Err(Error::input("need at least one row and one feature"));
    }
    let tree = SeedTree::new(seed);
    let mut rng = tree.stream(GAUSSIAN_STREAM, 0);
    let mut w: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let wn = crate::linalg::norm(&w).max(f64::MIN_POSITIVE);
    w.iter_mut().for_each(|v| *v *= signal / wn);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out_rows = Vec::with_capacity(rows);
    let mut labels = Vec::with_capacity(rows);
    for s in 0..rows {
        let mut rng = tree.stream(GAUSSIAN_STREAM, 1 + s as u64);
        let x: Vec<f64> = (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let prob = sigmoid(crate::linalg::dot(&x, &w));
        labels.push(if rng.random::<f64>() < prob { 1.0 } else { -1.0 });
        out_rows.push(SparseRow::from_dense(&x));
    }
    Dataset::new(out_rows, labels, d)
}

/// A stand-in for the `a5a` census data with the same shape: 122 binary
/// features in one-hot groups, one active category per group, skewed
/// category frequencies and labels from a planted logistic model with about
/// a quarter positives.
pub fn adult_like(rows: usize, seed: u64) -> Result<Dataset> {
    if rows == 0 {
        return Err(Error::input("need at least one row"));
    }
    let d: usize = ADULT_GROUPS.iter().sum();
    let tree = SeedTree::new(seed);
    let mut rng = tree.stream(ADULT_STREAM, 0);
    // Zipf-like category weights, shuffled within each group.
    let mut cdfs = Vec::with_capacity(ADULT_GROUPS.len());
    for &size in &ADULT_GROUPS {
        let mut weights: Vec<f64> = (1..=size).map(|r| 1.0 / (r as f64).powf(1.2)).collect();
        weights.shuffle(&mut rng);
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        cdfs.push(
            weights
                .iter()
                .map(|w| {
                    acc += w / total;
                    acc
                })
                .collect::<Vec<f64>>(),
        );
    }
    let w: Vec<f64> = (0..d).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let bias = -1.6;
    let mut out_rows = Vec::with_capacity(rows);
    let mut labels = Vec::with_capacity(rows);
    for s in 0..rows {
        let mut rng = tree.stream(ADULT_STREAM, 1 + s as u64);
        let mut row = SparseRow::default();
        let mut offset = 0;
        let mut score = bias;
        for (size, cdf) in ADULT_GROUPS.iter().zip(&cdfs) {
            let r: f64 = rng.random();
            let c = cdf.iter().position(|&q| r < q).unwrap_or(size - 1);
            row.indices.push(offset + c);
            row.values.push(1.0);
            score += w[offset + c] / (ADULT_GROUPS.len() as f64).sqrt();
            offset += size;
        }
        labels.push(if rng.random::<f64>() < sigmoid(score) { 1.0 } else { -1.0 });
        out_rows.push(row);
    }
    Dataset::new(out_rows, labels, d)
}
