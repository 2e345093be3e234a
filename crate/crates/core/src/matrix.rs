//! Dense row-major matrix primitives: cosine similarity, temperature softmax,
//! row-wise top-k and row normalization.
//!
//! Everything is stored as `f64`, including data that was loaded from
//! 32-bit files. Rankings break ties by the lower column index so that every
//! consumer (evaluation, ensembling, feature selection) agrees on the order.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row tolerance for [`ScoreMatrix::is_probability`] rows.
pub const PROBABILITY_ROW_TOL: f64 = 1e-9;

fn check_dense(rows: usize, cols: usize, data: &[f64], what: &str) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::shape(format!(
            "{what} must have at least one row and one column, got {rows}x{cols}"
        )));
    }
    if data.len() != rows * cols {
        return Err(Error::shape(format!(
            "{what} declared {rows}x{cols} but holds {} values",
            data.len()
        )));
    }
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "{what} entry ({}, {}) is not finite: {}",
            pos / cols,
            pos % cols,
            data[pos]
        )));
    }
    Ok(())
}

fn rows_from_nested(rows: &[Vec<f64>], what: &str) -> Result<(usize, usize, Vec<f64>)> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(n * d);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::shape(format!(
                "{what} row {i} has {} columns, expected {d}",
                r.len()
            )));
        }
        data.extend_from_slice(r);
    }
    Ok((n, d, data))
}

/// An `n x d` bank of feature vectors, one item per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dense(rows, cols, &data, "embedding matrix")?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let (n, d, data) = rows_from_nested(rows, "embedding matrix")?;
        Self::new(n, d, data)
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// A `queries x gallery` matrix of relevance scores; higher is more relevant.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    is_probability: bool,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dense(rows, cols, &data, "score matrix")?;
        Ok(Self {
            rows,
            cols,
            data,
            is_probability: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let (n, d, data) = rows_from_nested(rows, "score matrix")?;
        Self::new(n, d, data)
    }

    /// Builds a matrix whose rows are probability distributions, checking
    /// that every row sums to one and every entry lies in `(0, 1]`.
    pub fn probabilities(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(rows, cols, data)?;
        for (i, r) in m.data.chunks_exact(cols).enumerate() {
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > PROBABILITY_ROW_TOL {
                return Err(Error::invalid(format!("row {i} sums to {sum}, not 1")));
            }
            if let Some(j) = r.iter().position(|&p| p <= 0.0 || p > 1.0) {
                return Err(Error::invalid(format!(
                    "entry ({i}, {j}) = {} is not in (0, 1]",
                    r[j]
                )));
            }
        }
        m.is_probability = true;
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_probability(&self) -> bool {
        self.is_probability
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub(crate) fn ensure_same_shape(&self, other: &ScoreMatrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// Element-wise `w * self + (1 - w) * other`.
    pub fn convex_combine(&self, other: &ScoreMatrix, w: f64) -> Result<ScoreMatrix> {
        self.ensure_same_shape(other, "convex combination")?;
        let keep = 1.0 - w;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| w * a + keep * b)
            .collect();
        ScoreMatrix::new(self.rows, self.cols, data)
    }

    /// Rescales all entries into `[0, 1]` using the global minimum and
    /// maximum. A constant matrix maps to all zeros.
    pub fn min_max_normalized(&self) -> ScoreMatrix {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data.iter().map(|&v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        ScoreMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
            is_probability: false,
        }
    }

    pub fn scaled(&self, c: f64) -> Result<ScoreMatrix> {
        ScoreMatrix::new(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * c).collect(),
        )
    }

    pub fn transposed(&self) -> ScoreMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            data.extend((0..self.rows).map(|i| self.get(i, j)));
        }
        ScoreMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
            is_probability: false,
        }
    }
}

/// Per-row top-k gallery indices with their scores, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKResult {
    k: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl TopKResult {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_rows(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn indices(&self, row: usize) -> &[usize] {
        &self.indices[row * self.k..(row + 1) * self.k]
    }

    pub fn values(&self, row: usize) -> &[f64] {
        &self.values[row * self.k..(row + 1) * self.k]
    }

    pub fn index_rows(&self) -> impl Iterator<Item = &[usize]> {
        self.indices.chunks_exact(self.k)
    }
}

/// Ranking order: higher score first, then lower index.
#[inline]
pub(crate) fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Indices of the `k` best entries of `row`, best first.
pub(crate) fn topk_row(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |&a: &usize, &b: &usize| rank_order((a, row[a]), (b, row[b]));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

fn checked_norms(m: &EmbeddingMatrix, what: &'static str) -> Result<Vec<f64>> {
    m.rows()
        .enumerate()
        .map(|(i, r)| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                Ok(n)
            } else {
                Err(Error::ZeroNorm { what, row: i })
            }
        })
        .collect()
}

/// Cosine similarity between every row of `a` and every row of `b`.
pub fn cosine_similarity(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<ScoreMatrix> {
    if a.n_cols() != b.n_cols() {
        return Err(Error::shape(format!(
            "cosine similarity needs equal feature dims, got {} and {}",
            a.n_cols(),
            b.n_cols()
        )));
    }
    let na = checked_norms(a, "left operand")?;
    let nb = checked_norms(b, "right operand")?;
    let cols = b.n_rows();
    let mut data = vec![0.0; a.n_rows() * cols];
    data.par_chunks_mut(cols).enumerate().for_each(|(i, out)| {
        let ai = a.row(i);
        for (j, o) in out.iter_mut().enumerate() {
            let dot: f64 = ai.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            *o = (dot / (na[i] * nb[j])).clamp(-1.0, 1.0);
        }
    });
    ScoreMatrix::new(a.n_rows(), cols, data)
}

/// Row-wise softmax of `s / tau`, stabilized by subtracting each row max.
pub fn row_softmax(s: &ScoreMatrix, tau: f64) -> Result<ScoreMatrix> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::param(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let mut data = s.as_slice().to_vec();
    for row in data.chunks_exact_mut(s.n_cols()) {
        softmax_in_place(row, tau);
    }
    Ok(ScoreMatrix {
        rows: s.n_rows(),
        cols: s.n_cols(),
        data,
        is_probability: true,
    })
}

pub(crate) fn softmax_in_place(row: &mut [f64], tau: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// The `k` highest-scoring gallery entries of every row, ties broken by
/// lower gallery index.
pub fn topk_rows(s: &ScoreMatrix, k: usize) -> Result<TopKResult> {
    if k == 0 || k > s.n_cols() {
        return Err(Error::param(format!(
            "k must be in [1, {}], got {k}",
            s.n_cols()
        )));
    }
    let per_row: Vec<Vec<usize>> = (0..s.n_rows())
        .into_par_iter()
        .map(|i| topk_row(s.row(i), k))
        .collect();
    let mut indices = Vec::with_capacity(s.n_rows() * k);
    let mut values = Vec::with_capacity(s.n_rows() * k);
    for (i, idx) in per_row.into_iter().enumerate() {
        let row = s.row(i);
        values.extend(idx.iter().map(|&j| row[j]));
        indices.extend(idx);
    }
    Ok(TopKResult { k, indices, values })
}

/// Scales every row to unit L2 norm.
pub fn l2_normalize_rows(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let norms = checked_norms(m, "embedding matrix")?;
    let data = m
        .rows()
        .zip(&norms)
        .flat_map(|(r, &n)| r.iter().map(move |v| v / n))
        .collect();
    EmbeddingMatrix::new(m.n_rows(), m.n_cols(), data)
}
