//! Dense batch primitives: pairwise distances and dot products, row-wise
//! l2 normalization and its vector-Jacobian product.
//!
//! All reductions are plain left-to-right loops so that a given input always
//! produces bit-identical output.

use ndarray::{Array1, Array2, ArrayView1};

use crate::{Error, Result};

/// Rows with a norm at or below this are rejected by normalization.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// An `m x d` batch of embedded points, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    data: Array2<f64>,
    normalized: bool,
}

impl EmbeddingBatch {
    /// Wraps a matrix, rejecting non-finite entries.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some(((r, c), v)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite embedding entry {v} at ({r}, {c})"
            )));
        }
        Ok(Self {
            data,
            normalized: false,
        })
    }

    /// Builds a batch from row vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput("ragged embedding rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data =
            Array2::from_shape_vec((m, d), flat).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Self::new(data)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }
}

/// Symmetric matrix of unsquared Euclidean distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(Array2<f64>);

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    /// Entry-wise square, for losses written in terms of `D^2`.
    pub fn squared(&self) -> Array2<f64> {
        self.0.mapv(|v| v * v)
    }

    /// Builds a distance matrix from 1-D coordinates. Handy for small
    /// hand-checked instances.
    pub fn from_points_1d(xs: &[f64]) -> Self {
        let m = xs.len();
        Self(Array2::from_shape_fn((m, m), |(i, j)| {
            (xs[i] - xs[j]).abs()
        }))
    }
}

/// Matrix of dot products `S[i][j] = E_i . E_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Array2<f64>);

impl SimilarityMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }
}

fn check_nonempty(e: &EmbeddingBatch) -> Result<()> {
    if e.is_empty() {
        return Err(Error::InvalidInput("empty embedding batch".into()));
    }
    Ok(())
}

#[inline]
fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let t = x - y;
        s += t * t;
    }
    s
}

#[inline]
pub(crate) fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        s += x * y;
    }
    s
}

/// Unsquared Euclidean distances between every pair of rows.
pub fn pairwise_distances(e: &EmbeddingBatch) -> Result<DistanceMatrix> {
    check_nonempty(e)?;
    let m = e.len();
    let mut d = Array2::zeros((m, m));
    for i in 0..m {
        for j in (i + 1)..m {
            let v = sq_dist(e.row(i), e.row(j)).sqrt();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    Ok(DistanceMatrix(d))
}

/// Squared Euclidean distances between every pair of rows, computed
/// directly (not by squaring [`pairwise_distances`]).
pub fn pairwise_sq_distances(e: &EmbeddingBatch) -> Result<ndarray::Array2<f64>> {
    check_nonempty(e)?;
    let m = e.len();
    let mut d = Array2::zeros((m, m));
    for i in 0..m {
        for j in (i + 1)..m {
            let v = sq_dist(e.row(i), e.row(j));
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    Ok(d)
}

/// Dot products between every pair of rows.
pub fn pairwise_similarities(e: &EmbeddingBatch) -> Result<SimilarityMatrix> {
    check_nonempty(e)?;
    let m = e.len();
    let mut s = Array2::zeros((m, m));
    for i in 0..m {
        for j in i..m {
            let v = dot(e.row(i), e.row(j));
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    Ok(SimilarityMatrix(s))
}

fn row_norm(x: ArrayView1<f64>) -> f64 {
    dot(x, x).sqrt()
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(e: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    let mut out = e.data.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row_norm(row.view());
        if n <= MIN_ROW_NORM {
            return Err(Error::DegenerateRow { row: i, norm: n });
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok(EmbeddingBatch {
        data: out,
        normalized: true,
    })
}

/// Pulls `upstream` (a gradient w.r.t. `x / |x|`) back to a gradient w.r.t. `x`:
/// `(I - u u^T) upstream / |x|` with `u = x / |x|`.
pub fn l2_normalize_backward(x: ArrayView1<f64>, upstream: ArrayView1<f64>) -> Result<Array1<f64>> {
    if x.len() != upstream.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: x has {}, upstream has {}",
            x.len(),
            upstream.len()
        )));
    }
    let n = row_norm(x);
    if n <= MIN_ROW_NORM {
        return Err(Error::DegenerateRow { row: 0, norm: n });
    }
    let radial = dot(x, upstream) / n;
    Ok(Array1::from_shape_fn(x.len(), |k| {
        (upstream[k] - x[k] / n * radial) / n
    }))
}
