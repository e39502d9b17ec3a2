//! Dense row-major matrices and the statistics used throughout the crate.
//!
//! `DenseMatrix` is the universal operand: activations, weights, gradients and
//! every intermediate product. Entries are `f32` (the stand-in for the
//! high-precision side of the pipeline); reductions that feed statistics or
//! reference products accumulate in `f64`.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Row-major 2-D array of finite `f32` values.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DenseMatrix({}x{})", self.rows, self.cols)
    }
}

impl DenseMatrix {
    /// Construct from row-major data. Rejects empty dimensions, length
    /// mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("dimensions must be positive, got {rows}x{cols}")));
        }
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Input(format!("{rows}x{cols} overflows the element count")))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match {rows}x{cols} = {expected}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite entry {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Construct without the finiteness scan. For internal results whose
    /// entries are finite by construction.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        DenseMatrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    /// iid standard normal entries from the given generator.
    pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal() as f32).collect();
        DenseMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f32) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut data = vec![0.0f32; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        DenseMatrix { rows: self.cols, cols: self.rows, data }
    }

    /// Frobenius norm, accumulated in f64.
    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }
}

/// Summary statistics of a matrix.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MatrixStats {
    /// Outlier factor: rows*cols * max|a_ij|^2 / ||A||_F^2. 1 for a flat
    /// matrix, rows*cols when all energy sits in one entry.
    pub gamma: f64,
    /// Excess kurtosis of the flattened entries.
    pub kurtosis: f64,
    pub frob_norm: f64,
    pub max_abs: f64,
}

/// Exact reference product: C = A·B with f64 accumulation, rounded to f32.
pub fn matmul_exact(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}: inner dimensions differ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = a.row(i);
        for (p, &aip) in arow.iter().enumerate().take(k) {
            let aip = aip as f64;
            let brow = b.row(p);
            for j in 0..n {
                acc[j] += aip * brow[j] as f64;
            }
        }
        for j in 0..n {
            out[i * n + j] = acc[j] as f32;
        }
    }
    Ok(DenseMatrix::from_vec_unchecked(m, n, out))
}

/// Outlier factor gamma = mn * max|a_ij|^2 / ||A||_F^2.
pub fn outlier_factor(a: &DenseMatrix) -> Result<f64> {
    let mut max_sq = 0.0f64;
    let mut sum_sq = 0.0f64;
    for &v in a.as_slice() {
        let v = v as f64;
        let sq = v * v;
        sum_sq += sq;
        if sq > max_sq {
            max_sq = sq;
        }
    }
    if sum_sq == 0.0 {
        return Err(Error::DegenerateInput("outlier factor of an all-zero matrix".into()));
    }
    Ok((a.rows * a.cols) as f64 * max_sq / sum_sq)
}

/// Excess kurtosis (fourth standardized moment minus 3) of the flattened
/// entries, using population moments.
pub fn excess_kurtosis(a: &DenseMatrix) -> Result<f64> {
    let n = a.len();
    if n < 4 {
        return Err(Error::DegenerateInput(format!("kurtosis needs at least 4 entries, got {n}")));
    }
    let nf = n as f64;
    let mean = a.as_slice().iter().map(|&v| v as f64).sum::<f64>() / nf;
    let mut m2 = 0.0f64;
    let mut m4 = 0.0f64;
    for &v in a.as_slice() {
        let d = v as f64 - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m4 /= nf;
    if m2 == 0.0 {
        return Err(Error::DegenerateInput("kurtosis of a constant matrix".into()));
    }
    Ok(m4 / (m2 * m2) - 3.0)
}

/// All summary statistics in one pass set.
pub fn stats(a: &DenseMatrix) -> Result<MatrixStats> {
    Ok(MatrixStats {
        gamma: outlier_factor(a)?,
        kurtosis: excess_kurtosis(a)?,
        frob_norm: a.frob_norm(),
        max_abs: a.max_abs() as f64,
    })
}
