//! Normalized fast Walsh-Hadamard transforms and the transform-wrapped
//! matmuls built on them.
//!
//! The transform is applied blockwise: each contiguous run of `block_size`
//! elements along the relevant dimension is replaced by its normalized WHT.
//! This equals multiplication by a block-diagonal orthogonal matrix, so the
//! inner-transform matmul Q(A·H)·Q(Hᵀ·B) and the outer-transform matmul
//! Hᵀ(Q(H·A)·Q(B·H))H both reproduce the exact product when the quantizer is
//! the identity. Sylvester-ordered Hadamard matrices are symmetric, so Hᵀ = H
//! throughout.
//!
//! Butterflies run in f64 with a fixed reduction order; outputs round to f32.

use crate::error::{Error, Result};
use crate::matrix::{matmul_exact, DenseMatrix};
use crate::mxfp4::{matmul_quantized, Quantizer};

/// Blockwise transform configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HadamardConfig {
    /// Power-of-two length of the 1-D transform, applied to consecutive
    /// blocks. 32 matches the quantizer's scale-block length.
    pub block_size: usize,
}

impl HadamardConfig {
    pub fn new(block_size: usize) -> Result<Self> {
        if block_size < 2 || !block_size.is_power_of_two() {
            return Err(Error::Input(format!(
                "block_size must be a power of two >= 2, got {block_size}"
            )));
        }
        Ok(HadamardConfig { block_size })
    }

    /// Full-size transform over a power-of-two dimension.
    pub fn full(dim: usize) -> Result<Self> {
        HadamardConfig::new(dim)
    }
}

impl Default for HadamardConfig {
    fn default() -> Self {
        HadamardConfig { block_size: 32 }
    }
}

/// In-place unnormalized WHT butterflies over a power-of-two buffer.
fn wht_in_place(buf: &mut [f64]) {
    let n = buf.len();
    let mut h = 1;
    while h < n {
        let mut i = 0;
        while i < n {
            for j in i..i + h {
                let x = buf[j];
                let y = buf[j + h];
                buf[j] = x + y;
                buf[j + h] = x - y;
            }
            i += 2 * h;
        }
        h *= 2;
    }
}

/// Right multiplication A·H: the normalized WHT of each `block_size` run of
/// columns, per row (mixes values within each row).
pub fn fwht_rows(a: &DenseMatrix, cfg: &HadamardConfig) -> Result<DenseMatrix> {
    let bs = cfg.block_size;
    if a.cols() % bs != 0 {
        return Err(Error::Shape(format!(
            "cols = {} not divisible by transform block size {bs}",
            a.cols()
        )));
    }
    let inv_sqrt = 1.0 / (bs as f64).sqrt();
    let mut out = Vec::with_capacity(a.len());
    let mut buf = vec![0.0f64; bs];
    for i in 0..a.rows() {
        for block in a.row(i).chunks_exact(bs) {
            for (dst, &src) in buf.iter_mut().zip(block) {
                *dst = src as f64;
            }
            wht_in_place(&mut buf);
            out.extend(buf.iter().map(|&v| (v * inv_sqrt) as f32));
        }
    }
    Ok(DenseMatrix::from_vec_unchecked(a.rows(), a.cols(), out))
}

/// Left multiplication H·A: the normalized WHT of each `block_size` run of
/// rows, per column (mixes values within each column).
pub fn fwht_cols(a: &DenseMatrix, cfg: &HadamardConfig) -> Result<DenseMatrix> {
    let bs = cfg.block_size;
    if a.rows() % bs != 0 {
        return Err(Error::Shape(format!(
            "rows = {} not divisible by transform block size {bs}",
            a.rows()
        )));
    }
    let inv_sqrt = 1.0 / (bs as f64).sqrt();
    let (rows, cols) = a.shape();
    let mut out = vec![0.0f32; rows * cols];
    let mut buf = vec![0.0f64; bs];
    for bi in 0..rows / bs {
        for j in 0..cols {
            for (o, dst) in buf.iter_mut().enumerate() {
                *dst = a.get(bi * bs + o, j) as f64;
            }
            wht_in_place(&mut buf);
            for (o, &v) in buf.iter().enumerate() {
                out[(bi * bs + o) * cols + j] = (v * inv_sqrt) as f32;
            }
        }
    }
    Ok(DenseMatrix::from_vec_unchecked(rows, cols, out))
}

/// Inner-transform matmul: Q(A·H) · Q(Hᵀ·B), transforms along the shared
/// dimension.
pub fn iht_matmul(
    a: &DenseMatrix,
    b: &DenseMatrix,
    cfg: &HadamardConfig,
    quantizer: Quantizer,
) -> Result<DenseMatrix> {
    let at = fwht_rows(a, cfg)?;
    let bt = fwht_cols(b, cfg)?;
    match quantizer {
        Quantizer::Identity => matmul_exact(&at, &bt),
        Quantizer::Mxfp4 => matmul_quantized(&at, &bt),
    }
}

/// Outer-transform matmul: Hᵀ·(Q(H·A) · Q(B·H))·H, transforms along the outer
/// dimensions with inverse transforms on the product. Reference strategy only.
pub fn oht_matmul(
    a: &DenseMatrix,
    b: &DenseMatrix,
    cfg: &HadamardConfig,
    quantizer: Quantizer,
) -> Result<DenseMatrix> {
    let ta = fwht_cols(a, cfg)?; // H_m · A
    let tb = fwht_rows(b, cfg)?; // B · H_n
    let prod = match quantizer {
        Quantizer::Identity => matmul_exact(&ta, &tb)?,
        Quantizer::Mxfp4 => matmul_quantized(&ta, &tb)?,
    };
    let undone = fwht_cols(&prod, cfg)?; // H_mᵀ · P
    fwht_rows(&undone, cfg) // P · H_n
}
