//! MXFP4 block quantization.
//!
//! Elements are 4-bit E2M1 codes (sign plus magnitude in
//! {0, 0.5, 1, 1.5, 2, 3, 4, 6}) sharing one power-of-two scale per block of
//! 32 consecutive elements along the quantization axis. The block scale
//! exponent is `floor(log2(amax)) - 2`, clamped to [-127, 127], which places
//! the block's max-abs value in [4, 8) after scaling, i.e. near the top code.
//! Rounding is to the nearest code value with ties resolved toward the even
//! magnitude code (the E2M1 analogue of IEEE round-half-to-even).
//!
//! All scale arithmetic is done on exponent bits and exact power-of-two
//! multiplies, so quantization is bit-deterministic across platforms.

use crate::error::{Error, Result};
use crate::matrix::{matmul_exact, DenseMatrix};

/// E2M1 magnitude table, indexed by the 3-bit magnitude code.
pub const CODE_MAGNITUDES: [f32; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

/// Elements per scale block.
pub const BLOCK_LEN: usize = 32;

/// Axis along which the 32 consecutive elements of a block run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockAxis {
    /// Blocks run down the rows (within a column); `rows % 32 == 0`.
    AlongRows,
    /// Blocks run along the columns (within a row); `cols % 32 == 0`.
    AlongCols,
}

/// Which quantizer a transform-aware matmul applies to its operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantizer {
    /// Pass operands through unchanged (exact arithmetic).
    Identity,
    /// MXFP4 block quantization along the shared dimension.
    Mxfp4,
}

/// MXFP4-quantized tensor: packed 4-bit codes plus one i8 scale exponent per
/// 32-element block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MxfpTensor {
    rows: usize,
    cols: usize,
    block_axis: BlockAxis,
    /// Nibbles in row-major element order, element 2i in the low nibble.
    codes: Vec<u8>,
    /// One exponent per block, in block enumeration order (see `block_index`).
    scales: Vec<i8>,
}

impl MxfpTensor {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn block_axis(&self) -> BlockAxis {
        self.block_axis
    }

    pub fn scales(&self) -> &[i8] {
        &self.scales
    }

    /// 4-bit code of element (i, j): sign in bit 3, magnitude index in bits 0..3.
    pub fn code(&self, i: usize, j: usize) -> u8 {
        let linear = i * self.cols + j;
        let byte = self.codes[linear / 2];
        if linear % 2 == 0 {
            byte & 0x0f
        } else {
            byte >> 4
        }
    }

    /// Scale exponent of the block containing element (i, j).
    pub fn scale_exponent(&self, i: usize, j: usize) -> i8 {
        self.scales[self.block_index(i, j)]
    }

    fn block_index(&self, i: usize, j: usize) -> usize {
        match self.block_axis {
            BlockAxis::AlongCols => i * (self.cols / BLOCK_LEN) + j / BLOCK_LEN,
            BlockAxis::AlongRows => (i / BLOCK_LEN) * self.cols + j,
        }
    }
}

/// floor(log2(x)) for finite positive x, from the exponent bits.
fn floor_log2_f32(x: f32) -> i32 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let exp = ((bits >> 23) & 0xff) as i32;
    if exp != 0 {
        exp - 127
    } else {
        // subnormal: value = mantissa * 2^-149
        let mantissa = bits & 0x007f_ffff;
        31 - mantissa.leading_zeros() as i32 - 149
    }
}

/// Exact 2^e as f64 (e in the normal range).
fn pow2_f64(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// Exact 2^e as f32 for e in [-149, 127].
fn pow2_f32(e: i32) -> f32 {
    debug_assert!((-149..=127).contains(&e));
    if e >= -126 {
        f32::from_bits(((e + 127) as u32) << 23)
    } else {
        f32::from_bits(1u32 << (e + 149))
    }
}

/// Block scale exponent for a block with the given max-abs value.
fn scale_exponent_for(amax: f32) -> i8 {
    if amax == 0.0 {
        return 0;
    }
    (floor_log2_f32(amax) - 2).clamp(-127, 127) as i8
}

/// Nearest-code encoding of one value given the block exponent. Ties go to
/// the even magnitude index; the sign bit is taken from the input sign.
fn encode(value: f32, exponent: i8) -> u8 {
    let sign = if value.is_sign_negative() { 0x8u8 } else { 0x0u8 };
    // Exact: |value| and 2^e are both powers-of-two-scaled binary floats.
    let scaled = value.abs() as f64 / pow2_f64(exponent as i32);
    let mut best = 0usize;
    let mut best_diff = f64::INFINITY;
    for (idx, &mag) in CODE_MAGNITUDES.iter().enumerate() {
        let diff = (scaled - mag as f64).abs();
        if diff < best_diff || (diff == best_diff && idx % 2 == 0 && best % 2 == 1) {
            best = idx;
            best_diff = diff;
        }
    }
    sign | best as u8
}

/// Decoded value of a 4-bit code under the given block exponent. Exact.
pub fn decode(code: u8, exponent: i8) -> f32 {
    let mag = CODE_MAGNITUDES[(code & 0x7) as usize];
    let v = mag * pow2_f32(exponent as i32);
    if code & 0x8 != 0 {
        -v
    } else {
        v
    }
}

fn check_axis(a: &DenseMatrix, axis: BlockAxis) -> Result<()> {
    let (len, name) = match axis {
        BlockAxis::AlongRows => (a.rows(), "rows"),
        BlockAxis::AlongCols => (a.cols(), "cols"),
    };
    if len % BLOCK_LEN != 0 {
        return Err(Error::Shape(format!(
            "{name} = {len} not divisible by block length {BLOCK_LEN}"
        )));
    }
    Ok(())
}

/// Quantize a matrix to MXFP4 with per-block power-of-two scales along `axis`.
pub fn quantize(a: &DenseMatrix, axis: BlockAxis) -> Result<MxfpTensor> {
    check_axis(a, axis)?;
    let (rows, cols) = a.shape();
    let mut codes = vec![0u8; (rows * cols + 1) / 2];
    let mut set_code = |linear: usize, nibble: u8| {
        if linear % 2 == 0 {
            codes[linear / 2] |= nibble;
        } else {
            codes[linear / 2] |= nibble << 4;
        }
    };

    let mut scales = Vec::new();
    match axis {
        BlockAxis::AlongCols => {
            for i in 0..rows {
                let row = a.row(i);
                for (b, block) in row.chunks_exact(BLOCK_LEN).enumerate() {
                    let amax = block.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
                    let e = scale_exponent_for(amax);
                    scales.push(e);
                    for (o, &v) in block.iter().enumerate() {
                        set_code(i * cols + b * BLOCK_LEN + o, encode(v, e));
                    }
                }
            }
        }
        BlockAxis::AlongRows => {
            for bi in 0..rows / BLOCK_LEN {
                for j in 0..cols {
                    let mut amax = 0.0f32;
                    for o in 0..BLOCK_LEN {
                        amax = amax.max(a.get(bi * BLOCK_LEN + o, j).abs());
                    }
                    let e = scale_exponent_for(amax);
                    scales.push(e);
                    for o in 0..BLOCK_LEN {
                        let i = bi * BLOCK_LEN + o;
                        set_code(i * cols + j, encode(a.get(i, j), e));
                    }
                }
            }
        }
    }

    Ok(MxfpTensor { rows, cols, block_axis: axis, codes, scales })
}

/// Expand a quantized tensor back to a dense matrix. Every entry is exactly
/// `code_value * 2^scale_exponent`.
pub fn dequantize(q: &MxfpTensor) -> DenseMatrix {
    let mut data = Vec::with_capacity(q.rows * q.cols);
    for i in 0..q.rows {
        for j in 0..q.cols {
            data.push(decode(q.code(i, j), q.scale_exponent(i, j)));
        }
    }
    DenseMatrix::from_vec_unchecked(q.rows, q.cols, data)
}

/// C = Q(A)·Q(B) with both operands quantized along the shared dimension.
pub fn matmul_quantized(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}: inner dimensions differ",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let qa = quantize(a, BlockAxis::AlongCols)?;
    let qb = quantize(b, BlockAxis::AlongRows)?;
    matmul_exact(&dequantize(&qa), &dequantize(&qb))
}
