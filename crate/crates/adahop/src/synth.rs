//! Seeded synthetic tensors with planted outlier patterns.
//!
//! Base entries are iid standard normal; Row/Column patterns multiply a few
//! randomly placed rows/columns by a scale factor. When a kurtosis target is
//! set, the scale is tuned by bisection until the measured excess kurtosis of
//! the whole tensor lands within ±10% of the target. Base entries and outlier
//! placement come from separate substreams of the seed, so the same seed
//! yields the same tensor regardless of how the scale was chosen.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{excess_kurtosis, DenseMatrix};
use crate::pattern::OutlierPattern;
use crate::rng::Rng;
use crate::strategy::PatternPair;

const TAG_BASE: u64 = 0x01;
const TAG_PLACEMENT: u64 = 0x02;
const TAG_PAIR_LEFT: u64 = 0x11;
const TAG_PAIR_RIGHT: u64 = 0x12;

/// Bisection domain and iteration cap for kurtosis tuning.
const SCALE_LO: f64 = 1.0;
const SCALE_HI: f64 = 1e4;
const MAX_BISECTION_ITERS: usize = 64;
/// Accept when measured kurtosis is within this relative band of the target.
const KURTOSIS_BAND: f64 = 0.10;

/// Default planted slice count. Two slices keep the kurtosis ceiling
/// (3*dim/count - 3) comfortably above the targets used by the sweeps while
/// still giving the detector a wide margin at scale 100.
pub const DEFAULT_OUTLIER_COUNT: usize = 2;
/// Default multiplicative magnitude when no kurtosis target is set.
pub const DEFAULT_OUTLIER_SCALE: f32 = 100.0;

/// Specification of one synthetic tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    pub pattern: OutlierPattern,
    /// Number of planted rows/columns. Must be 0 for the None pattern.
    pub outlier_count: usize,
    /// Multiplicative magnitude of planted slices (>= 1).
    pub outlier_scale: f32,
    pub seed: u64,
    /// When set, the scale is bisection-tuned to hit this excess kurtosis.
    #[serde(default)]
    pub target_kurtosis: Option<f64>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Input(format!(
                "dimensions must be positive, got {}x{}",
                self.rows, self.cols
            )));
        }
        let axis_len = match self.pattern {
            OutlierPattern::Row => self.rows,
            OutlierPattern::Column => self.cols,
            OutlierPattern::None => {
                if self.outlier_count != 0 {
                    return Err(Error::Input(
                        "pattern None requires outlier_count = 0".into(),
                    ));
                }
                if self.target_kurtosis.is_some() {
                    return Err(Error::Input(
                        "pattern None has no outlier scale to tune for a kurtosis target".into(),
                    ));
                }
                return Ok(());
            }
        };
        if self.outlier_count == 0 || self.outlier_count > axis_len {
            return Err(Error::Input(format!(
                "outlier_count {} out of range 1..={axis_len}",
                self.outlier_count
            )));
        }
        if !(self.outlier_scale >= 1.0) {
            return Err(Error::Input(format!(
                "outlier_scale must be >= 1, got {}",
                self.outlier_scale
            )));
        }
        Ok(())
    }
}

/// Base tensor plus planted slice indices, before any scaling.
struct Unscaled {
    base: DenseMatrix,
    indices: Vec<usize>,
}

fn generate_unscaled(spec: &SynthSpec) -> Unscaled {
    let mut base_rng = Rng::substream(spec.seed, TAG_BASE);
    let base = DenseMatrix::gaussian(spec.rows, spec.cols, &mut base_rng);
    let indices = match spec.pattern {
        OutlierPattern::None => Vec::new(),
        OutlierPattern::Row => {
            Rng::substream(spec.seed, TAG_PLACEMENT).sample_distinct(spec.outlier_count, spec.rows)
        }
        OutlierPattern::Column => {
            Rng::substream(spec.seed, TAG_PLACEMENT).sample_distinct(spec.outlier_count, spec.cols)
        }
    };
    Unscaled { base, indices }
}

fn apply_scale(u: &Unscaled, pattern: OutlierPattern, scale: f32) -> DenseMatrix {
    let mut out = u.base.clone();
    match pattern {
        OutlierPattern::None => {}
        OutlierPattern::Row => {
            for &i in &u.indices {
                for v in out.row_mut(i) {
                    *v *= scale;
                }
            }
        }
        OutlierPattern::Column => {
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                for &j in &u.indices {
                    row[j] *= scale;
                }
            }
        }
    }
    out
}

/// Generate a tensor from its spec.
pub fn generate(spec: &SynthSpec) -> Result<DenseMatrix> {
    spec.validate()?;
    let unscaled = generate_unscaled(spec);
    match spec.target_kurtosis {
        None => Ok(apply_scale(&unscaled, spec.pattern, spec.outlier_scale)),
        Some(target) => tune_to_kurtosis(&unscaled, spec.pattern, target),
    }
}

/// Bisection on the outlier scale. Measured kurtosis is monotone in the scale
/// for a fixed base sample, so the solve is exact up to the acceptance band.
fn tune_to_kurtosis(
    unscaled: &Unscaled,
    pattern: OutlierPattern,
    target: f64,
) -> Result<DenseMatrix> {
    if !(target > 0.0) {
        return Err(Error::Tuning(format!("target kurtosis must be positive, got {target}")));
    }
    let band = KURTOSIS_BAND * target;
    let mut lo = SCALE_LO;
    let mut hi = SCALE_HI;
    for _ in 0..MAX_BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        let candidate = apply_scale(unscaled, pattern, mid as f32);
        let measured = excess_kurtosis(&candidate)?;
        if (measured - target).abs() <= band {
            return Ok(candidate);
        }
        if measured < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Tuning(format!(
        "could not reach excess kurtosis {target} within ±{:.0}% in {MAX_BISECTION_ITERS} \
         bisection steps over scales [{SCALE_LO}, {SCALE_HI}]",
        KURTOSIS_BAND * 100.0
    )))
}

/// Generate both operands of a matmul with the given pattern pair, defaults
/// for count/scale. The right operand's pattern is interpreted in its own
/// orientation (Row = outlier rows of B).
pub fn generate_pair(
    pair: PatternPair,
    dims: (usize, usize, usize),
    seed: u64,
    target_kurtosis: Option<f64>,
) -> Result<(DenseMatrix, DenseMatrix)> {
    generate_pair_with(
        pair,
        dims,
        seed,
        DEFAULT_OUTLIER_COUNT,
        DEFAULT_OUTLIER_SCALE,
        target_kurtosis,
    )
}

/// `generate_pair` with explicit planted count and scale. The kurtosis target
/// only applies to patterned operands; None operands stay plain Gaussian.
pub fn generate_pair_with(
    pair: PatternPair,
    dims: (usize, usize, usize),
    seed: u64,
    outlier_count: usize,
    outlier_scale: f32,
    target_kurtosis: Option<f64>,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let (m, k, n) = dims;
    let spec_for = |rows, cols, pattern: OutlierPattern, tag| SynthSpec {
        rows,
        cols,
        pattern,
        outlier_count: if pattern == OutlierPattern::None { 0 } else { outlier_count },
        outlier_scale,
        seed: crate::rng::derive_seed(seed, tag),
        target_kurtosis: if pattern == OutlierPattern::None { None } else { target_kurtosis },
    };
    let a = generate(&spec_for(m, k, pair.left, TAG_PAIR_LEFT))?;
    let b = generate(&spec_for(k, n, pair.right, TAG_PAIR_RIGHT))?;
    Ok((a, b))
}
