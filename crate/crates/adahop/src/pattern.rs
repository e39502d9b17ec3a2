//! Outlier-pattern detection via coefficient-of-variation statistics, and
//! calibration over a stream of snapshots with majority voting.
//!
//! For a tensor T, the row statistic averages std(row)/(mean|row| + eps) over
//! all rows, and the column statistic mirrors it over columns. Averaging over
//! the dimension makes the statistics size-independent: the iid Gaussian
//! baseline sits near 1.25 for any shape, while a handful of scaled columns
//! push the row statistic to 5 and beyond. A threshold tau (default 2.0)
//! classifies:
//!
//! * Column-wise: the row statistic exceeds tau (some columns dominate each
//!   row's spread),
//! * Row-wise: the column statistic exceeds tau,
//! * None: neither does.
//!
//! When both exceed tau the larger statistic wins; an exact tie goes to Row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Where a tensor's extreme values concentrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OutlierPattern {
    Row,
    Column,
    None,
}

impl OutlierPattern {
    pub const ALL: [OutlierPattern; 3] =
        [OutlierPattern::Row, OutlierPattern::Column, OutlierPattern::None];

    pub fn letter(self) -> char {
        match self {
            OutlierPattern::Row => 'R',
            OutlierPattern::Column => 'C',
            OutlierPattern::None => 'N',
        }
    }

    pub fn from_letter(c: char) -> Result<Self> {
        match c {
            'R' => Ok(OutlierPattern::Row),
            'C' => Ok(OutlierPattern::Column),
            'N' => Ok(OutlierPattern::None),
            other => Err(Error::Input(format!("unknown pattern letter '{other}'"))),
        }
    }
}

impl std::fmt::Display for OutlierPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl Serialize for OutlierPattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.letter().to_string())
    }
}

impl<'de> Deserialize<'de> for OutlierPattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => OutlierPattern::from_letter(c).map_err(serde::de::Error::custom),
            _ => Err(serde::de::Error::custom(format!("expected \"R\", \"C\" or \"N\", got {s:?}"))),
        }
    }
}

/// Detection parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DetectionConfig {
    /// Classification threshold.
    pub tau: f64,
    /// Stabilizer added to mean-abs denominators.
    pub epsilon: f64,
}

impl DetectionConfig {
    pub fn new(tau: f64, epsilon: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Input(format!("tau must be positive, got {tau}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Input(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(DetectionConfig { tau, epsilon })
    }
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig { tau: 2.0, epsilon: 1e-8 }
    }
}

fn cv_of(values: impl Iterator<Item = f64> + Clone, count: usize, epsilon: f64) -> f64 {
    let n = count as f64;
    let mean = values.clone().sum::<f64>() / n;
    let mut var = 0.0;
    let mut mean_abs = 0.0;
    for v in values {
        let d = v - mean;
        var += d * d;
        mean_abs += v.abs();
    }
    var /= n;
    mean_abs /= n;
    var.sqrt() / (mean_abs + epsilon)
}

/// Size-normalized coefficients of variation `(cv_row_hat, cv_col_hat)`.
///
/// `cv_row_hat` is the per-row CV averaged over rows (sensitive to column
/// outliers); `cv_col_hat` is the per-column CV averaged over columns
/// (sensitive to row outliers). Standard deviations are population ones.
pub fn normalized_cvs(a: &DenseMatrix, cfg: &DetectionConfig) -> Result<(f64, f64)> {
    let (rows, cols) = a.shape();
    if rows < 2 || cols < 2 {
        return Err(Error::Shape(format!(
            "CV detection needs at least 2x2, got {rows}x{cols}"
        )));
    }

    let mut cv_row = 0.0;
    for i in 0..rows {
        let row = a.row(i);
        cv_row += cv_of(row.iter().map(|&v| v as f64), cols, cfg.epsilon);
    }
    cv_row /= rows as f64;

    let mut cv_col = 0.0;
    for j in 0..cols {
        let col = (0..rows).map(move |i| a.get(i, j) as f64);
        cv_col += cv_of(col, rows, cfg.epsilon);
    }
    cv_col /= cols as f64;

    Ok((cv_row, cv_col))
}

/// Classify a tensor's outlier pattern from its normalized CVs.
pub fn detect_pattern(a: &DenseMatrix, cfg: &DetectionConfig) -> Result<OutlierPattern> {
    let (cv_row, cv_col) = normalized_cvs(a, cfg)?;
    Ok(classify(cv_row, cv_col, cfg.tau))
}

/// Classification rule shared by detection and reporting paths.
pub fn classify(cv_row: f64, cv_col: f64, tau: f64) -> OutlierPattern {
    if cv_col > tau && cv_col >= cv_row {
        OutlierPattern::Row
    } else if cv_row > tau {
        OutlierPattern::Column
    } else {
        OutlierPattern::None
    }
}

/// Patterns observed for one tensor across calibration steps plus the frozen
/// majority-vote result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub tensor_id: String,
    pub per_step: Vec<OutlierPattern>,
    #[serde(rename = "final")]
    pub final_pattern: OutlierPattern,
}

/// Modal pattern of a vote sequence. Ties are resolved Row > Column > None.
pub fn majority_vote(votes: &[OutlierPattern]) -> OutlierPattern {
    let mut counts = [0usize; 3];
    for &v in votes {
        let slot = match v {
            OutlierPattern::Row => 0,
            OutlierPattern::Column => 1,
            OutlierPattern::None => 2,
        };
        counts[slot] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    // priority order doubles as the tie rule
    if counts[0] == best {
        OutlierPattern::Row
    } else if counts[1] == best {
        OutlierPattern::Column
    } else {
        OutlierPattern::None
    }
}

/// Detect per step and freeze the modal pattern.
pub fn calibrate(
    tensor_id: &str,
    stream: &[DenseMatrix],
    cfg: &DetectionConfig,
) -> Result<CalibrationRecord> {
    if stream.is_empty() {
        return Err(Error::Input(format!("empty calibration stream for {tensor_id:?}")));
    }
    let per_step: Vec<OutlierPattern> = stream
        .iter()
        .map(|m| detect_pattern(m, cfg))
        .collect::<Result<_>>()?;
    let final_pattern = majority_vote(&per_step);
    Ok(CalibrationRecord { tensor_id: tensor_id.to_string(), per_step, final_pattern })
}
