//! Per-matmul strategy selection and execution.
//!
//! Each matmul is assigned a strategy from its operands' outlier-pattern pair:
//! the inner transform alone where inner-dimension smoothing suffices, or the
//! inner transform combined with outlier extraction (OE) on the offending
//! operand. OE splits an operand into a residual (extracted rows/columns
//! zeroed, quantized path) and an outlier part (computed exactly and
//! scatter-added back), so the decomposition is an exact partition of the
//! product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hadamard::{iht_matmul, oht_matmul, HadamardConfig};
use crate::matrix::{matmul_exact, DenseMatrix};
use crate::mxfp4::Quantizer;
use crate::pattern::OutlierPattern;

/// Default extraction budget (rows or columns routed to the exact path).
pub const DEFAULT_K_EXTRACT: usize = 64;
/// Default probe prefix length for fast outlier index detection.
pub const DEFAULT_PROBE: usize = 64;

/// Which of a linear layer's three matmuls a pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MatmulPath {
    #[serde(rename = "fwd")]
    Fwd,
    #[serde(rename = "gw")]
    GradW,
    #[serde(rename = "gx")]
    GradX,
}

impl std::fmt::Display for MatmulPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MatmulPath::Fwd => "fwd",
            MatmulPath::GradW => "gw",
            MatmulPath::GradX => "gx",
        };
        write!(f, "{s}")
    }
}

/// Ordered (left operand, right operand) pattern classification of a matmul.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatternPair {
    pub left: OutlierPattern,
    pub right: OutlierPattern,
}

impl PatternPair {
    /// The nine combinations, in RR, RN, RC, NR, NN, NC, CR, CN, CC order.
    pub const ALL: [PatternPair; 9] = {
        use OutlierPattern::{Column as C, None as N, Row as R};
        [
            PatternPair { left: R, right: R },
            PatternPair { left: R, right: N },
            PatternPair { left: R, right: C },
            PatternPair { left: N, right: R },
            PatternPair { left: N, right: N },
            PatternPair { left: N, right: C },
            PatternPair { left: C, right: R },
            PatternPair { left: C, right: N },
            PatternPair { left: C, right: C },
        ]
    };

    pub fn code(&self) -> String {
        format!("{}{}", self.left.letter(), self.right.letter())
    }

    pub fn parse(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 2 {
            return Err(Error::Input(format!("pattern pair must be two letters, got {s:?}")));
        }
        Ok(PatternPair {
            left: OutlierPattern::from_letter(chars[0])?,
            right: OutlierPattern::from_letter(chars[1])?,
        })
    }
}

impl std::fmt::Display for PatternPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.code())
    }
}

impl Serialize for PatternPair {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.code())
    }
}

impl<'de> Deserialize<'de> for PatternPair {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PatternPair::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Strategy variants a matmul can execute under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "IHT")]
    Iht,
    #[serde(rename = "OE_LEFT_IHT")]
    OeLeftIht,
    #[serde(rename = "OE_RIGHT_IHT")]
    OeRightIht,
    #[serde(rename = "FULL_PRECISION")]
    FullPrecision,
    /// Outer-transform path, kept for comparison runs; never selected by the
    /// pair table.
    #[serde(rename = "OHT_REFERENCE")]
    OhtReference,
}

/// A strategy plus its extraction budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub k_extract: usize,
}

impl Strategy {
    pub fn new(kind: StrategyKind, k_extract: usize) -> Result<Self> {
        if k_extract == 0 {
            return Err(Error::Input("k_extract must be >= 1".into()));
        }
        Ok(Strategy { kind, k_extract })
    }
}

/// Aggressiveness level: Lv2 upgrades CC pairs to full precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    Lv1,
    Lv2,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Level::Lv1 => write!(f, "Lv1"),
            Level::Lv2 => write!(f, "Lv2"),
        }
    }
}

/// The pair -> strategy table.
///
/// CN, NN, CR, NR run the inner transform alone; RN and RR extract the left
/// operand's outlier rows; RC and NC extract the right operand's outlier
/// columns; CC extracts on the right under Lv1 and computes in full precision
/// under Lv2.
pub fn strategy_for_pair(pair: PatternPair, level: Level) -> Strategy {
    use OutlierPattern::{Column as C, None as N, Row as R};
    let kind = match (pair.left, pair.right) {
        (C, N) | (N, N) | (C, R) | (N, R) => StrategyKind::Iht,
        (R, N) | (R, R) => StrategyKind::OeLeftIht,
        (R, C) | (N, C) => StrategyKind::OeRightIht,
        (C, C) => match level {
            Level::Lv1 => StrategyKind::OeRightIht,
            Level::Lv2 => StrategyKind::FullPrecision,
        },
    };
    Strategy { kind, k_extract: DEFAULT_K_EXTRACT }
}

/// One matmul's planned strategy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanAssignment {
    pub layer: String,
    pub path: MatmulPath,
    pub pair: PatternPair,
    pub strategy: StrategyKind,
    pub k: usize,
}

/// Frozen per-matmul strategy assignments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyPlan {
    pub level: Level,
    pub assignments: Vec<PlanAssignment>,
}

impl StrategyPlan {
    pub fn lookup(&self, layer: &str, path: MatmulPath) -> Option<Strategy> {
        self.assignments
            .iter()
            .find(|a| a.layer == layer && a.path == path)
            .map(|a| Strategy { kind: a.strategy, k_extract: a.k })
    }
}

/// Extraction axis for outlier decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractAxis {
    Rows,
    Cols,
}

/// Exact split of an operand into residual + outlier parts.
#[derive(Debug, Clone)]
pub struct OEDecomposition {
    /// Input with the extracted slices zeroed.
    pub residual: DenseMatrix,
    /// Zero everywhere except the extracted slices, carried verbatim.
    pub outlier_part: DenseMatrix,
    /// Extracted indices, strictly increasing.
    pub indices: Vec<usize>,
}

/// Top-k outlier rows (or columns) by the population variance of a probe
/// prefix, ranked by variance with ties to the lower index. k is clamped to
/// the axis length.
pub fn foid_indices(a: &DenseMatrix, axis: ExtractAxis, k: usize, probe: usize) -> Vec<usize> {
    let (slices, slice_len) = match axis {
        ExtractAxis::Rows => (a.rows(), a.cols()),
        ExtractAxis::Cols => (a.cols(), a.rows()),
    };
    let probe_len = probe.clamp(1, slice_len);
    let mut ranked: Vec<(usize, f64)> = (0..slices)
        .map(|s| {
            let mut mean = 0.0f64;
            for o in 0..probe_len {
                mean += element(a, axis, s, o) as f64;
            }
            mean /= probe_len as f64;
            let mut var = 0.0f64;
            for o in 0..probe_len {
                let d = element(a, axis, s, o) as f64 - mean;
                var += d * d;
            }
            (s, var / probe_len as f64)
        })
        .collect();
    ranked.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    ranked.truncate(k.min(slices));
    ranked.into_iter().map(|(s, _)| s).collect()
}

#[inline]
fn element(a: &DenseMatrix, axis: ExtractAxis, slice: usize, offset: usize) -> f32 {
    match axis {
        ExtractAxis::Rows => a.get(slice, offset),
        ExtractAxis::Cols => a.get(offset, slice),
    }
}

/// Decompose into residual + outlier parts along the given axis.
pub fn oe_decompose(a: &DenseMatrix, axis: ExtractAxis, k: usize, probe: usize) -> OEDecomposition {
    let mut indices = foid_indices(a, axis, k, probe);
    indices.sort_unstable();
    let mut residual = a.clone();
    let mut outlier_part = DenseMatrix::zeros(a.rows(), a.cols());
    match axis {
        ExtractAxis::Rows => {
            for &i in &indices {
                outlier_part.row_mut(i).copy_from_slice(a.row(i));
                residual.row_mut(i).fill(0.0);
            }
        }
        ExtractAxis::Cols => {
            for i in 0..a.rows() {
                for &j in &indices {
                    outlier_part.set(i, j, a.get(i, j));
                    residual.set(i, j, 0.0);
                }
            }
        }
    }
    OEDecomposition { residual, outlier_part, indices }
}

/// Engine-wide execution parameters.
#[derive(Debug, Clone, Copy)]
pub struct EngineConfig {
    pub hadamard: HadamardConfig,
    pub quantizer: Quantizer,
    pub probe: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            hadamard: HadamardConfig::default(),
            quantizer: Quantizer::Mxfp4,
            probe: DEFAULT_PROBE,
        }
    }
}

/// C = Q(A_res·H)·Q(Hᵀ·B) + A_out·B, with the outlier rows of A computed
/// exactly on a compact slice and scatter-added into the extracted rows.
pub fn oe_left_matmul(
    a: &DenseMatrix,
    b: &DenseMatrix,
    engine: &EngineConfig,
    k: usize,
) -> Result<DenseMatrix> {
    let decomp = oe_decompose(a, ExtractAxis::Rows, k, engine.probe);
    let mut out = iht_matmul(&decomp.residual, b, &engine.hadamard, engine.quantizer)?;
    let compact = gather_rows(a, &decomp.indices);
    let exact = matmul_exact(&compact, b)?;
    for (slot, &row) in decomp.indices.iter().enumerate() {
        let dst = out.row_mut(row);
        let src = exact.row(slot);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
    Ok(out)
}

/// C = Q(A·H)·Q(Hᵀ·B_res) + A·B_out, mirroring `oe_left_matmul` on the right
/// operand's columns.
pub fn oe_right_matmul(
    a: &DenseMatrix,
    b: &DenseMatrix,
    engine: &EngineConfig,
    k: usize,
) -> Result<DenseMatrix> {
    let decomp = oe_decompose(b, ExtractAxis::Cols, k, engine.probe);
    let mut out = iht_matmul(a, &decomp.residual, &engine.hadamard, engine.quantizer)?;
    let compact = gather_cols(b, &decomp.indices);
    let exact = matmul_exact(a, &compact)?;
    for i in 0..out.rows() {
        for (slot, &col) in decomp.indices.iter().enumerate() {
            let v = out.get(i, col) + exact.get(i, slot);
            out.set(i, col, v);
        }
    }
    Ok(out)
}

fn gather_rows(a: &DenseMatrix, indices: &[usize]) -> DenseMatrix {
    let mut data = Vec::with_capacity(indices.len() * a.cols());
    for &i in indices {
        data.extend_from_slice(a.row(i));
    }
    DenseMatrix::from_vec_unchecked(indices.len(), a.cols(), data)
}

fn gather_cols(a: &DenseMatrix, indices: &[usize]) -> DenseMatrix {
    let mut data = Vec::with_capacity(indices.len() * a.rows());
    for i in 0..a.rows() {
        for &j in indices {
            data.push(a.get(i, j));
        }
    }
    DenseMatrix::from_vec_unchecked(a.rows(), indices.len(), data)
}

/// Dispatch a matmul to its strategy.
pub fn execute(
    a: &DenseMatrix,
    b: &DenseMatrix,
    strategy: &Strategy,
    engine: &EngineConfig,
) -> Result<DenseMatrix> {
    match strategy.kind {
        StrategyKind::FullPrecision => matmul_exact(a, b),
        StrategyKind::Iht => iht_matmul(a, b, &engine.hadamard, engine.quantizer),
        StrategyKind::OeLeftIht => oe_left_matmul(a, b, engine, strategy.k_extract),
        StrategyKind::OeRightIht => oe_right_matmul(a, b, engine, strategy.k_extract),
        StrategyKind::OhtReference => oht_matmul(a, b, &engine.hadamard, engine.quantizer),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::mse;
    use crate::matrix::outlier_factor;
    use crate::mxfp4::matmul_quantized;
    use crate::rng::Rng;
    use crate::synth::{generate, generate_pair, SynthSpec};

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = Rng::new(seed);
        DenseMatrix::gaussian(rows, cols, &mut rng)
    }

    #[test]
    fn table_matches_all_eighteen_cells() {
        use StrategyKind::*;
        let expect = |code: &str, lv: Level, kind: StrategyKind| {
            let pair = PatternPair::parse(code).unwrap();
            assert_eq!(strategy_for_pair(pair, lv).kind, kind, "{code} {lv}");
        };
        for lv in [Level::Lv1, Level::Lv2] {
            expect("CN", lv, Iht);
            expect("NN", lv, Iht);
            expect("CR", lv, Iht);
            expect("NR", lv, Iht);
            expect("RN", lv, OeLeftIht);
            expect("RR", lv, OeLeftIht);
            expect("RC", lv, OeRightIht);
            expect("NC", lv, OeRightIht);
        }
        expect("CC", Level::Lv1, OeRightIht);
        expect("CC", Level::Lv2, FullPrecision);
    }

    #[test]
    fn default_extraction_budget_is_64() {
        let s = strategy_for_pair(PatternPair::parse("RC").unwrap(), Level::Lv1);
        assert_eq!(s.k_extract, 64);
        assert!(Strategy::new(StrategyKind::Iht, 0).is_err());
    }

    #[test]
    fn foid_finds_the_single_loud_row_first() {
        let mut a = random(16, 128, 1);
        for v in a.row_mut(11) {
            *v *= 50.0;
        }
        let idx = foid_indices(&a, ExtractAxis::Rows, 4, 64);
        assert_eq!(idx[0], 11);
    }

    #[test]
    fn foid_clamps_k_to_axis_length() {
        let a = random(6, 64, 2);
        let idx = foid_indices(&a, ExtractAxis::Rows, 100, 64);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn foid_probe_agrees_with_full_variance_for_whole_row_outliers() {
        // planted outliers span whole rows, so the 64-element probe ranks the
        // same top set as exact full-length variance
        let spec = SynthSpec {
            rows: 64,
            cols: 256,
            pattern: OutlierPattern::Row,
            outlier_count: 6,
            outlier_scale: 60.0,
            seed: 3,
            target_kurtosis: None,
        };
        let a = generate(&spec).unwrap();
        let probed: std::collections::BTreeSet<usize> =
            foid_indices(&a, ExtractAxis::Rows, 6, 64).into_iter().collect();
        let full: std::collections::BTreeSet<usize> =
            foid_indices(&a, ExtractAxis::Rows, 6, 256).into_iter().collect();
        assert_eq!(probed, full);
    }

    #[test]
    fn decomposition_is_an_exact_partition() {
        let a = random(32, 64, 4);
        let d = oe_decompose(&a, ExtractAxis::Rows, 8, 64);
        assert_eq!(d.indices.len(), 8);
        assert!(d.indices.windows(2).all(|w| w[0] < w[1]));
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                let sum = d.residual.get(i, j) + d.outlier_part.get(i, j);
                assert_eq!(sum.to_bits(), a.get(i, j).to_bits());
            }
            if d.indices.contains(&i) {
                assert!(d.residual.row(i).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn full_extraction_zeroes_the_residual() {
        let a = random(8, 32, 5);
        let d = oe_decompose(&a, ExtractAxis::Rows, 8, 32);
        assert!(d.residual.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn planted_rows_are_all_extracted_when_k_covers_them() {
        let spec = SynthSpec {
            rows: 128,
            cols: 128,
            pattern: OutlierPattern::Row,
            outlier_count: 5,
            outlier_scale: 80.0,
            seed: 6,
            target_kurtosis: None,
        };
        let a = generate(&spec).unwrap();
        let d = oe_decompose(&a, ExtractAxis::Rows, 16, 64);
        // the planted rows are exactly the rows whose max-abs exceeds 20
        for i in 0..a.rows() {
            let loud = a.row(i).iter().any(|v| v.abs() > 20.0);
            if loud {
                assert!(d.indices.contains(&i), "planted row {i} missed");
            }
        }
    }

    #[test]
    fn oe_left_equals_naive_zero_padded_formulation_bitwise() {
        let engine = EngineConfig::default();
        let a = random(64, 64, 7);
        let b = random(64, 32, 8);
        let k = 8;
        let got = oe_left_matmul(&a, &b, &engine, k).unwrap();

        let d = oe_decompose(&a, ExtractAxis::Rows, k, engine.probe);
        let residual_prod =
            iht_matmul(&d.residual, &b, &engine.hadamard, engine.quantizer).unwrap();
        let outlier_prod = matmul_exact(&d.outlier_part, &b).unwrap();
        for i in 0..got.rows() {
            for j in 0..got.cols() {
                let want = residual_prod.get(i, j) + outlier_prod.get(i, j);
                assert_eq!(got.get(i, j).to_bits(), want.to_bits(), "({i},{j})");
            }
        }
    }

    #[test]
    fn fully_extracted_operands_recover_the_exact_product() {
        let engine = EngineConfig::default();
        let a = random(16, 32, 9);
        let b = random(32, 16, 10);
        let exact = matmul_exact(&a, &b).unwrap();

        let left = oe_left_matmul(&a, &b, &engine, 16).unwrap();
        let m = mse(&left, &exact).unwrap();
        assert_eq!(m, 0.0);

        let right = oe_right_matmul(&a, &b, &engine, 16).unwrap();
        let m = mse(&right, &exact).unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn oe_with_identity_quantizer_recovers_exact_product() {
        let engine = EngineConfig {
            quantizer: Quantizer::Identity,
            ..EngineConfig::default()
        };
        let a = random(64, 64, 11);
        let b = random(64, 64, 12);
        let exact = matmul_exact(&a, &b).unwrap();
        for strat in [
            Strategy { kind: StrategyKind::OeLeftIht, k_extract: 8 },
            Strategy { kind: StrategyKind::OeRightIht, k_extract: 8 },
            Strategy { kind: StrategyKind::Iht, k_extract: 8 },
            Strategy { kind: StrategyKind::OhtReference, k_extract: 8 },
        ] {
            let got = execute(&a, &b, &strat, &engine).unwrap();
            let rel = {
                let num: f64 = got
                    .as_slice()
                    .iter()
                    .zip(exact.as_slice())
                    .map(|(&x, &y)| ((x - y) as f64).powi(2))
                    .sum();
                num.sqrt() / exact.frob_norm()
            };
            assert!(rel < 1e-4, "{:?}: rel {rel}", strat.kind);
        }
    }

    #[test]
    fn execute_dispatch_is_transparent() {
        let engine = EngineConfig::default();
        let a = random(32, 64, 13);
        let b = random(64, 32, 14);

        let full = execute(
            &a,
            &b,
            &Strategy { kind: StrategyKind::FullPrecision, k_extract: 1 },
            &engine,
        )
        .unwrap();
        let exact = matmul_exact(&a, &b).unwrap();
        assert_eq!(full.as_slice(), exact.as_slice());

        let iht_direct = iht_matmul(&a, &b, &engine.hadamard, engine.quantizer).unwrap();
        let iht_exec = execute(
            &a,
            &b,
            &Strategy { kind: StrategyKind::Iht, k_extract: 1 },
            &engine,
        )
        .unwrap();
        assert_eq!(iht_direct.as_slice(), iht_exec.as_slice());
    }

    #[test]
    fn oe_beats_iht_on_pairs_the_table_sends_to_oe() {
        let engine = EngineConfig::default();
        for (code, seed) in [("RN", 21u64), ("NC", 22), ("RC", 23)] {
            let pair = PatternPair::parse(code).unwrap();
            let (a, b) = generate_pair(pair, (128, 128, 128), seed, None).unwrap();
            let exact = matmul_exact(&a, &b).unwrap();
            let strat = strategy_for_pair(pair, Level::Lv1);
            let oe = execute(&a, &b, &strat, &engine).unwrap();
            let iht = iht_matmul(&a, &b, &engine.hadamard, engine.quantizer).unwrap();
            let mse_oe = mse(&oe, &exact).unwrap();
            let mse_iht = mse(&iht, &exact).unwrap();
            assert!(mse_oe < mse_iht, "{code}: oe {mse_oe} vs iht {mse_iht}");
        }
    }

    #[test]
    fn nc_strategy_beats_plain_quantized() {
        let engine = EngineConfig::default();
        let pair = PatternPair::parse("NC").unwrap();
        let (a, b) = generate_pair(pair, (128, 128, 128), 31, None).unwrap();
        let exact = matmul_exact(&a, &b).unwrap();
        let strat = strategy_for_pair(pair, Level::Lv1);
        let oe = execute(&a, &b, &strat, &engine).unwrap();
        let base = matmul_quantized(&a, &b).unwrap();
        assert!(mse(&oe, &exact).unwrap() < mse(&base, &exact).unwrap());
    }

    #[test]
    fn residual_gamma_collapses_relative_to_the_input() {
        let spec = SynthSpec {
            rows: 256,
            cols: 256,
            pattern: OutlierPattern::Row,
            outlier_count: 8,
            outlier_scale: 200.0,
            seed: 15,
            target_kurtosis: None,
        };
        let a = generate(&spec).unwrap();
        let g_in = outlier_factor(&a).unwrap();
        let d = oe_decompose(&a, ExtractAxis::Rows, 64, 64);
        let g_res = outlier_factor(&d.residual).unwrap();
        // the input is outlier-dominated, the residual is a plain Gaussian
        // sheet (gamma ~ 2 ln(live entries) ~ 25 at this size)
        assert!(g_in >= 100.0, "gamma(input) = {g_in}");
        assert!(g_res <= 40.0, "gamma(residual) = {g_res}");
        assert!(g_res < g_in / 10.0);
    }

    #[test]
    fn plan_json_shape() {
        let plan = StrategyPlan {
            level: Level::Lv1,
            assignments: vec![PlanAssignment {
                layer: "layer0".into(),
                path: MatmulPath::GradW,
                pair: PatternPair::parse("RC").unwrap(),
                strategy: StrategyKind::OeRightIht,
                k: 64,
            }],
        };
        let json = serde_json::to_string(&plan).unwrap();
        assert_eq!(
            json,
            r#"{"level":"Lv1","assignments":[{"layer":"layer0","path":"gw","pair":"RC","strategy":"OE_RIGHT_IHT","k":64}]}"#
        );
        let back: StrategyPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }
}
