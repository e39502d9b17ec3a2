//! Error-analysis harness: per-pattern-pair MSE sweeps, outlier-factor
//! reduction checks, outlier-extraction bound checks, and pattern-stability
//! tracking over recorded tensor streams.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hadamard::{fwht_cols, fwht_rows, iht_matmul, oht_matmul, HadamardConfig};
use crate::matrix::{matmul_exact, outlier_factor, DenseMatrix};
use crate::mxfp4::matmul_quantized;
use crate::pattern::{detect_pattern, majority_vote, DetectionConfig, OutlierPattern};
use crate::rng::derive_seed;
use crate::strategy::{
    execute, oe_decompose, oe_left_matmul, strategy_for_pair, EngineConfig, ExtractAxis, Level,
    PatternPair,
};
use crate::synth::{generate, generate_pair_with, SynthSpec};

/// Mean squared entrywise difference, accumulated in f64.
pub fn mse(approx: &DenseMatrix, exact: &DenseMatrix) -> Result<f64> {
    if approx.shape() != exact.shape() {
        return Err(Error::Shape(format!(
            "mse of {:?} vs {:?}",
            approx.shape(),
            exact.shape()
        )));
    }
    let sum: f64 = approx
        .as_slice()
        .iter()
        .zip(exact.as_slice())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / approx.len() as f64)
}

/// Per-seed MSEs of every strategy for one pair.
#[derive(Debug, Clone, Serialize)]
pub struct SeedMse {
    pub seed: u64,
    pub base: f64,
    pub iht: f64,
    pub oht: f64,
    pub oe: f64,
}

/// Aggregated sweep result for one pattern pair. `mse_*` fields are means
/// over seeds; improvements follow (base - x) * 100 / base on the means.
#[derive(Debug, Clone, Serialize)]
pub struct PairSweepResult {
    pub pair: PatternPair,
    pub mse_base: f64,
    pub mse_iht: f64,
    pub mse_oht: f64,
    pub mse_oe: f64,
    pub std_base: f64,
    pub std_iht: f64,
    pub std_oht: f64,
    pub std_oe: f64,
    pub improvement_iht: f64,
    pub improvement_best: f64,
    pub seeds_used: usize,
    pub per_seed: Vec<SeedMse>,
}

/// Sweep configuration.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub dims: (usize, usize, usize),
    pub seeds: Vec<u64>,
    pub target_kurtosis: Option<f64>,
    pub outlier_count: usize,
    pub outlier_scale: f32,
    pub level: Level,
    pub engine: EngineConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            dims: (256, 256, 256),
            seeds: vec![1, 2, 3],
            target_kurtosis: None,
            outlier_count: crate::synth::DEFAULT_OUTLIER_COUNT,
            outlier_scale: crate::synth::DEFAULT_OUTLIER_SCALE,
            level: Level::Lv1,
            engine: EngineConfig::default(),
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// MSE of base / inner-transform / outer-transform / table strategy for each
/// of the nine pattern pairs, averaged over seeds.
pub fn sweep_pairs(cfg: &SweepConfig) -> Result<Vec<PairSweepResult>> {
    if cfg.seeds.is_empty() {
        return Err(Error::Input("sweep needs at least one seed".into()));
    }
    let mut results = Vec::with_capacity(9);
    for pair in PatternPair::ALL {
        let mut per_seed = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let (a, b) = generate_pair_with(
                pair,
                cfg.dims,
                seed,
                cfg.outlier_count,
                cfg.outlier_scale,
                cfg.target_kurtosis,
            )?;
            let exact = matmul_exact(&a, &b)?;
            let base = match cfg.engine.quantizer {
                crate::mxfp4::Quantizer::Identity => matmul_exact(&a, &b)?,
                crate::mxfp4::Quantizer::Mxfp4 => matmul_quantized(&a, &b)?,
            };
            let iht = iht_matmul(&a, &b, &cfg.engine.hadamard, cfg.engine.quantizer)?;
            let oht = oht_matmul(&a, &b, &cfg.engine.hadamard, cfg.engine.quantizer)?;
            let strat = strategy_for_pair(pair, cfg.level);
            let oe = execute(&a, &b, &strat, &cfg.engine)?;
            per_seed.push(SeedMse {
                seed,
                base: mse(&base, &exact)?,
                iht: mse(&iht, &exact)?,
                oht: mse(&oht, &exact)?,
                oe: mse(&oe, &exact)?,
            });
        }
        let (mse_base, std_base) = mean_std(&per_seed.iter().map(|s| s.base).collect::<Vec<_>>());
        let (mse_iht, std_iht) = mean_std(&per_seed.iter().map(|s| s.iht).collect::<Vec<_>>());
        let (mse_oht, std_oht) = mean_std(&per_seed.iter().map(|s| s.oht).collect::<Vec<_>>());
        let (mse_oe, std_oe) = mean_std(&per_seed.iter().map(|s| s.oe).collect::<Vec<_>>());
        let improvement = |x: f64| {
            if mse_base == 0.0 {
                0.0
            } else {
                (mse_base - x) * 100.0 / mse_base
            }
        };
        results.push(PairSweepResult {
            pair,
            mse_base,
            mse_iht,
            mse_oht,
            mse_oe,
            std_base,
            std_iht,
            std_oht,
            std_oe,
            improvement_iht: improvement(mse_iht),
            improvement_best: improvement(mse_iht.min(mse_oht).min(mse_oe)),
            seeds_used: cfg.seeds.len(),
            per_seed,
        });
    }
    Ok(results)
}

/// CSV table: one row per (pair, strategy).
pub fn sweep_to_csv(results: &[PairSweepResult]) -> String {
    let mut out = String::from("pair,strategy,mse_mean,mse_std,improvement_pct\n");
    for r in results {
        let imp = |x: f64| {
            if r.mse_base == 0.0 {
                0.0
            } else {
                (r.mse_base - x) * 100.0 / r.mse_base
            }
        };
        for (name, mean, std) in [
            ("base", r.mse_base, r.std_base),
            ("iht", r.mse_iht, r.std_iht),
            ("oht", r.mse_oht, r.std_oht),
            ("oe", r.mse_oe, r.std_oe),
        ] {
            out.push_str(&format!(
                "{},{},{:.6e},{:.6e},{:.3}\n",
                r.pair,
                name,
                mean,
                std,
                imp(mean)
            ));
        }
    }
    out
}

/// Outlier-factor ratios of one transformed matrix.
#[derive(Debug, Clone, Serialize)]
pub struct GammaCase {
    pub gamma_input: f64,
    /// gamma after left multiplication (mixes within columns).
    pub gamma_left: f64,
    /// gamma after right multiplication (mixes within rows).
    pub gamma_right: f64,
    pub left_ratio: f64,
    pub right_ratio: f64,
}

/// Full-size transform effectiveness report for row / column / none patterns.
#[derive(Debug, Clone, Serialize)]
pub struct GammaReductionReport {
    pub m: usize,
    pub seed: u64,
    /// Single planted row: left transform must flatten it (ratio <= 4/m),
    /// right transform must leave it (ratio >= 1/4).
    pub row_case: GammaCase,
    /// Single planted column, mirrored expectations.
    pub column_case: GammaCase,
    /// No outliers: both ratios stay within [1/4, 4].
    pub none_case: GammaCase,
    pub row_bound_holds: bool,
    pub column_bound_holds: bool,
    pub none_bound_holds: bool,
}

fn gamma_case(a: &DenseMatrix, cfg: &HadamardConfig) -> Result<GammaCase> {
    let gamma_input = outlier_factor(a)?;
    let gamma_left = outlier_factor(&fwht_cols(a, cfg)?)?;
    let gamma_right = outlier_factor(&fwht_rows(a, cfg)?)?;
    Ok(GammaCase {
        gamma_input,
        gamma_left,
        gamma_right,
        left_ratio: gamma_left / gamma_input,
        right_ratio: gamma_right / gamma_input,
    })
}

/// Measure how a full-size transform moves the outlier factor of m-by-m
/// single-slice-outlier tensors. `m` must be a power of two >= 64.
pub fn verify_gamma_reduction(m: usize, seed: u64) -> Result<GammaReductionReport> {
    if m < 64 || !m.is_power_of_two() {
        return Err(Error::Input(format!("m must be a power of two >= 64, got {m}")));
    }
    let cfg = HadamardConfig::full(m)?;
    let spec = |pattern, tag| SynthSpec {
        rows: m,
        cols: m,
        pattern,
        outlier_count: usize::from(pattern != OutlierPattern::None),
        outlier_scale: 1000.0,
        seed: derive_seed(seed, tag),
        target_kurtosis: None,
    };
    let row_case = gamma_case(&generate(&spec(OutlierPattern::Row, 1))?, &cfg)?;
    let column_case = gamma_case(&generate(&spec(OutlierPattern::Column, 2))?, &cfg)?;
    let none_case = gamma_case(&generate(&spec(OutlierPattern::None, 3))?, &cfg)?;

    let slack = 4.0 / m as f64;
    let within = |r: f64| (0.25..=4.0).contains(&r);
    Ok(GammaReductionReport {
        m,
        seed,
        row_bound_holds: row_case.left_ratio <= slack && row_case.right_ratio >= 0.25,
        column_bound_holds: column_case.right_ratio <= slack && column_case.left_ratio >= 0.25,
        none_bound_holds: within(none_case.left_ratio) && within(none_case.right_ratio),
        row_case,
        column_case,
        none_case,
    })
}

/// Outlier-extraction bound measurement.
#[derive(Debug, Clone, Serialize)]
pub struct OeBoundReport {
    pub dims: (usize, usize, usize),
    pub seed: u64,
    pub planted_rows: usize,
    pub k_extract: usize,
    pub gamma_input: f64,
    /// None when extraction removed every row (all-zero residual).
    pub gamma_residual: Option<f64>,
    pub mse_base: f64,
    pub mse_iht: f64,
    pub mse_oe: f64,
    /// strict ordering oe < iht < base
    pub ordering_holds: bool,
    /// gamma(residual) <= 10, the literal cleanup bound
    pub gamma_cleanup_ok: bool,
}

/// Default planted-row count for the OE bound experiment.
pub const OE_BOUND_PLANTED: usize = 8;
/// Default planted-row scale for the OE bound experiment.
pub const OE_BOUND_SCALE: f32 = 200.0;

/// Measure the extraction bound on a row-outlier left operand. Both operands
/// carry planted row outliers (the RR cell of the pair table, which the
/// extraction strategy covers), so the three error levels separate cleanly:
/// the plain path suffers both operands' outliers, the inner transform fixes
/// only the right operand, and extraction also removes the left operand's.
pub fn verify_oe_bound(dims: (usize, usize, usize), seed: u64) -> Result<OeBoundReport> {
    verify_oe_bound_with(dims, seed, OE_BOUND_PLANTED, OE_BOUND_SCALE)
}

pub fn verify_oe_bound_with(
    dims: (usize, usize, usize),
    seed: u64,
    planted: usize,
    scale: f32,
) -> Result<OeBoundReport> {
    let (m, k, n) = dims;
    let engine = EngineConfig::default();
    let k_extract = crate::strategy::DEFAULT_K_EXTRACT;

    let make = |rows, cols, count, tag| -> Result<DenseMatrix> {
        generate(&SynthSpec {
            rows,
            cols,
            pattern: if count == 0 { OutlierPattern::None } else { OutlierPattern::Row },
            outlier_count: count,
            outlier_scale: scale,
            seed: derive_seed(seed, tag),
            target_kurtosis: None,
        })
    };
    let a = make(m, k, planted, 1)?;
    let b = make(k, n, planted, 2)?;

    let exact = matmul_exact(&a, &b)?;
    let base = matmul_quantized(&a, &b)?;
    let iht = iht_matmul(&a, &b, &engine.hadamard, engine.quantizer)?;
    let oe = oe_left_matmul(&a, &b, &engine, k_extract)?;

    let gamma_input = outlier_factor(&a)?;
    let decomp = oe_decompose(&a, ExtractAxis::Rows, k_extract, engine.probe);
    let gamma_residual = if decomp.residual.as_slice().iter().all(|&v| v == 0.0) {
        None
    } else {
        Some(outlier_factor(&decomp.residual)?)
    };

    let mse_base = mse(&base, &exact)?;
    let mse_iht = mse(&iht, &exact)?;
    let mse_oe = mse(&oe, &exact)?;

    Ok(OeBoundReport {
        dims,
        seed,
        planted_rows: planted,
        k_extract,
        gamma_input,
        gamma_residual,
        mse_base,
        mse_iht,
        mse_oe,
        ordering_holds: mse_oe < mse_iht && mse_iht < mse_base,
        gamma_cleanup_ok: gamma_residual.is_none_or(|g| g <= 10.0),
    })
}

/// Per-tensor detection trace and stability score.
#[derive(Debug, Clone, Serialize)]
pub struct TensorStability {
    pub tensor_id: String,
    pub per_step: Vec<OutlierPattern>,
    pub modal: OutlierPattern,
    /// Fraction of steps matching the modal pattern.
    pub stability: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub tensors: Vec<TensorStability>,
}

/// Detect every step of every stream and score stability against the modal
/// pattern. Streams are keyed by tensor id; ordering follows the map order.
pub fn track_stability(
    streams: &BTreeMap<String, Vec<DenseMatrix>>,
    cfg: &DetectionConfig,
) -> Result<StabilityReport> {
    if streams.is_empty() {
        return Err(Error::Input("no streams to track".into()));
    }
    let mut tensors = Vec::with_capacity(streams.len());
    for (tensor_id, stream) in streams {
        if stream.is_empty() {
            return Err(Error::Input(format!("empty stream for {tensor_id:?}")));
        }
        let per_step: Vec<OutlierPattern> = stream
            .iter()
            .map(|m| detect_pattern(m, cfg))
            .collect::<Result<_>>()?;
        let modal = majority_vote(&per_step);
        let matching = per_step.iter().filter(|&&p| p == modal).count();
        tensors.push(TensorStability {
            tensor_id: tensor_id.clone(),
            stability: matching as f64 / per_step.len() as f64,
            per_step,
            modal,
        });
    }
    Ok(StabilityReport { tensors })
}

/// CSV long table: tensor_id,step,pattern.
pub fn stability_to_csv(report: &StabilityReport) -> String {
    let mut out = String::from("tensor_id,step,pattern\n");
    for t in &report.tensors {
        for (step, p) in t.per_step.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", t.tensor_id, step, p));
        }
    }
    out
}
