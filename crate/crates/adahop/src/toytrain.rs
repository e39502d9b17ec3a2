//! A minimal manual-backprop MLP trainer whose three per-layer matmuls
//! (forward, weight gradient, input gradient) are routed through the strategy
//! engine.
//!
//! The task is teacher-student regression: a frozen random teacher network
//! produces targets for Gaussian inputs whose covariance is anisotropic (a
//! few input features carry a much larger standard deviation, the shape that
//! feature-channel outliers take in practice). That structure is what
//! separates the backends: with isotropic inputs every rotation of the data
//! has identical quantization error and there is nothing for a transform or
//! extraction strategy to win.
//!
//! The adaptive backends run their first `steps_calib` steps in full
//! precision while recording operand patterns per matmul, freeze a plan by
//! majority vote, and execute the remaining steps through the plan. Weight
//! updates are always applied to full-precision master weights.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hadamard::iht_matmul;
use crate::io::write_matrix;
use crate::matrix::{matmul_exact, DenseMatrix};
use crate::mxfp4::matmul_quantized;
use crate::pattern::{detect_pattern, majority_vote, CalibrationRecord, DetectionConfig, OutlierPattern};
use crate::rng::{derive_seed, Rng};
use crate::strategy::{
    execute, strategy_for_pair, EngineConfig, Level, MatmulPath, PatternPair, PlanAssignment,
    Strategy, StrategyPlan,
};

const TAG_STUDENT: u64 = 0x51;
const TAG_TEACHER: u64 = 0x52;
const TAG_DATA: u64 = 0x53;
const TAG_DATA_COLS: u64 = 0x54;

/// Scale of the heavy input features.
const INPUT_OUTLIER_SCALE: f32 = 32.0;
/// Heavy input features per 8 input dims (at least 1).
const INPUT_OUTLIER_FRACTION: usize = 8;
/// Final loss = mean over this many trailing steps.
const FINAL_WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "gelu")]
    Gelu,
}

impl Activation {
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => gelu(x),
        }
    }

    fn derivative(self, x: f32) -> f32 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => gelu_derivative(x),
        }
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    const A: f32 = 0.044_715;
    let u = C * (x + A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    const A: f32 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
}

/// Matmul backends the trainer can run under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    #[serde(rename = "FULL_PRECISION")]
    FullPrecision,
    #[serde(rename = "NAIVE_MXFP4")]
    NaiveMxfp4,
    #[serde(rename = "UNIFORM_IHT")]
    UniformIht,
    #[serde(rename = "ADAHOP_LV1")]
    AdaHopLv1,
    #[serde(rename = "ADAHOP_LV2")]
    AdaHopLv2,
}

impl Backend {
    pub const ALL: [Backend; 5] = [
        Backend::FullPrecision,
        Backend::NaiveMxfp4,
        Backend::UniformIht,
        Backend::AdaHopLv1,
        Backend::AdaHopLv2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Backend::FullPrecision => "FULL_PRECISION",
            Backend::NaiveMxfp4 => "NAIVE_MXFP4",
            Backend::UniformIht => "UNIFORM_IHT",
            Backend::AdaHopLv1 => "ADAHOP_LV1",
            Backend::AdaHopLv2 => "ADAHOP_LV2",
        }
    }

    fn level(self) -> Option<Level> {
        match self {
            Backend::AdaHopLv1 => Some(Level::Lv1),
            Backend::AdaHopLv2 => Some(Level::Lv2),
            _ => None,
        }
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// Trainer configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyModelConfig {
    /// Layer widths, each divisible by 32.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    /// Tokens per step, divisible by 32 (it is a contraction dimension in
    /// the weight-gradient matmul).
    pub batch: usize,
    pub steps_calib: usize,
    pub steps_train: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            layer_dims: vec![64, 256, 64],
            activation: Activation::Relu,
            batch: 64,
            steps_calib: 30,
            steps_train: 300,
            lr: 2e-3,
            seed: 42,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Input("layer_dims needs at least input and output widths".into()));
        }
        for &d in &self.layer_dims {
            if d == 0 || d % 32 != 0 {
                return Err(Error::Input(format!("layer width {d} must be a positive multiple of 32")));
            }
        }
        if self.batch == 0 || self.batch % 32 != 0 {
            return Err(Error::Input(format!("batch {} must be a positive multiple of 32", self.batch)));
        }
        if self.steps_calib == 0 {
            return Err(Error::Input("steps_calib must be >= 1".into()));
        }
        if self.steps_train == 0 {
            return Err(Error::Input("steps_train must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Input(format!("lr must be positive and finite, got {}", self.lr)));
        }
        Ok(())
    }

    fn layers(&self) -> usize {
        self.layer_dims.len() - 1
    }
}

/// Plain MLP: weights[l] is d_out x d_in for layer l.
#[derive(Debug, Clone)]
struct Mlp {
    weights: Vec<DenseMatrix>,
}

impl Mlp {
    fn init(dims: &[usize], seed: u64) -> Mlp {
        let weights = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (d_in, d_out) = (w[0], w[1]);
                let mut rng = Rng::new(derive_seed(seed, l as u64));
                let scale = 1.0 / (d_in as f32).sqrt();
                DenseMatrix::from_fn(d_out, d_in, |_, _| rng.normal() as f32 * scale)
            })
            .collect();
        Mlp { weights }
    }
}

struct ForwardTrace {
    /// acts[0] = input, acts[l+1] = layer l output (post-activation except last).
    acts: Vec<DenseMatrix>,
    /// preacts[l] = raw layer l output before activation.
    preacts: Vec<DenseMatrix>,
}

/// Per-matmul dispatcher plus calibration state for the adaptive backends.
struct Router {
    backend: Backend,
    engine: EngineConfig,
    steps_calib: usize,
    detection: DetectionConfig,
    history: BTreeMap<(usize, MatmulPath), (Vec<OutlierPattern>, Vec<OutlierPattern>)>,
    plan: Option<BTreeMap<(usize, MatmulPath), Strategy>>,
    records: Vec<CalibrationRecord>,
    plan_report: Option<StrategyPlan>,
}

impl Router {
    fn new(backend: Backend, engine: EngineConfig, steps_calib: usize) -> Router {
        Router {
            backend,
            engine,
            steps_calib,
            detection: DetectionConfig::default(),
            history: BTreeMap::new(),
            plan: None,
            records: Vec::new(),
            plan_report: None,
        }
    }

    fn route(
        &mut self,
        layer: usize,
        path: MatmulPath,
        a: &DenseMatrix,
        b: &DenseMatrix,
        step: usize,
    ) -> Result<DenseMatrix> {
        match self.backend {
            Backend::FullPrecision => matmul_exact(a, b),
            Backend::NaiveMxfp4 => matmul_quantized(a, b),
            Backend::UniformIht => iht_matmul(a, b, &self.engine.hadamard, self.engine.quantizer),
            Backend::AdaHopLv1 | Backend::AdaHopLv2 => {
                if step < self.steps_calib {
                    let pa = detect_pattern(a, &self.detection)?;
                    let pb = detect_pattern(b, &self.detection)?;
                    let entry = self.history.entry((layer, path)).or_default();
                    entry.0.push(pa);
                    entry.1.push(pb);
                    matmul_exact(a, b)
                } else {
                    if self.plan.is_none() {
                        self.finalize_plan();
                    }
                    let strategy = self.plan.as_ref().unwrap()[&(layer, path)];
                    execute(a, b, &strategy, &self.engine)
                }
            }
        }
    }

    /// Majority-vote each operand's pattern history and freeze the plan.
    fn finalize_plan(&mut self) {
        let level = self.backend.level().expect("only adaptive backends build plans");
        let mut plan = BTreeMap::new();
        let mut assignments = Vec::new();
        for ((layer, path), (votes_a, votes_b)) in &self.history {
            let pair = PatternPair { left: majority_vote(votes_a), right: majority_vote(votes_b) };
            let strategy = strategy_for_pair(pair, level);
            plan.insert((*layer, *path), strategy);
            assignments.push(PlanAssignment {
                layer: format!("layer{layer}"),
                path: *path,
                pair,
                strategy: strategy.kind,
                k: strategy.k_extract,
            });
            for (suffix, votes) in [("a", votes_a), ("b", votes_b)] {
                self.records.push(CalibrationRecord {
                    tensor_id: format!("layer{layer}.{path}.{suffix}"),
                    per_step: votes.clone(),
                    final_pattern: majority_vote(votes),
                });
            }
        }
        self.plan_report = Some(StrategyPlan { level, assignments });
        self.plan = Some(plan);
    }
}

/// Teacher-student data source. Inputs are zero-mean Gaussian with a fixed
/// set of high-variance features; targets come from a frozen random teacher
/// evaluated in full precision.
struct Task {
    teacher: Mlp,
    activation: Activation,
    outlier_cols: Vec<usize>,
    feature_scale: f32,
    batch: usize,
    d_in: usize,
    seed: u64,
}

impl Task {
    fn new(cfg: &ToyModelConfig) -> Task {
        Task::with_feature_scale(cfg, INPUT_OUTLIER_SCALE)
    }

    /// The gradient check runs with `feature_scale` 1.0: anisotropy only
    /// changes the data, not the wiring, and unit-variance inputs keep the
    /// loss small enough for finite differences over f32 forward passes.
    fn with_feature_scale(cfg: &ToyModelConfig, feature_scale: f32) -> Task {
        let d_in = cfg.layer_dims[0];
        let count = (d_in / INPUT_OUTLIER_FRACTION).max(1);
        let outlier_cols =
            Rng::substream(cfg.seed, TAG_DATA_COLS).sample_distinct(count, d_in);
        Task {
            teacher: Mlp::init(&cfg.layer_dims, derive_seed(cfg.seed, TAG_TEACHER)),
            activation: cfg.activation,
            outlier_cols,
            feature_scale,
            batch: cfg.batch,
            d_in,
            seed: derive_seed(cfg.seed, TAG_DATA),
        }
    }

    fn input(&self, step: usize) -> DenseMatrix {
        let mut rng = Rng::new(derive_seed(self.seed, step as u64));
        let mut x = DenseMatrix::gaussian(self.batch, self.d_in, &mut rng);
        if self.feature_scale != 1.0 {
            for i in 0..self.batch {
                let row = x.row_mut(i);
                for &j in &self.outlier_cols {
                    row[j] *= self.feature_scale;
                }
            }
        }
        x
    }

    fn targets(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut router = Router::new(Backend::FullPrecision, EngineConfig::default(), 0);
        let trace = forward(&self.teacher, x, self.activation, &mut router, 0)?;
        Ok(trace.acts.last().unwrap().clone())
    }
}

fn forward(
    model: &Mlp,
    x: &DenseMatrix,
    activation: Activation,
    router: &mut Router,
    step: usize,
) -> Result<ForwardTrace> {
    let layers = model.weights.len();
    let mut acts = Vec::with_capacity(layers + 1);
    let mut preacts = Vec::with_capacity(layers);
    acts.push(x.clone());
    for (l, w) in model.weights.iter().enumerate() {
        let wt = w.transpose();
        let y = router.route(l, MatmulPath::Fwd, &acts[l], &wt, step)?;
        let out = if l + 1 == layers {
            y.clone()
        } else {
            DenseMatrix::from_fn(y.rows(), y.cols(), |i, j| activation.apply(y.get(i, j)))
        };
        preacts.push(y);
        acts.push(out);
    }
    Ok(ForwardTrace { acts, preacts })
}

/// Mean squared error over all output entries, accumulated in f64.
fn loss_of(pred: &DenseMatrix, target: &DenseMatrix) -> f64 {
    let sum: f64 = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    sum / pred.len() as f64
}

struct BackwardResult {
    weight_grads: Vec<DenseMatrix>,
    input_grad: DenseMatrix,
}

fn backward(
    model: &Mlp,
    trace: &ForwardTrace,
    target: &DenseMatrix,
    activation: Activation,
    router: &mut Router,
    step: usize,
) -> Result<BackwardResult> {
    let layers = model.weights.len();
    let pred = trace.acts.last().unwrap();
    let scale = 2.0 / pred.len() as f32;
    let mut gy = DenseMatrix::from_fn(pred.rows(), pred.cols(), |i, j| {
        (pred.get(i, j) - target.get(i, j)) * scale
    });

    let mut weight_grads = vec![DenseMatrix::zeros(1, 1); layers];
    let mut input_grad = DenseMatrix::zeros(1, 1);
    for l in (0..layers).rev() {
        // weight gradient consumes the transposed output gradient and the
        // layer input, in exactly that orientation
        let gyt = gy.transpose();
        debug_assert_eq!(gyt.cols(), trace.acts[l].rows());
        weight_grads[l] = router.route(l, MatmulPath::GradW, &gyt, &trace.acts[l], step)?;
        debug_assert_eq!(weight_grads[l].shape(), model.weights[l].shape());

        let gx = router.route(l, MatmulPath::GradX, &gy, &model.weights[l], step)?;
        if l == 0 {
            input_grad = gx;
        } else {
            let pre = &trace.preacts[l - 1];
            gy = DenseMatrix::from_fn(gx.rows(), gx.cols(), |i, j| {
                gx.get(i, j) * activation.derivative(pre.get(i, j))
            });
        }
    }
    Ok(BackwardResult { weight_grads, input_grad })
}

fn sgd_step(model: &mut Mlp, grads: &[DenseMatrix], lr: f32) {
    for (w, g) in model.weights.iter_mut().zip(grads) {
        let data = w.as_mut_slice();
        for (d, &gv) in data.iter_mut().zip(g.as_slice()) {
            *d -= lr * gv;
        }
    }
}

/// Loss traces of one backend run.
///
/// `losses` is the figure of merit: the full-precision evaluation loss of the
/// current weights on each step's batch, taken before the update. It isolates
/// what the backend *learned* from the noise its quantized forward injects
/// into a single prediction; `train_losses` records the latter as computed by
/// the backend itself.
#[derive(Debug, Clone, Serialize)]
pub struct BackendTrace {
    pub backend: Backend,
    pub losses: Vec<f64>,
    pub train_losses: Vec<f64>,
    /// Step at which the loss stopped being finite, if it did.
    pub failed_at: Option<usize>,
    /// Mean evaluation loss over the trailing window; None when the run failed.
    pub final_loss: Option<f64>,
}

/// Result of training a single backend.
#[derive(Debug, Clone, Serialize)]
pub struct TrainResult {
    pub trace: BackendTrace,
    pub calibration_records: Vec<CalibrationRecord>,
    pub plan: Option<StrategyPlan>,
}

/// Comparison report across all backends of one seed.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub config: ToyModelConfig,
    pub traces: Vec<BackendTrace>,
    pub gaps: Vec<GapEntry>,
    pub calibration_records: Vec<CalibrationRecord>,
    pub plans: Vec<StrategyPlan>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GapEntry {
    pub backend: Backend,
    pub final_loss: Option<f64>,
    /// final_loss minus the full-precision final loss.
    pub gap: Option<f64>,
}

/// Train one backend. Data order, teacher and initialization depend only on
/// the seed, so every backend sees identical inputs.
pub fn train(cfg: &ToyModelConfig, backend: Backend) -> Result<TrainResult> {
    train_with_engine(cfg, backend, EngineConfig::default())
}

/// `train` with an explicit engine (used to swap in the identity quantizer).
pub fn train_with_engine(
    cfg: &ToyModelConfig,
    backend: Backend,
    engine: EngineConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    let task = Task::new(cfg);
    let mut model = Mlp::init(&cfg.layer_dims, derive_seed(cfg.seed, TAG_STUDENT));
    let mut router = Router::new(backend, engine, cfg.steps_calib);

    let mut losses = Vec::with_capacity(cfg.steps_train);
    let mut train_losses = Vec::with_capacity(cfg.steps_train);
    let mut failed_at = None;
    for step in 0..cfg.steps_train {
        let x = task.input(step);
        let t = task.targets(&x)?;
        let trace = forward(&model, &x, cfg.activation, &mut router, step)?;
        let train_loss = loss_of(trace.acts.last().unwrap(), &t);
        let eval_loss = if router.backend == Backend::FullPrecision {
            train_loss
        } else {
            let mut eval_router = Router::new(Backend::FullPrecision, router.engine, 0);
            let eval = forward(&model, &x, cfg.activation, &mut eval_router, step)?;
            loss_of(eval.acts.last().unwrap(), &t)
        };
        if !train_loss.is_finite() || !eval_loss.is_finite() {
            failed_at = Some(step);
            break;
        }
        losses.push(eval_loss);
        train_losses.push(train_loss);
        let grads = backward(&model, &trace, &t, cfg.activation, &mut router, step)?;
        sgd_step(&mut model, &grads.weight_grads, cfg.lr);
    }

    let final_loss = if failed_at.is_some() {
        None
    } else {
        let window = losses.len().min(FINAL_WINDOW);
        Some(losses[losses.len() - window..].iter().sum::<f64>() / window as f64)
    };

    // adaptive backends that never left calibration still deserve a plan dump
    if matches!(backend, Backend::AdaHopLv1 | Backend::AdaHopLv2)
        && router.plan.is_none()
        && !router.history.is_empty()
    {
        router.finalize_plan();
    }

    Ok(TrainResult {
        trace: BackendTrace { backend, losses, train_losses, failed_at, final_loss },
        calibration_records: router.records,
        plan: router.plan_report,
    })
}

/// Train every backend on identical data and report loss gaps against the
/// full-precision run.
pub fn train_all(cfg: &ToyModelConfig) -> Result<TrainReport> {
    let mut traces = Vec::new();
    let mut gaps = Vec::new();
    let mut calibration_records = Vec::new();
    let mut plans = Vec::new();
    let mut full_precision_final = None;

    for backend in Backend::ALL {
        let result = train(cfg, backend)?;
        if backend == Backend::FullPrecision {
            full_precision_final = result.trace.final_loss;
        }
        gaps.push(GapEntry {
            backend,
            final_loss: result.trace.final_loss,
            gap: match (result.trace.final_loss, full_precision_final) {
                (Some(f), Some(fp)) => Some(f - fp),
                _ => None,
            },
        });
        traces.push(result.trace);
        if backend == Backend::AdaHopLv1 {
            calibration_records = result.calibration_records;
        }
        if let Some(plan) = result.plan {
            plans.push(plan);
        }
    }

    Ok(TrainReport { config: cfg.clone(), traces, gaps, calibration_records, plans })
}

/// Per-step losses as CSV: step,backend,loss.
pub fn losses_to_csv(report: &TrainReport) -> String {
    let mut out = String::from("step,backend,loss\n");
    for trace in &report.traces {
        for (step, loss) in trace.losses.iter().enumerate() {
            out.push_str(&format!("{},{},{:.6e}\n", step, trace.backend, loss));
        }
    }
    out
}

/// Central-difference gradient validation report.
#[derive(Debug, Clone, Serialize)]
pub struct GradientCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

/// Finite-difference step for the gradient check.
const FD_STEP: f32 = 1e-2;
/// Coordinates whose analytic gradient is below this fraction of the largest
/// one carry no signal against f32 forward rounding and are not sampled.
const FD_MAGNITUDE_FLOOR: f64 = 0.05;

/// Validate the analytic weight and input gradients against central finite
/// differences of the loss on a tiny full-precision model (every width must
/// be 32). Checks at least `min_coords` sampled coordinates; any coordinate
/// whose relative error exceeds `tolerance` fails with its location in the
/// message.
pub fn gradient_check(cfg: &ToyModelConfig, min_coords: usize, tolerance: f64) -> Result<GradientCheckReport> {
    let check_cfg = ToyModelConfig { batch: 32, steps_train: 1, ..cfg.clone() };
    check_cfg.validate()?;
    if check_cfg.layer_dims.iter().any(|&d| d != 32) {
        return Err(Error::Input(format!(
            "gradient check runs on all-32 widths, got {:?}",
            check_cfg.layer_dims
        )));
    }
    let task = Task::with_feature_scale(&check_cfg, 1.0);
    let model = Mlp::init(&check_cfg.layer_dims, derive_seed(check_cfg.seed, TAG_STUDENT));
    let x = task.input(0);
    let t = task.targets(&x)?;

    let mut router = Router::new(Backend::FullPrecision, EngineConfig::default(), 0);
    let trace = forward(&model, &x, check_cfg.activation, &mut router, 0)?;
    let analytic = backward(&model, &trace, &t, check_cfg.activation, &mut router, 0)?;

    let loss_at = |model: &Mlp, x: &DenseMatrix| -> Result<f64> {
        let mut router = Router::new(Backend::FullPrecision, EngineConfig::default(), 0);
        let trace = forward(model, x, check_cfg.activation, &mut router, 0)?;
        Ok(loss_of(trace.acts.last().unwrap(), &t))
    };

    // candidate coordinates: every weight entry plus the input batch;
    // layer index usize::MAX marks the input
    let mut max_grad = 0.0f64;
    for g in analytic.weight_grads.iter().chain(std::iter::once(&analytic.input_grad)) {
        max_grad = max_grad.max(g.max_abs() as f64);
    }
    let floor = FD_MAGNITUDE_FLOOR * max_grad;

    let mut candidates = Vec::new();
    for (l, g) in analytic.weight_grads.iter().enumerate() {
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                if (g.get(i, j) as f64).abs() >= floor {
                    candidates.push((l, i, j));
                }
            }
        }
    }
    for i in 0..analytic.input_grad.rows() {
        for j in 0..analytic.input_grad.cols() {
            if (analytic.input_grad.get(i, j) as f64).abs() >= floor {
                candidates.push((usize::MAX, i, j));
            }
        }
    }
    if candidates.len() < min_coords {
        return Err(Error::Input(format!(
            "only {} coordinates carry checkable gradient signal, need {min_coords}",
            candidates.len()
        )));
    }

    let mut rng = Rng::substream(check_cfg.seed, 0x6d);
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    for _ in 0..min_coords {
        let (l, i, j) = candidates[rng.next_below(candidates.len() as u64) as usize];
        let (analytic_g, numeric_g) = if l == usize::MAX {
            let mut xp = x.clone();
            xp.set(i, j, x.get(i, j) + FD_STEP);
            let mut xm = x.clone();
            xm.set(i, j, x.get(i, j) - FD_STEP);
            let num = (loss_at(&model, &xp)? - loss_at(&model, &xm)?) / (2.0 * FD_STEP as f64);
            (analytic.input_grad.get(i, j) as f64, num)
        } else {
            let mut plus = model.clone();
            plus.weights[l].set(i, j, model.weights[l].get(i, j) + FD_STEP);
            let mut minus = model.clone();
            minus.weights[l].set(i, j, model.weights[l].get(i, j) - FD_STEP);
            let num = (loss_at(&plus, &x)? - loss_at(&minus, &x)?) / (2.0 * FD_STEP as f64);
            (analytic.weight_grads[l].get(i, j) as f64, num)
        };
        let rel = (analytic_g - numeric_g).abs() / analytic_g.abs().max(numeric_g.abs());
        if rel > tolerance {
            let place = if l == usize::MAX { "input".to_string() } else { format!("layer{l} weight") };
            return Err(Error::Input(format!(
                "gradient mismatch at {place} ({i},{j}): analytic {analytic_g:.6e}, \
                 finite-difference {numeric_g:.6e}, rel {rel:.3e} > {tolerance:.1e}"
            )));
        }
        max_rel = max_rel.max(rel);
        sum_rel += rel;
    }

    Ok(GradientCheckReport {
        coords_checked: min_coords,
        max_rel_err: max_rel,
        mean_rel_err: sum_rel / min_coords as f64,
    })
}

/// Train in full precision and write X, W, G_Y snapshots per layer per step
/// as AHT1 files named `layer{l}.{x|w|gy}_step{NNNN}.aht1`. Returns the paths.
pub fn record_streams(cfg: &ToyModelConfig, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let task = Task::new(cfg);
    let mut model = Mlp::init(&cfg.layer_dims, derive_seed(cfg.seed, TAG_STUDENT));
    let mut router = Router::new(Backend::FullPrecision, EngineConfig::default(), 0);

    let mut paths = Vec::new();
    let mut write = |name: String, m: &DenseMatrix| -> Result<()> {
        let path = out_dir.join(name);
        write_matrix(&path, m).map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(
                io.kind(),
                format!("{}: {io}", path.display()),
            )),
            other => other,
        })?;
        paths.push(path);
        Ok(())
    };

    for step in 0..cfg.steps_train {
        let x = task.input(step);
        let t = task.targets(&x)?;
        let trace = forward(&model, &x, cfg.activation, &mut router, step)?;

        // reconstruct each layer's output gradient the same way backward does
        let pred = trace.acts.last().unwrap();
        let scale = 2.0 / pred.len() as f32;
        let mut gy = DenseMatrix::from_fn(pred.rows(), pred.cols(), |i, j| {
            (pred.get(i, j) - t.get(i, j)) * scale
        });
        let mut gys = vec![gy.clone()];
        for l in (1..cfg.layers()).rev() {
            let gx = matmul_exact(&gy, &model.weights[l])?;
            let pre = &trace.preacts[l - 1];
            gy = DenseMatrix::from_fn(gx.rows(), gx.cols(), |i, j| {
                gx.get(i, j) * cfg.activation.derivative(pre.get(i, j))
            });
            gys.push(gy.clone());
        }
        gys.reverse(); // gys[l] is layer l's output gradient

        for l in 0..cfg.layers() {
            write(format!("layer{l}.x_step{step:04}.aht1"), &trace.acts[l])?;
            write(format!("layer{l}.w_step{step:04}.aht1"), &model.weights[l])?;
            write(format!("layer{l}.gy_step{step:04}.aht1"), &gys[l])?;
        }

        let grads = backward(&model, &trace, &t, cfg.activation, &mut router, step)?;
        sgd_step(&mut model, &grads.weight_grads, cfg.lr);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mxfp4::Quantizer;

    fn tiny_cfg() -> ToyModelConfig {
        ToyModelConfig {
            layer_dims: vec![32, 32, 32],
            batch: 32,
            steps_calib: 3,
            steps_train: 12,
            ..ToyModelConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = ToyModelConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.layer_dims = vec![64, 100, 64];
        assert!(cfg.validate().is_err());
        cfg.layer_dims = vec![64];
        assert!(cfg.validate().is_err());
        cfg = ToyModelConfig { batch: 48, ..ToyModelConfig::default() };
        assert!(cfg.validate().is_err());
        cfg = ToyModelConfig { lr: 0.0, ..ToyModelConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn full_precision_loss_decreases() {
        let cfg = ToyModelConfig { steps_train: 120, ..ToyModelConfig::default() };
        let result = train(&cfg, Backend::FullPrecision).unwrap();
        assert!(result.trace.failed_at.is_none());
        let losses = &result.trace.losses;
        let early: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let late: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(late < early * 0.5, "early {early}, late {late}");
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let cfg = tiny_cfg();
        let a = train(&cfg, Backend::AdaHopLv1).unwrap();
        let b = train(&cfg, Backend::AdaHopLv1).unwrap();
        let bits = |t: &BackendTrace| t.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.trace), bits(&b.trace));
        assert_eq!(a.plan, b.plan);
    }

    #[test]
    fn adahop_with_identity_quantizer_matches_full_precision() {
        let cfg = ToyModelConfig { steps_train: 100, ..ToyModelConfig::default() };
        let fp = train(&cfg, Backend::FullPrecision).unwrap();
        let engine = EngineConfig { quantizer: Quantizer::Identity, ..EngineConfig::default() };
        let ada = train_with_engine(&cfg, Backend::AdaHopLv1, engine).unwrap();
        for (step, (a, b)) in fp.trace.losses.iter().zip(&ada.trace.losses).enumerate() {
            let rel = (a - b).abs() / a.abs().max(1e-12);
            assert!(rel < 1e-4, "step {step}: {a} vs {b} (rel {rel})");
        }
    }

    #[test]
    fn zero_input_batch_gives_zero_weight_gradients() {
        let cfg = tiny_cfg();
        let model = Mlp::init(&cfg.layer_dims, derive_seed(cfg.seed, TAG_STUDENT));
        let x = DenseMatrix::zeros(cfg.batch, cfg.layer_dims[0]);
        let t = DenseMatrix::zeros(cfg.batch, *cfg.layer_dims.last().unwrap());
        let mut router = Router::new(Backend::FullPrecision, EngineConfig::default(), 0);
        let trace = forward(&model, &x, cfg.activation, &mut router, 0).unwrap();
        let grads = backward(&model, &trace, &t, cfg.activation, &mut router, 0).unwrap();
        for g in &grads.weight_grads {
            assert!(g.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_unit_gradient_matches_closed_form() {
        // one linear unit y = w*x with w = 1: dL/dw of (y - t)^2 averaged
        // over a single sample is 2(x - t)x
        let model = Mlp { weights: vec![DenseMatrix::new(1, 1, vec![1.0]).unwrap()] };
        let x = DenseMatrix::new(1, 1, vec![1.5]).unwrap();
        let t = DenseMatrix::new(1, 1, vec![0.25]).unwrap();
        let mut router = Router::new(Backend::FullPrecision, EngineConfig::default(), 0);
        let trace = forward(&model, &x, Activation::Relu, &mut router, 0).unwrap();
        let grads = backward(&model, &trace, &t, Activation::Relu, &mut router, 0).unwrap();
        let want = 2.0 * (1.5 - 0.25) * 1.5;
        let got = grads.weight_grads[0].get(0, 0);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn gradient_check_passes_on_smooth_activation() {
        let cfg = ToyModelConfig { activation: Activation::Gelu, seed: 7, ..tiny_cfg() };
        let report = gradient_check(&cfg, 120, 1e-3).unwrap();
        assert_eq!(report.coords_checked, 120);
        assert!(report.max_rel_err <= 1e-3);
    }

    #[test]
    fn gradient_check_single_layer_linear_model() {
        // one linear layer, quadratic loss: finite differences are exact up
        // to forward rounding, so a tighter tolerance applies
        let cfg = ToyModelConfig {
            layer_dims: vec![32, 32],
            batch: 32,
            activation: Activation::Gelu,
            seed: 11,
            ..ToyModelConfig::default()
        };
        let report = gradient_check(&cfg, 100, 1e-4).unwrap();
        assert!(report.max_rel_err <= 1e-4);
    }

    #[test]
    fn gradient_check_rejects_wide_layers() {
        let cfg = ToyModelConfig { layer_dims: vec![64, 64], ..ToyModelConfig::default() };
        assert!(gradient_check(&cfg, 10, 1e-3).is_err());
    }

    #[test]
    fn recorded_streams_count_and_roundtrip() {
        let cfg = ToyModelConfig {
            layer_dims: vec![64, 256, 64],
            steps_train: 10,
            ..ToyModelConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let paths = record_streams(&cfg, dir.path()).unwrap();
        // 2 layers x 3 tensors x 10 steps
        assert_eq!(paths.len(), 60);
        for p in &paths {
            let m = crate::io::read_matrix(p).unwrap();
            assert!(m.rows() > 0);
        }
    }

    #[test]
    fn recorded_weight_stream_detects_none_every_step() {
        let cfg = ToyModelConfig { steps_train: 8, ..ToyModelConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        record_streams(&cfg, dir.path()).unwrap();
        let det = DetectionConfig::default();
        for l in 0..cfg.layers() {
            for step in 0..cfg.steps_train {
                let p = dir.path().join(format!("layer{l}.w_step{step:04}.aht1"));
                let w = crate::io::read_matrix(&p).unwrap();
                assert_eq!(
                    detect_pattern(&w, &det).unwrap(),
                    OutlierPattern::None,
                    "layer {l} step {step}"
                );
            }
        }
    }

    #[test]
    fn adahop_plan_covers_every_matmul() {
        let cfg = tiny_cfg();
        let result = train(&cfg, Backend::AdaHopLv1).unwrap();
        let plan = result.plan.expect("plan must exist after calibration");
        // 2 layers x 3 paths
        assert_eq!(plan.assignments.len(), 6);
        assert_eq!(result.calibration_records.len(), 12);
        for record in &result.calibration_records {
            assert_eq!(record.per_step.len(), cfg.steps_calib);
        }
    }
}
