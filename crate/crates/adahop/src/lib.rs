//! Emulation of outlier-pattern-aware low-precision matrix multiplication.
//!
//! The crate provides, at desk scale and entirely on the CPU:
//!
//! * MXFP4 block quantization (E2M1 codes, shared power-of-two scale per
//!   32-element block) and a quantized-operand matmul ([`mxfp4`]),
//! * normalized fast Walsh-Hadamard operand transforms applied along the
//!   inner or outer dimensions of a matmul ([`hadamard`]),
//! * coefficient-of-variation detection of row/column outlier patterns and
//!   majority-vote calibration ([`pattern`]),
//! * a per-matmul strategy engine that picks between the inner transform,
//!   outlier extraction on either operand, and full precision ([`strategy`]),
//! * seeded synthetic tensors with planted patterns and tuned kurtosis
//!   ([`synth`]),
//! * an error-analysis harness for pair sweeps and transform-effectiveness
//!   measurements ([`analysis`]),
//! * a manual-backprop MLP trainer that routes its three per-layer matmuls
//!   through the engine ([`toytrain`]),
//! * a bit-exact tensor file format ([`io`]) and a pinned RNG ([`rng`]).

pub mod analysis;
pub mod error;
pub mod hadamard;
pub mod io;
pub mod matrix;
pub mod mxfp4;
pub mod pattern;
pub mod rng;
pub mod strategy;
pub mod synth;
pub mod toytrain;

pub use error::{Error, Result};
pub use hadamard::{fwht_cols, fwht_rows, iht_matmul, oht_matmul, HadamardConfig};
pub use matrix::{excess_kurtosis, matmul_exact, outlier_factor, stats, DenseMatrix, MatrixStats};
pub use mxfp4::{dequantize, matmul_quantized, quantize, BlockAxis, MxfpTensor, Quantizer};
pub use pattern::{
    calibrate, detect_pattern, normalized_cvs, CalibrationRecord, DetectionConfig, OutlierPattern,
};
pub use strategy::{
    execute, foid_indices, oe_decompose, oe_left_matmul, oe_right_matmul, strategy_for_pair,
    EngineConfig, ExtractAxis, Level, MatmulPath, OEDecomposition, PatternPair, Strategy,
    StrategyKind, StrategyPlan,
};
pub use synth::{generate, generate_pair, SynthSpec};
