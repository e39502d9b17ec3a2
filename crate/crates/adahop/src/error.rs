use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions are incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// The input is valid in shape but degenerate for the requested statistic
    /// (all-zero matrix, zero variance, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A parameter or configuration value is out of its documented domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// A tensor file does not conform to the AHT1 byte layout. `offset` is the
    /// byte position at which decoding failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Bisection on the outlier scale could not reach the kurtosis target.
    #[error("kurtosis tuning failed: {0}")]
    Tuning(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
