use thiserror::Error;

/// Errors raised anywhere in the sampler stack.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A configuration value violates an invariant.
    #[error("configuration error: {0}")]
    Config(String),
    /// All particle weights (or log-values) collapsed to zero mass.
    #[error("degeneracy: {0}")]
    Degenerate(String),
    /// Arithmetic failure, e.g. a vanishing denominator.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A problem is too large for exhaustive enumeration.
    #[error("enumeration guard exceeded: {0}")]
    Guard(String),
    /// Malformed input data (mass mismatch, empty sets, bad files).
    #[error("input error: {0}")]
    Input(String),
    /// A text file failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
