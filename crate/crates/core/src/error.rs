use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration for `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("chain is not ergodic: {0}")]
    Ergodicity(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("did not converge after {iterations} iterations (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("iterate diverged at step {step} (norm {norm:e})")]
    Divergence { step: u64, norm: f64 },

    #[error("accumulator is empty")]
    EmptyAccumulator,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Rejects NaN/Inf entries in a parameter vector.
pub(crate) fn check_finite(field: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::config(
            format!("{field}[{i}]"),
            format!("non-finite value {}", values[i]),
        )),
        None => Ok(()),
    }
}
