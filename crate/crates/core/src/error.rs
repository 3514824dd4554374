use thiserror::Error;

/// Errors produced by the analysis and optimization routines.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration key is missing the expected type or shape.
    #[error("config schema error at `{key}`: {message}")]
    Schema { key: String, message: String },

    /// The configuration parsed but violates an invariant.
    #[error("invalid configuration: {0}")]
    Validation(String),

    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Matrix or vector dimensions are inconsistent.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A fixed-point iteration did not reach its tolerance.
    #[error("fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    /// A linear system is singular or its iteration matrix is not contractive.
    #[error("ill-conditioned system: {0}")]
    Conditioning(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
