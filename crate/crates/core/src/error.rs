//! Crate-wide error type.
//!
//! Numerical kernels that can only fail through programmer error (internal
//! shape bookkeeping) assert instead; everything that can fail on user input
//! (configs, files, ill-posed models, divergent solvers) goes through
//! [`Error`].

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operand had a shape or length incompatible with the operation.
    #[error("{op}: shape mismatch: {details}")]
    Shape { op: &'static str, details: String },

    /// An argument was outside the mathematical domain of the operation.
    #[error("{op}: domain error: {details}")]
    Domain { op: &'static str, details: String },

    /// A gradient or loss stopped being finite; names the offending tensor.
    #[error("non-finite {what} in `{name}`")]
    NonFinite { what: &'static str, name: String },

    /// Belief propagation failed to converge within the iteration budget.
    #[error("belief propagation diverged: residual {residual:.3e} after {iterations} iterations")]
    Divergence { iterations: usize, residual: f64 },

    /// A matrix that must be symmetric positive definite is not.
    #[error("matrix not positive definite: {context}")]
    NotPositiveDefinite { context: String },

    /// A named model parameter was missing or had the wrong shape.
    #[error("parameter `{name}`: {details}")]
    Parameter { name: String, details: String },

    /// Bad run or model configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A serialized artifact (dataset record, checkpoint) failed to parse.
    #[error("parse error{}: {details}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, details: String },

    /// A requested operating point cannot be reached.
    #[error("unreachable operating point: {0}")]
    OperatingPoint(String),

    /// Scenario generation could not satisfy its invariants in budget.
    #[error("scenario generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape { op, details: details.into() }
    }

    pub fn domain(op: &'static str, details: impl Into<String>) -> Self {
        Error::Domain { op, details: details.into() }
    }
}
