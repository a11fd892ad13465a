//! Crate-wide error type and result alias.

use thiserror::Error;

/// Unified error for every stage of the pipeline.
///
/// The CLI maps variants to process exit codes: `Invariant` is an internal
/// consistency failure (exit 2), `Numeric` is a numerical failure such as a
/// non-finite loss (exit 3), and everything else is reported as a usage
/// error (exit 1).
#[derive(Debug, Error)]
pub enum Error {
    /// Operands with incompatible shapes were passed to a tensor op.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A caller-supplied value is out of range or otherwise unusable.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration value or combination is rejected.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An internal invariant that should hold by construction was violated.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// A numeric failure: non-finite loss, degenerate distribution, etc.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed input file (config, checkpoint, or dataset).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand used by tensor ops to report operand shapes.
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
