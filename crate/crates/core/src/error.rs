//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tensor primitives, diffusion math and the IO layer.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape preconditions violated (mismatched dims, indivisible grids, ...).
    #[error("shape error: {0}")]
    Shape(String),

    /// A primitive produced NaN or Inf. Non-finite values are never
    /// propagated silently; the offending operation is reported instead.
    #[error("non-finite value produced by `{op}`{detail}")]
    NonFinite { op: &'static str, detail: String },

    /// Invalid argument outside the shape system (bad sigma, bad percentile, ...).
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Configuration parsing or validation failure.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint encoding/decoding failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted (e.g. non-finite loss) with diagnostic context.
    #[error("training error: {0}")]
    Train(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
