use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum SilqError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid precision plan: {0}")]
    Plan(String),

    #[error("kv cache capacity exceeded: layer {layer} holds {len} of {max} positions, write of {write} rejected")]
    Capacity {
        layer: usize,
        len: usize,
        max: usize,
        write: usize,
    },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f32, snapshot: String },

    #[error("export equivalence check failed: max abs logit difference {max_diff:e} > {tolerance:e}")]
    Equivalence { max_diff: f32, tolerance: f32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl SilqError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        SilqError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SilqError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            SilqError::Divergence { .. } => 3,
            SilqError::Equivalence { .. } => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, SilqError>;
