use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the restoration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor shape {0:?} has zero elements")]
    EmptyTensor(Vec<usize>),

    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("operator spec `{fragment}`: {message}")]
    Spec { fragment: String, message: String },

    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dense size {rows}x{cols} exceeds the materialization cap of {cap} entries")]
    SizeLimit { rows: usize, cols: usize, cap: usize },

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },

    #[error("numeric domain error: {0}")]
    Domain(String),

    #[error("effective sample size {ess:.2} below 10; x_t lies too far in the tails")]
    LowEffectiveSampleSize { ess: f64 },

    #[error("external denoiser failed: {0}")]
    External(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn spec(fragment: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Spec {
            fragment: fragment.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
