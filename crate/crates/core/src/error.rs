//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an argument that violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),

    /// A sequence would not fit in the model's context window.
    #[error("capacity error: sequence of length {len} exceeds max_seq_len {max}")]
    Capacity { len: usize, max: usize },

    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed file contents (weights, plan payloads, JSONL, JSON sidecars).
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported file version {0}")]
    UnsupportedVersion(u8),

    /// A planted model failed its built-in postcondition.
    #[error("construction error: {0}")]
    Construction(String),

    /// The model never produced enough hallucinations under the probe distribution.
    #[error("generation exhausted: wanted {wanted} samples, found {found} after {attempts} attempts")]
    GenerationExhausted {
        wanted: usize,
        found: usize,
        attempts: usize,
    },

    #[error("split error: {0}")]
    Split(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("pooling error: {0}")]
    Pooling(String),

    #[error("insufficient calibration: {0}")]
    InsufficientCalibration(String),

    /// An upstream artifact changed after a downstream one was produced from it.
    #[error("stale artifacts: {}", .0.join("; "))]
    Stale(Vec<String>),

    #[error("missing artifacts: {}", .0.join("; "))]
    Missing(Vec<String>),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
