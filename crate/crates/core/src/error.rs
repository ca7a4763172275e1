//! Crate-wide error type. Recoverable misuse (bad shapes, bad configs, bad
//! files) surfaces as `Err`; only internal logic bugs panic.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor/op shape or argument mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite value where finite data is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// File or directory I/O failure, with the offending path.
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed serialized data (JSON, checkpoint, PNG).
    #[error("format error in {what}: {detail}")]
    Format { what: String, detail: String },

    /// Training step aborted (e.g. non-finite gradient).
    #[error("training aborted: {0}")]
    TrainAbort(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        CoreError::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
