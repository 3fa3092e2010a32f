//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A binary file does not match its expected layout (IDX, CIFAR batch,
    /// checkpoint). Carries the offending path or stream and what was seen.
    #[error("format error in {source_name}: {detail}")]
    Format { source_name: String, detail: String },

    /// Two inputs that must agree (image/label counts, dims across files)
    /// do not.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Caller passed shapes, values, or options that violate a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A matrix failed a numerical-domain requirement (symmetry, positive
    /// definiteness) or a computation produced non-finite values.
    #[error("numerical domain error: {0}")]
    Numerical(String),

    /// Run configuration is malformed (unknown key, bad value, missing
    /// required key).
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a NaN or otherwise had to abort.
    #[error("training aborted: {0}")]
    Training(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn format(source_name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { source_name: source_name.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
