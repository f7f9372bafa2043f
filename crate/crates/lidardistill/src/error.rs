//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: I/O and
//! format problems are bad input (exit 2), semantic validation failures
//! are exit 1, everything unexpected is internal (exit 3).

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Unparseable or malformed file contents (bad magic, bad header, ...).
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// File ended before the payload promised by its header.
    #[error("truncated file {path}: {reason}")]
    Truncated { path: PathBuf, reason: String },

    /// Bad configuration (missing key, out-of-range hyperparameter, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A value violates a domain invariant (non-finite coordinate,
    /// non-orthonormal rotation, mismatched fingerprint, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Shape or dimension mismatch between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    pub fn truncated(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Truncated { path: path.into(), reason: reason.into() }
    }
}
