//! Error type shared across the crate.

use std::fmt;

/// Unified error for tensor ops, data ingestion, configuration, and training.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape mismatch; names the operation and both shapes.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Invalid configuration value.
    Config(String),
    /// Invalid caller-supplied input (bad label, missing modality, unknown id ...).
    Input(String),
    /// A contract the caller must uphold was violated (non-scalar loss, empty positives ...).
    Contract(String),
    /// Malformed on-disk data (bad magic, truncated payload, dim mismatch).
    Decode(String),
    /// Filesystem failure, annotated with the path involved.
    Io { path: String, source: std::io::Error },
    /// Internal failure: a state the pipeline itself should never reach.
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Decode(msg) => write!(f, "decode error: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::Internal(msg) => write!(f, "internal error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
