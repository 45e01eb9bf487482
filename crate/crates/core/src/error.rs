//! Crate-wide error type.

use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("instance is not in the support of the discrete world")]
    OutOfSupport,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    TrainingDivergence(String),

    #[error("parse error in {source_name} at line {line}, column {column}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("support of size {size} exceeds enumeration limit {limit}")]
    SupportTooLarge { size: usize, limit: usize },

    #[error("incompatible runs: {0}")]
    Incompatible(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(source_name: &str, err: &serde_json::Error) -> Self {
        Error::Parse {
            source_name: source_name.to_string(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    /// Process exit code for the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::TrainingDivergence(_) => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
