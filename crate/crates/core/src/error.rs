use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure categories. The CLI maps each to a stable exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("bad magic bytes: not a {0} file")]
    Magic(&'static str),

    #[error("file truncated while reading {0}")]
    Truncated(String),

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value at frame {frame}")]
    NonFiniteFrame { frame: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-parseable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Version { .. } => "version",
            Error::Magic(_) => "format",
            Error::Truncated(_) => "truncated",
            Error::Checksum(_) => "checksum",
            Error::Format(_) => "format",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Invalid(_) => "invalid",
            Error::NonFiniteFrame { .. } | Error::Numerical(_) => "numerical",
            Error::Incompatible(_) => "incompatible",
        }
    }
}
