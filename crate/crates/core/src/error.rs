use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped so the command-line front end can map them onto
/// process exit codes (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid heading byte {0} (legal codes are 0, 1, 85, 170, 255)")]
    InvalidHeading(u8),
    #[error("invalid range: lo {lo} must be strictly below hi {hi}")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("coverage gap: {0}")]
    Coverage(String),
    #[error("out of bounds: {0}")]
    Bounds(String),
    #[error("state error: {0}")]
    State(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("registry error: {0}")]
    Registry(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 I/O, 3 data, 4 numeric, 1 for everything a caller
    /// could have fixed by passing different arguments.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format(_) | Error::Truncated { .. } | Error::NotFound(_) => 2,
            Error::InsufficientHistory(_) | Error::Data(_) | Error::InvalidHeading(_) => 3,
            Error::Numeric(_) => 4,
            Error::Registry(_) => 2,
            _ => 1,
        }
    }
}
