use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-parsable category used as the CLI error prefix.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::DimensionMismatch { .. } | Error::Config(_) => ErrorKind::Config,
            Error::InvalidArgument(_) | Error::EmptyBatch => ErrorKind::InvalidArgument,
            Error::Parameter(_) => ErrorKind::Parameter,
            Error::Infeasible(_) => ErrorKind::Infeasible,
            Error::TooLarge(_) => ErrorKind::TooLarge,
            Error::Format(_) => ErrorKind::Format,
            Error::Io(_) => ErrorKind::Io,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    InvalidArgument,
    Parameter,
    Infeasible,
    TooLarge,
    Format,
    Io,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorKind::Config => "config",
            ErrorKind::InvalidArgument => "invalid-argument",
            ErrorKind::Parameter => "parameter",
            ErrorKind::Infeasible => "infeasible",
            ErrorKind::TooLarge => "too-large",
            ErrorKind::Format => "format",
            ErrorKind::Io => "io",
        };
        f.write_str(s)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
