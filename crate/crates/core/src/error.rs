use std::path::PathBuf;
use thiserror::Error;

/// Error variants shared across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A precondition on argument values was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity appeared where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Instance exceeds what the exact solver supports.
    #[error("instance too large for exact solver: {0}")]
    UnsupportedSize(String),

    /// An operation was called on state it cannot work with.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Batch statistics collapsed below the usable floor.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// Input file failed to parse; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Configuration file or preset problem.
    #[error("config error: {0}")]
    Config(String),

    /// Training or solving produced a non-finite quantity.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code convention: 1 for input validation, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DimensionMismatch(_)
            | Error::InvalidArgument(_)
            | Error::NonFinite(_)
            | Error::UnsupportedSize(_)
            | Error::InvalidState(_)
            | Error::DegenerateBatch(_)
            | Error::Parse { .. }
            | Error::Config(_) => 1,
            Error::Numerical(_) | Error::Io { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
