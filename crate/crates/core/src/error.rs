use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the engine. Each variant maps onto one failure class of
/// the command-line exit-code contract (see [`DiceError::exit_code`]).
#[derive(Debug, Error)]
pub enum DiceError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training error: {0}")]
    Training(String),
}

pub type Result<T> = std::result::Result<T, DiceError>;

impl DiceError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DiceError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for bad flags or configuration, 3 for bundle
    /// (input) errors, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            DiceError::Config(_) | DiceError::Domain(_) => 2,
            DiceError::Io { .. }
            | DiceError::Format(_)
            | DiceError::Data(_)
            | DiceError::Shape(_) => 3,
            DiceError::Numerical(_) | DiceError::Training(_) => 4,
        }
    }
}
