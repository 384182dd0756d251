use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numerical error in term {term}: {detail}")]
    NonFiniteTerm { term: usize, detail: String },

    #[error("numerical error at step {step}: {detail}")]
    NonFiniteStep { step: usize, detail: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("instance rejected: {0}")]
    Rejected(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, printed on the last line of CLI failures
    /// and returned through the C ABI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "E_CONFIG",
            Error::Input(_) => "E_INPUT",
            Error::NonFiniteTerm { .. } | Error::NonFiniteStep { .. } => "E_NUMERICAL",
            Error::Diverged { .. } => "E_TRAINING",
            Error::Degenerate(_) => "E_DEGENERATE",
            Error::Corrupt { .. } => "E_CORRUPT",
            Error::Validation(_) => "E_VALIDATION",
            Error::Rejected(_) => "E_REJECTED",
            Error::Usage(_) => "E_USAGE",
            Error::Io { .. } => "E_IO",
            Error::Parse { .. } => "E_PARSE",
        }
    }

    pub fn exit_status(&self) -> i32 {
        match self {
            Error::Usage(_) => 64,
            Error::Config(_) => 78,
            Error::Io { .. } => 74,
            Error::Corrupt { .. } | Error::Parse { .. } | Error::Validation(_) => 65,
            Error::Input(_) | Error::Rejected(_) => 66,
            Error::NonFiniteTerm { .. }
            | Error::NonFiniteStep { .. }
            | Error::Diverged { .. }
            | Error::Degenerate(_) => 70,
        }
    }
}
