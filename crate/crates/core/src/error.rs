use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes disagree; `detail` names the offending axes.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's input contract.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("pixel ({row}, {col}) is not covered by any patch")]
    Coverage { row: usize, col: usize },

    #[error("data error at {path}: {detail}")]
    Data { path: PathBuf, detail: String },

    #[error("invalid value: {0}")]
    Validation(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Data { path: path.into(), detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Contract { .. } | Error::Dimension { .. } => 2,
            Error::Data { .. }
            | Error::Io { .. }
            | Error::Validation(_)
            | Error::Checkpoint(_)
            | Error::Coverage { .. } => 3,
            Error::NonFinite { .. } => 4,
        }
    }
}
