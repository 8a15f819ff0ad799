use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// An exact computation would exceed the supported state-space size.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A training or run configuration is inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data (dataset files, graph files) is malformed.
    #[error("data error in {path}: {msg}")]
    Data { path: PathBuf, msg: String },

    /// A syntax or semantic error in a text format, with a 1-based position.
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub(crate) fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// A short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Param(_) => "param",
            Error::Capacity(_) => "capacity",
            Error::Config(_) => "config",
            Error::Data { .. } => "data",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
