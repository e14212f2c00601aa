use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, channel counts or geometry that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data that violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt weights: {0}")]
    CorruptWeights(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("dimension mismatch for {name:?}: expected {expected:?}, found {found:?}")]
    DimMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short stable identifier, used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Usage(_) => "usage",
            Error::NonFinite { .. } => "non_finite",
            Error::Format(_) => "format",
            Error::CorruptWeights(_) => "corrupt_weights",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnknownTensor(_) => "unknown_tensor",
            Error::MissingTensor(_) => "missing_tensor",
            Error::DimMismatch { .. } => "dim_mismatch",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use input_err;
