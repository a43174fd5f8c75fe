//! Error type shared across the crate, with stable process exit codes for
//! the CLI (documented in `--help`).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad hyperparameters, divisibility violations,
    /// malformed config files.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape disagreement, reported with both shapes.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Filesystem problems: missing files, unwritable paths.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents violate the expected format.
    #[error("data error in {file}: {detail}")]
    Data { file: String, detail: String },

    /// Checkpoint incompatible with the requested configuration.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// Non-finite values encountered during numeric computation.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: String, detail: String },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(file: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Data {
            file: file.into(),
            detail: detail.into(),
        }
    }

    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ShapeMismatch { .. } => 2,
            Error::Io { .. } => 3,
            Error::Data { .. } => 4,
            Error::CheckpointMismatch(_) => 5,
            Error::Numeric { .. } => 6,
        }
    }
}
