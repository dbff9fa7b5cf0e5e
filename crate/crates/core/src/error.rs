use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: missing or invalid field `{field}`")]
    Schema { line: usize, field: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("input is empty")]
    EmptyInput,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("non-finite value in {component}: {value}")]
    NonFinite { component: String, value: f64 },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("checkpoint checksum mismatch in {}", path.display())]
    Checksum { path: PathBuf },

    #[error("incompatible checkpoint format: found `{found}`, expected `{expected}`")]
    Incompatible { found: String, expected: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Incompatible { .. } => ErrorKind::Config,
            Error::Parse { .. }
            | Error::Schema { .. }
            | Error::Validation(_)
            | Error::EmptyInput
            | Error::Sampling(_)
            | Error::Evaluation(_)
            | Error::Checksum { .. } => ErrorKind::Data,
            Error::Contract(_) | Error::DegenerateVector(_) | Error::NonFinite { .. } => {
                ErrorKind::Numeric
            }
            Error::Io { .. } => ErrorKind::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
