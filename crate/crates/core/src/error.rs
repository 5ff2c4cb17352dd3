use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value violates a documented invariant. `field` names the offending
    /// field (dotted path where it helps).
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    /// A file could not be decoded.
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown instance id {0}")]
    UnknownInstance(u64),

    /// Every entry of an attention row is masked; softmax is undefined.
    #[error("attention row {0} is fully masked")]
    DeadRow(usize),

    #[error("attention mask diagonal entry {0} is masked")]
    MaskedDiagonal(usize),

    #[error("timestep {t} outside 1..={steps}")]
    Timestep { t: usize, steps: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the CLI should report this as a usage/validation failure
    /// (as opposed to a failed property).
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::DeadRow(_) | Error::MaskedDiagonal(_))
    }
}
