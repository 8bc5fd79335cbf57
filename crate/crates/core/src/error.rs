use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the seed localization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("could not place seed {seed} after {attempts} attempts")]
    Placement { seed: usize, attempts: usize },

    #[error("non-finite gradient in {layer}")]
    NonFiniteGradient { layer: String },

    #[error("training diverged at round {round}: loss is not finite")]
    Diverged { round: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by bad inputs or configuration rather than
    /// failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::SizeMismatch { .. }
                | Error::NonFinite { .. }
                | Error::UnsupportedVersion(_)
                | Error::Invalid(_)
                | Error::Shape(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
