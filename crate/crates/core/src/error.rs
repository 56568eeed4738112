use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("vector is not on the probability simplex (sum {sum}, min {min})")]
    NotOnSimplex { sum: f64, min: f64 },

    #[error("token id {id} outside vocabulary of size {size}")]
    UnknownToken { id: usize, size: usize },

    #[error("non-finite loss at perturbed parameter index {index}")]
    GradCheck { index: usize },

    #[error("training diverged at stage {stage}, epoch {epoch}")]
    Diverged { stage: u8, epoch: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimMismatch {
            context,
            expected,
            actual,
        })
    }
}
