use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
///
/// Variants follow the failure classes the pipelines distinguish: bad
/// shapes, bad indices, bad orders, invalid parameters, broken state
/// between cache and model, and file-format problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for size {bound} in {context}")]
    Index {
        context: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("position ({row}, {col}) outside {rows}x{cols} grid")]
    Position {
        row: isize,
        col: isize,
        rows: usize,
        cols: usize,
    },

    #[error("invalid order: {0}")]
    Order(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("state error: {0}")]
    State(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Parameter(_) | Error::Format { .. } | Error::Io { .. } | Error::Order(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
