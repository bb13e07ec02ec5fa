//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by any operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/vector dimensions do not line up.
    #[error("shape mismatch: {context} (left {left:?}, right {right:?})")]
    Shape {
        context: String,
        left: (usize, usize),
        right: (usize, usize),
    },

    /// A scalar hyperparameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Schema/configuration problems (missing column, bad stage, bad file).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data, with the offending 1-based row number when known.
    #[error("data error at row {row}: {message}")]
    Data { row: usize, message: String },

    /// A checkpoint was built against a different vocabulary than the data.
    #[error("vocabulary mismatch: checkpoint hash {expected} != dataset hash {actual}")]
    VocabMismatch { expected: String, actual: String },

    /// Metric is undefined for the given input (e.g. single-class AUC).
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// A function handed to the gradient checker produced a non-finite value.
    #[error("non-finite evaluation: {0}")]
    NonFinite(String),

    /// Internal consistency violation (index out of range, tape mismatch).
    #[error("internal error: {0}")]
    Internal(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            context: context.into(),
            left,
            right,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
