use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("position ({row}, {col}) outside a {height}x{width} map")]
    OutOfRange {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("state space of {states} labelings exceeds the enumeration limit of {limit}")]
    StateSpaceTooLarge { states: f64, limit: usize },

    #[error("no labeled factors to evaluate")]
    EmptyLoss,

    #[error("no labeled pixels to evaluate")]
    EmptyEvaluation,

    #[error("loss function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("missing learning rate for parameter group `{0}`")]
    MissingGroupRate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }
}
