use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("column {column} has no observed entries")]
    FullyMissingColumn { column: usize },

    #[error("column {column} has the wrong kind for this operation: {reason}")]
    ColumnKind { column: usize, reason: String },

    #[error("imputer must be fitted before transform")]
    NotFitted,

    #[error("masked cell read by a model that cannot handle missing values (row {row}, column {column})")]
    MaskedInput { row: usize, column: usize },

    #[error("csv: {0}")]
    Csv(String),

    #[error("parse error at line {line}, column '{column}': {message}")]
    Parse {
        line: usize,
        column: String,
        message: String,
    },

    #[error("undefined quantity: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
