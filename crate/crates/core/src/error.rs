use thiserror::Error;

/// Errors raised by the clustering library.
#[derive(Debug, Error)]
pub enum SecuError {
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("degenerate vector: norm {norm:e} is at or below the normalization threshold")]
    DegenerateVector { norm: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("activation tape does not match the current encoder parameters")]
    StaleTape,

    #[error("inconsistent assignment state: {0}")]
    Inconsistent(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SecuError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(SecuError::Shape(msg.into()))
}
