use thiserror::Error;

pub type Result<T> = std::result::Result<T, AmberError>;

#[derive(Debug, Error)]
pub enum AmberError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid votes: {0}")]
    InvalidVotes(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A malformed dataset record. `line` is 1-based.
    #[error("line {line}: {msg}")]
    Data { line: usize, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("report: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AmberError {
    /// Process exit code for this error class: 2 for data validation,
    /// 3 for numerical aborts, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            AmberError::Data { .. }
            | AmberError::Dataset(_)
            | AmberError::InvalidVotes(_)
            | AmberError::InvalidDistribution(_) => 2,
            AmberError::Numerical(_) => 3,
            _ => 1,
        }
    }
}
