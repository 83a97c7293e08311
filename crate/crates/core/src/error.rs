use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid table {name:?}: {}", violations.join("; "))]
    InvalidTable { name: String, violations: Vec<String> },

    #[error("table {0:?} has no cells to mask")]
    EmptyTable(String),

    #[error("relation pair ({i}, {j}) invalid for {tables} tables")]
    InvalidRelation { i: usize, j: usize, tables: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("oracle fault: {0}")]
    Oracle(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error(
        "input length {len} exceeds max sequence length {max}; over-length records must be \
         rejected at data load, inputs are never truncated"
    )]
    TooLong { len: usize, max: usize },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("objective term {0} is enabled but its inputs are missing")]
    MissingTerm(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("non-finite {what} at step {step}: {detail}")]
    NonFinite { what: String, step: usize, detail: String },

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from bad input data or validation (as opposed
    /// to a usage or internal fault).
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_))
    }
}
