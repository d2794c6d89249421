use thiserror::Error;

use crate::corpus::CorpusError;
use crate::numerics::NumericError;

/// Errors raised by the learned components and the training loop.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("token id {id} outside the closed vocabulary of {vocab}")]
    Vocabulary { id: usize, vocab: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {what}: {value}")]
    NonFinite { what: String, value: f64 },
}
