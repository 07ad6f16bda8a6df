use thiserror::Error;

/// Errors raised by the laboratory library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A documented precondition of an operation was violated.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A token id or string is not part of the vocabulary.
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// A numeric argument lies outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent configuration (shapes, hyperparameters, vocabularies).
    #[error("configuration error: {0}")]
    Config(String),

    /// Self-supervised data generation produced nothing usable.
    #[error("data generation error: {0}")]
    DataGeneration(String),

    /// Optimization diverged.
    #[error("training error at step {step}: {reason}")]
    Training { step: usize, reason: String },

    /// Malformed input to a statistic or metric.
    #[error("input error: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, Error>;
