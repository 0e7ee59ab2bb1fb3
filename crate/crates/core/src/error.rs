use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layout: {0}")]
    Layout(#[from] crate::layout::LayoutError),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("token id {0} is outside the vocabulary")]
    TokenId(usize),

    #[error("weights file {path}: {reason}")]
    Weights { path: PathBuf, reason: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("scene sampling exhausted {0} rejection attempts")]
    RejectionBudget(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(String),
}

impl Error {
    /// Errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Layout(_)
                | Error::Invalid(_)
                | Error::UnknownToken(_)
                | Error::TokenId(_)
                | Error::Config(_)
                | Error::Json(_)
                | Error::Shape(_)
        )
    }
}
