use std::io;

use thiserror::Error;

pub type Result<T, E = GapError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GapError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("row {row} is degenerate (norm {norm:e}); cannot normalize")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("alignment with lambda={lambda} collapses row {row} of the {modality} embeddings (norm {norm:e})")]
    DegenerateAlignment {
        row: usize,
        modality: &'static str,
        lambda: f64,
        norm: f64,
    },

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid parameter `{name}`: {message}")]
    Parameter { name: String, message: String },

    #[error("non-finite value at {context} index {index}")]
    NonFinite { context: String, index: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GapError {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        GapError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn parameter(name: impl Into<String>, message: impl Into<String>) -> Self {
        GapError::Parameter {
            name: name.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input or configuration, as opposed to
    /// failures that happen while computing on valid input.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            GapError::Format(_)
                | GapError::Validation { .. }
                | GapError::EmptySplit(_)
                | GapError::Parameter { .. }
                | GapError::Config(_)
                | GapError::Precondition(_)
        )
    }
}
