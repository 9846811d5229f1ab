use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file {path} (clip {clip})")]
    MissingFile { clip: String, path: PathBuf },

    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    ShapeMismatch { what: String, expected: String, found: String },

    #[error("unknown schema_version {found} (supported: {supported})")]
    UnknownSchema { found: u32, supported: u32 },

    #[error("checkpoint format_version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("duplicate tensor name {0}")]
    DuplicateTensor(String),

    #[error("missing parameter {0}")]
    MissingParameter(String),

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("unknown emotion label {found:?}; valid labels: {valid}")]
    UnknownEmotion { found: String, valid: String },

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("non-deterministic forward: {0}")]
    NonDeterministic(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error("parse error in {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Whether the failure stems from user input (bad config, bad files)
    /// rather than from a run going wrong.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MissingFile { .. }
                | Error::ShapeMismatch { .. }
                | Error::UnknownSchema { .. }
                | Error::VersionMismatch { .. }
                | Error::TruncatedPayload(_)
                | Error::DuplicateTensor(_)
                | Error::UnknownEmotion { .. }
                | Error::Incompatible(_)
                | Error::Config(_)
                | Error::Parse { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
