use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label value {value} out of range for {classes} classes")]
    LabelOutOfRange { value: usize, classes: usize },

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("unknown format version {found} in {path} (supported: {supported})")]
    UnknownVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("payload size mismatch in {path}: expected {expected} bytes, found {found}")]
    PayloadSize {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step}: {components}")]
    Divergence { step: u64, components: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
