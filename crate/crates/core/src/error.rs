use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label {value} at index {index}: labels must be 0 or 1")]
    InvalidLabel { index: usize, value: u8 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("class {class} has invalid count {count}")]
    InvalidCount { class: usize, count: usize },

    #[error("class {class} is present in all {total} samples; logit bias is infinite")]
    InfiniteBias { class: usize, total: usize },

    #[error("degenerate embedding for class {class}: pooled prompt projects to the zero vector")]
    DegenerateEmbedding { class: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("average precision is undefined without positive labels")]
    UndefinedAp,

    #[error("invalid schedule step {step} for {total} epochs")]
    InvalidStep { step: usize, total: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("refusing to overwrite {0} (pass --force)")]
    OutputExists(PathBuf),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 validation, 2 numerical failure.
    /// Gradient-check failures are reported by the caller with code 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::DegenerateEmbedding { .. } => 2,
            _ => 1,
        }
    }
}
