use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = QkgError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum QkgError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },

    #[error("triplet references unknown entity index {0}")]
    DanglingEntity(u64),

    #[error("unknown entity index {0}")]
    UnknownEntity(u64),

    #[error("unknown entity source id `{0}`")]
    UnknownSourceId(String),

    #[error("entity index {index} defined twice with conflicting records")]
    ConflictingEntity { index: u64 },

    #[error("relation `{0}` is not in the configured relation vocabulary")]
    UnknownRelation(String),

    #[error("search query is empty after normalization")]
    EmptyQuery,

    #[error("no JSON object found in response")]
    NoJsonObject,

    #[error("invalid JSON: {0}")]
    InvalidJson(String),

    #[error("validation failed for field `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("role `{0}` is not configured")]
    UnknownRole(String),

    #[error("llm request for role `{role}` failed after {attempts} attempt(s): {last_error}")]
    RetriesExhausted {
        role: String,
        attempts: u32,
        last_error: String,
    },

    #[error("mock backend has no script entry for fingerprint {0}")]
    MockMiss(String),

    #[error("cycle detected in concept hierarchy at `{0}`")]
    HierarchyCycle(String),

    #[error("{0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl QkgError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QkgError::Io {
            path: path.into(),
            source,
        }
    }
}
