use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid configuration:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<crate::config::Violation>),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: missing field {field} at line {line}")]
    MissingField {
        path: PathBuf,
        field: String,
        line: usize,
    },

    #[error("{path}: corrupt file at byte offset {offset}: {message}")]
    Corrupt {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("cache invalid: {0}")]
    CacheInvalid(String),

    #[error("transport error: {message}")]
    Transport { message: String, retryable: bool },

    #[error("could not parse oracle response: {message} (raw: {raw:?})")]
    OracleParse { message: String, raw: String },

    #[error("unknown sequence id {0:?}")]
    UnknownId(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {breakdown}")]
    NonFinite {
        epoch: usize,
        step: usize,
        breakdown: String,
    },

    #[error("missing artifact {artifact}: run {stage} first")]
    MissingArtifact { artifact: String, stage: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit status for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) => 1,
            Error::MissingArtifact { .. } => 2,
            Error::Transport { .. } | Error::OracleParse { .. } => 3,
            _ => 4,
        }
    }
}
