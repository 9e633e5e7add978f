use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("malformed record at {path}:{line}: {reason}")]
    Record {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error(transparent)]
    Generation(#[from] GenerationError),

    #[error("{missing} not found; run `{stage}` first")]
    MissingStageInput {
        missing: PathBuf,
        stage: &'static str,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// A completion that could not be read back as a schema candidate.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse schema ({reason}): {raw:?}")]
pub struct ParseError {
    pub reason: &'static str,
    pub raw: String,
}

#[derive(Debug, Clone, Error)]
pub enum GenerationError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },

    #[error("endpoint returned an unusable body: {0}")]
    Protocol(String),

    #[error("replay store has no entry for prompt {hash} ({head:?})")]
    ReplayMiss { hash: String, head: String },
}
