use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with inputs violating its precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("parse error in {source_name} line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    /// The provider answered but the payload was not the JSON we asked for.
    #[error("provider returned malformed JSON: {message}")]
    MalformedJson { message: String, raw: String },

    /// Transport or server failure. `retryable` failures were retried before
    /// being surfaced.
    #[error("provider error after {attempts} attempt(s): {message}")]
    Provider {
        message: String,
        attempts: u32,
        retryable: bool,
    },

    #[error("extraction error: {0}")]
    Extraction(String),

    #[error("classification error for post {post_id}: {message}")]
    Classification { post_id: String, message: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("synthesis error: {0}")]
    Synthesis(String),

    #[error("grounding error: reference not found in any provided snippet: {0:?}")]
    Grounding(String),

    #[error("synthesis exhausted after {} attempt(s) for topic {topic}", transcript.len())]
    SynthesisExhausted {
        topic: String,
        transcript: Vec<String>,
    },

    #[error("retrieval error: {0}")]
    Retrieval(String),

    #[error("judge error: {0}")]
    Judge(String),

    #[error("undefined alpha: {0}")]
    UndefinedAlpha(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for transport-level failures (as opposed to bad data).
    pub fn is_provider(&self) -> bool {
        matches!(self, Error::Provider { .. })
    }
}
