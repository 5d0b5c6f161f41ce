use thiserror::Error;

/// Validation failures for domain values and configuration.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("{field} out of range: {detail}")]
    OutOfRange { field: &'static str, detail: String },
    #[error("invalid user id {0:?}: use ASCII letters, digits, '-', '_' or '.'")]
    InvalidUserId(String),
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),
    #[error("invalid timestamp {0:?}")]
    InvalidTimestamp(String),
}

/// Errors raised by the LLM gateway and its backends.
#[derive(Debug, Clone, Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("no scripted rule matched role {role} (prompt digest {digest})")]
    Scripting { role: String, digest: String },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("giving up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<LlmError> },
}

impl LlmError {
    /// Whether a retry may succeed.
    pub fn is_retriable(&self) -> bool {
        match self {
            LlmError::Transport(_) | LlmError::Timeout => true,
            LlmError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    /// True when the backend could not be reached at all (after retries).
    pub fn is_unavailable(&self) -> bool {
        match self {
            LlmError::Exhausted { last, .. } => last.is_retriable(),
            other => other.is_retriable(),
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("dimension mismatch: store holds {expected}-dimensional vectors, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("unknown episode {0}")]
    UnknownEpisode(String),
    #[error(transparent)]
    Invalid(#[from] ModelError),
    #[error("journal write failed: {0}")]
    Journal(#[from] PersistError),
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("undefined similarity for zero vector")]
    ZeroVector,
}

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported format version {found} in {path} (supported: {supported})")]
    UnsupportedVersion {
        path: String,
        found: u32,
        supported: u32,
    },
    #[error("{path}:{line}: malformed record: {detail}")]
    Malformed {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("duplicate id {0} rejected")]
    DuplicateId(String),
    #[error("serialization failed: {0}")]
    Serialize(String),
}

/// Top-level failures surfaced by the engine.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error("drain timed out; stuck cycles: {}", stuck.join(", "))]
    DrainTimeout { stuck: Vec<String> },
}

impl EngineError {
    pub fn is_provider_unavailable(&self) -> bool {
        match self {
            EngineError::Llm(e) => e.is_unavailable(),
            _ => false,
        }
    }
}
