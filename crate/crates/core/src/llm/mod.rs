//! Uniform access to chat-completion and embedding backends.
//!
//! [`Gateway`] wraps a [`ChatBackend`] and an [`EmbeddingBackend`] with the
//! retry policy and an inspectable call log. Two backend families exist: the
//! deterministic [`scripted`] backend used for tests and replays, and the
//! OpenAI-compatible HTTP backend in [`openai`].

use std::fmt;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::LlmError;
use crate::model::Embedding;

pub mod extract;
pub mod openai;
pub mod scripted;

pub use extract::{extract_json_array, extract_json_object};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    BoundaryDetector,
    EpisodeGenerator,
    EpisodePredictor,
    KnowledgeDistiller,
    Answerer,
    Judge,
}

impl RoleTag {
    pub const ALL: [RoleTag; 6] = [
        RoleTag::BoundaryDetector,
        RoleTag::EpisodeGenerator,
        RoleTag::EpisodePredictor,
        RoleTag::KnowledgeDistiller,
        RoleTag::Answerer,
        RoleTag::Judge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleTag::BoundaryDetector => "boundary_detector",
            RoleTag::EpisodeGenerator => "episode_generator",
            RoleTag::EpisodePredictor => "episode_predictor",
            RoleTag::KnowledgeDistiller => "knowledge_distiller",
            RoleTag::Answerer => "answerer",
            RoleTag::Judge => "judge",
        }
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Output shape the caller expects. Advisory: call sites still parse
/// defensively with the balanced-extraction helpers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseFormat {
    FreeText,
    JsonObject,
    JsonArray,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub role_tag: RoleTag,
    pub system_prompt: String,
    pub user_prompt: String,
    pub response_format: ResponseFormat,
}

impl ChatRequest {
    pub fn new(
        role_tag: RoleTag,
        system_prompt: impl Into<String>,
        user_prompt: impl Into<String>,
        response_format: ResponseFormat,
    ) -> Self {
        Self {
            role_tag,
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            response_format,
        }
    }

    pub fn digest(&self) -> String {
        digest(&format!("{}\n{}", self.system_prompt, self.user_prompt))
    }
}

/// Short hex digest used in call logs and error messages.
pub fn digest(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String, LlmError>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>, LlmError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// Same attempt budget with no sleeping between attempts.
    pub fn immediate() -> Self {
        Self {
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
            ..Self::default()
        }
    }

    fn delay_before(&self, attempt: u32) -> Duration {
        // attempt is 1-based; no delay before the first
        if attempt <= 1 {
            return Duration::ZERO;
        }
        let factor = 1u32 << (attempt - 2).min(16);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Chat,
    Embed,
}

/// One outbound attempt as seen by the gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub seq: u64,
    pub kind: CallKind,
    pub role_tag: Option<RoleTag>,
    pub attempt: u32,
    pub prompt_digest: String,
    pub response_digest: Option<String>,
    pub error: Option<String>,
    /// Full prompt text, kept only when prompt capture is enabled.
    pub prompt: Option<String>,
    pub response: Option<String>,
}

#[derive(Debug)]
struct CallLogInner {
    next_seq: u64,
    records: Vec<CallRecord>,
}

#[derive(Debug)]
pub struct CallLog {
    capture_text: bool,
    capacity: usize,
    inner: Mutex<CallLogInner>,
}

impl CallLog {
    pub fn new(capture_text: bool, capacity: usize) -> Self {
        Self {
            capture_text,
            capacity,
            inner: Mutex::new(CallLogInner {
                next_seq: 0,
                records: Vec::new(),
            }),
        }
    }

    fn push(&self, mut record: CallRecord) {
        let mut inner = self.inner.lock().expect("call log poisoned");
        inner.next_seq += 1;
        record.seq = inner.next_seq;
        if !self.capture_text {
            record.prompt = None;
            record.response = None;
        }
        if inner.records.len() >= self.capacity {
            let excess = inner.records.len() + 1 - self.capacity;
            inner.records.drain(..excess);
        }
        inner.records.push(record);
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.inner
            .lock()
            .expect("call log poisoned")
            .records
            .clone()
    }

    pub fn for_role(&self, role: RoleTag) -> Vec<CallRecord> {
        self.records()
            .into_iter()
            .filter(|r| r.role_tag == Some(role))
            .collect()
    }

    pub fn clear(&self) {
        self.inner
            .lock()
            .expect("call log poisoned")
            .records
            .clear();
    }
}

pub struct Gateway {
    chat: Arc<dyn ChatBackend>,
    embedder: Arc<dyn EmbeddingBackend>,
    retry: RetryPolicy,
    log: CallLog,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(chat: Arc<dyn ChatBackend>, embedder: Arc<dyn EmbeddingBackend>) -> Self {
        Self {
            chat,
            embedder,
            retry: RetryPolicy::default(),
            log: CallLog::new(false, 10_000),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_call_log(mut self, log: CallLog) -> Self {
        self.log = log;
        self
    }

    pub fn call_log(&self) -> &CallLog {
        &self.log
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<String, LlmError> {
        if req.system_prompt.trim().is_empty() || req.user_prompt.trim().is_empty() {
            return Err(LlmError::Precondition("prompts must not be empty".into()));
        }
        let prompt_digest = req.digest();
        let prompt_text = format!("{}\n\n{}", req.system_prompt, req.user_prompt);
        self.with_retries(|attempt| {
            let result = self.chat.complete(req);
            self.log.push(CallRecord {
                seq: 0,
                kind: CallKind::Chat,
                role_tag: Some(req.role_tag),
                attempt,
                prompt_digest: prompt_digest.clone(),
                response_digest: result.as_ref().ok().map(|r| digest(r)),
                error: result.as_ref().err().map(|e| e.to_string()),
                prompt: Some(prompt_text.clone()),
                response: result.as_ref().ok().cloned(),
            });
            result
        })
    }

    pub fn embed(&self, text: &str) -> Result<Embedding, LlmError> {
        if text.trim().is_empty() {
            return Err(LlmError::Precondition(
                "embedding text must not be empty".into(),
            ));
        }
        let prompt_digest = digest(text);
        let values = self.with_retries(|attempt| {
            let result = self.embedder.embed(text);
            self.log.push(CallRecord {
                seq: 0,
                kind: CallKind::Embed,
                role_tag: None,
                attempt,
                prompt_digest: prompt_digest.clone(),
                response_digest: result.as_ref().ok().map(|v| {
                    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                    digest(&String::from_utf8_lossy(&bytes))
                }),
                error: result.as_ref().err().map(|e| e.to_string()),
                prompt: Some(text.to_string()),
                response: None,
            });
            result
        })?;
        Embedding::new(values).map_err(|e| LlmError::InvalidResponse(e.to_string()))
    }

    fn with_retries<T>(
        &self,
        mut call: impl FnMut(u32) -> Result<T, LlmError>,
    ) -> Result<T, LlmError> {
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            let delay = self.retry.delay_before(attempt);
            if !delay.is_zero() {
                thread::sleep(delay);
            }
            match call(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retriable() && attempt < max => {
                    tracing::debug!(attempt, error = %e, "retrying llm call");
                    attempt += 1;
                }
                Err(e) if e.is_retriable() && max > 1 => {
                    return Err(LlmError::Exhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}
