//! Shared domain types: messages, buffers, episodes, facts, configuration,
//! identifiers and clocks.

use std::collections::HashMap;
use std::fmt;
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::ModelError;

/// Version written into every log header and the manifest.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::User => f.write_str("user"),
            Role::Assistant => f.write_str("assistant"),
        }
    }
}

/// One conversational turn.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawMessage")]
pub struct Message {
    pub role: Role,
    pub content: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Deserialize)]
struct RawMessage {
    role: Role,
    content: String,
    timestamp: DateTime<Utc>,
}

impl TryFrom<RawMessage> for Message {
    type Error = ModelError;

    fn try_from(raw: RawMessage) -> Result<Self, Self::Error> {
        Message::new(raw.role, raw.content, raw.timestamp)
    }
}

impl Message {
    pub fn new(
        role: Role,
        content: impl Into<String>,
        timestamp: DateTime<Utc>,
    ) -> Result<Self, ModelError> {
        let content = content.into();
        if content.trim().is_empty() {
            return Err(ModelError::Empty("content"));
        }
        Ok(Self {
            role,
            content,
            timestamp,
        })
    }

    /// Single-line transcript rendering used in prompts and context blocks.
    pub fn render_line(&self) -> String {
        format!(
            "[{}] {}: {}",
            self.timestamp
                .to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            self.role,
            self.content.trim()
        )
    }
}

/// Parses an ISO-8601 timestamp with offset and normalises it to UTC.
pub fn parse_timestamp(text: &str) -> Result<DateTime<Utc>, ModelError> {
    DateTime::parse_from_rfc3339(text.trim())
        .map(|t| t.with_timezone(&Utc))
        .map_err(|_| ModelError::InvalidTimestamp(text.to_string()))
}

pub fn render_transcript(messages: &[Message]) -> String {
    messages
        .iter()
        .map(Message::render_line)
        .collect::<Vec<_>>()
        .join("\n")
}

/// User identifier. Restricted to a filesystem-safe alphabet because it names
/// the per-user directory in the on-disk layout.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct UserId(String);

impl UserId {
    pub fn new(id: impl Into<String>) -> Result<Self, ModelError> {
        let id = id.into();
        let ok = !id.is_empty()
            && id.len() <= 128
            && id != "."
            && id != ".."
            && id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
        if ok {
            Ok(Self(id))
        } else {
            Err(ModelError::InvalidUserId(id))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for UserId {
    type Error = ModelError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        UserId::new(value)
    }
}

impl From<UserId> for String {
    fn from(value: UserId) -> Self {
        value.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Pending messages for one user that have not yet been segmented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageBuffer {
    pub user_id: UserId,
    pub messages: Vec<Message>,
    pub created_at: DateTime<Utc>,
}

impl MessageBuffer {
    pub fn new(user_id: UserId, created_at: DateTime<Utc>) -> Self {
        Self {
            user_id,
            messages: Vec::new(),
            created_at,
        }
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDecision {
    pub is_boundary: bool,
    pub confidence: f64,
}

impl BoundaryDecision {
    pub const NONE: BoundaryDecision = BoundaryDecision {
        is_boundary: false,
        confidence: 0.0,
    };

    /// Builds a decision, clamping confidence into [0, 1]. The flag reports
    /// whether the raw value had to be altered (NaN maps to 0).
    pub fn clamped(is_boundary: bool, confidence: f64) -> (Self, bool) {
        let fixed = if confidence.is_nan() {
            0.0
        } else {
            confidence.clamp(0.0, 1.0)
        };
        let altered = fixed != confidence || confidence.is_nan();
        (
            Self {
                is_boundary,
                confidence: fixed,
            },
            altered,
        )
    }
}

/// Dense embedding vector. Serialized as base64 of little-endian `f32`s so
/// that a reload reproduces every bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self, ModelError> {
        if values.is_empty() {
            return Err(ModelError::InvalidEmbedding("empty vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidEmbedding("non-finite component".into()));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(ModelError::InvalidEmbedding("zero vector".into()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_base64(&self) -> String {
        let mut bytes = Vec::with_capacity(self.0.len() * 4);
        for v in &self.0 {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        BASE64.encode(bytes)
    }

    pub fn from_base64(text: &str) -> Result<Self, ModelError> {
        let bytes = BASE64
            .decode(text)
            .map_err(|e| ModelError::InvalidEmbedding(e.to_string()))?;
        if bytes.len() % 4 != 0 {
            return Err(ModelError::InvalidEmbedding(
                "byte length not a multiple of 4".into(),
            ));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Embedding::new(values)
    }
}

impl Serialize for Embedding {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_base64())
    }
}

impl<'de> Deserialize<'de> for Embedding {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Embedding::from_base64(&text).map_err(serde::de::Error::custom)
    }
}

/// Joins a title and body into the text that gets embedded for an episode.
pub fn join_title_body(title: &str, body: &str) -> String {
    format!("{title}\n{body}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSpan {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub user_id: UserId,
    pub title: String,
    pub narrative: String,
    pub source_messages: Vec<Message>,
    pub embedding: Embedding,
    pub time_span: TimeSpan,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
}

impl Episode {
    pub fn new(
        id: String,
        user_id: UserId,
        title: String,
        narrative: String,
        source_messages: Vec<Message>,
        embedding: Embedding,
        created_at: DateTime<Utc>,
    ) -> Result<Self, ModelError> {
        let (Some(first), Some(last)) = (source_messages.first(), source_messages.last()) else {
            return Err(ModelError::Empty("source_messages"));
        };
        let time_span = TimeSpan {
            start: first.timestamp,
            end: last.timestamp,
        };
        let episode = Self {
            id,
            user_id,
            title,
            narrative,
            source_messages,
            embedding,
            time_span,
            created_at,
            degraded: false,
        };
        episode.validate()?;
        Ok(episode)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.id.is_empty() {
            return Err(ModelError::Empty("id"));
        }
        if self.title.trim().is_empty() {
            return Err(ModelError::Empty("title"));
        }
        if self.narrative.trim().is_empty() {
            return Err(ModelError::Empty("narrative"));
        }
        let (Some(first), Some(last)) = (self.source_messages.first(), self.source_messages.last())
        else {
            return Err(ModelError::Empty("source_messages"));
        };
        if self.time_span.start != first.timestamp || self.time_span.end != last.timestamp {
            return Err(ModelError::OutOfRange {
                field: "time_span",
                detail: "does not match first/last source message".into(),
            });
        }
        Ok(())
    }

    /// Text used for the stored embedding (title, newline, narrative).
    pub fn embedding_text(&self) -> String {
        join_title_body(&self.title, &self.narrative)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticFact {
    pub id: String,
    pub user_id: UserId,
    pub statement: String,
    pub embedding: Embedding,
    pub source_episode_id: String,
    pub created_at: DateTime<Utc>,
}

impl SemanticFact {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.id.is_empty() {
            return Err(ModelError::Empty("id"));
        }
        if self.statement.trim().is_empty() {
            return Err(ModelError::Empty("statement"));
        }
        if self.source_episode_id.is_empty() {
            return Err(ModelError::Empty("source_episode_id"));
        }
        Ok(())
    }
}

/// Common view over anything kept in a vector store.
pub trait MemoryItem: Clone + Send + Sync + 'static {
    const KIND: ItemKind;
    fn id(&self) -> &str;
    fn user_id(&self) -> &UserId;
    fn created_at(&self) -> DateTime<Utc>;
    fn embedding(&self) -> &Embedding;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Episode,
    Fact,
}

impl MemoryItem for Episode {
    const KIND: ItemKind = ItemKind::Episode;
    fn id(&self) -> &str {
        &self.id
    }
    fn user_id(&self) -> &UserId {
        &self.user_id
    }
    fn created_at(&self) -> DateTime<Utc> {
        self.created_at
    }
    fn embedding(&self) -> &Embedding {
        &self.embedding
    }
}

impl MemoryItem for SemanticFact {
    const KIND: ItemKind = ItemKind::Fact;
    fn id(&self) -> &str {
        &self.id
    }
    fn user_id(&self) -> &UserId {
        &self.user_id
    }
    fn created_at(&self) -> DateTime<Utc> {
        self.created_at
    }
    fn embedding(&self) -> &Embedding {
        &self.embedding
    }
}

/// Engine tuning knobs. Defaults reproduce the reference setup:
/// boundary threshold 0.7, buffer cap 25, similarity floor 0.0, k = 10
/// episodes, 2k facts, raw transcripts for the top 2 episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub boundary_confidence_threshold: f64,
    pub max_buffer_size: usize,
    pub similarity_threshold: f64,
    pub top_k_episodes: usize,
    pub semantic_multiplier: usize,
    pub raw_text_episode_count: usize,
    pub semantic_retrieval_limit_for_learning: usize,
    /// Estimated-token budget for the boundary detector prompt.
    pub detector_token_budget: usize,
    /// Messages kept verbatim when the detector prompt is over budget.
    pub detector_recent_messages: usize,
    pub episodic_retrieval: bool,
    pub semantic_retrieval: bool,
    /// Skip prediction and distill knowledge from the raw segment alone.
    pub direct_extraction: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            boundary_confidence_threshold: 0.7,
            max_buffer_size: 25,
            similarity_threshold: 0.0,
            top_k_episodes: 10,
            semantic_multiplier: 2,
            raw_text_episode_count: 2,
            semantic_retrieval_limit_for_learning: 20,
            detector_token_budget: 6000,
            detector_recent_messages: 15,
            episodic_retrieval: true,
            semantic_retrieval: true,
            direct_extraction: false,
        }
    }
}

impl EngineConfig {
    pub fn fact_limit(&self) -> usize {
        self.semantic_multiplier * self.top_k_episodes
    }

    pub fn validate(self) -> Result<Self, ModelError> {
        fn range(field: &'static str, ok: bool, detail: String) -> Result<(), ModelError> {
            if ok {
                Ok(())
            } else {
                Err(ModelError::OutOfRange { field, detail })
            }
        }
        let b = self.boundary_confidence_threshold;
        range(
            "boundary_confidence_threshold",
            (0.0..=1.0).contains(&b),
            format!("{b} not in [0, 1]"),
        )?;
        let s = self.similarity_threshold;
        range(
            "similarity_threshold",
            (-1.0..=1.0).contains(&s),
            format!("{s} not in [-1, 1]"),
        )?;
        range(
            "max_buffer_size",
            self.max_buffer_size > 0,
            "must be positive".into(),
        )?;
        range(
            "top_k_episodes",
            self.top_k_episodes > 0,
            "must be positive".into(),
        )?;
        range(
            "semantic_multiplier",
            self.semantic_multiplier > 0,
            "must be positive".into(),
        )?;
        range(
            "semantic_retrieval_limit_for_learning",
            self.semantic_retrieval_limit_for_learning > 0,
            "must be positive".into(),
        )?;
        range(
            "raw_text_episode_count",
            self.raw_text_episode_count <= self.top_k_episodes,
            format!(
                "{} exceeds top_k_episodes {}",
                self.raw_text_episode_count, self.top_k_episodes
            ),
        )?;
        range(
            "detector_recent_messages",
            self.detector_recent_messages > 0,
            "must be positive".into(),
        )?;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IdKind {
    Episode,
    Fact,
}

impl IdKind {
    fn prefix(self) -> &'static str {
        match self {
            IdKind::Episode => "ep",
            IdKind::Fact => "fact",
        }
    }
}

/// Identifier source. `Sequential` yields `ep-000001`, `ep-000002`, ... per
/// kind and is used for replayable runs; `Random` yields UUID-based ids.
#[derive(Debug)]
pub enum IdGenerator {
    Sequential(Mutex<HashMap<IdKind, u64>>),
    Random,
}

impl IdGenerator {
    pub fn sequential() -> Self {
        IdGenerator::Sequential(Mutex::new(HashMap::new()))
    }

    pub fn random() -> Self {
        IdGenerator::Random
    }

    pub fn next(&self, kind: IdKind) -> String {
        match self {
            IdGenerator::Sequential(counters) => {
                let mut counters = counters.lock().expect("id counter poisoned");
                let n = counters.entry(kind).or_insert(0);
                *n += 1;
                format!("{}-{:06}", kind.prefix(), *n)
            }
            IdGenerator::Random => format!("{}-{}", kind.prefix(), uuid::Uuid::new_v4().simple()),
        }
    }

    /// Moves the sequential counter past an id seen on reload.
    pub fn observe(&self, kind: IdKind, id: &str) {
        if let IdGenerator::Sequential(counters) = self {
            let parsed = id
                .strip_prefix(kind.prefix())
                .and_then(|rest| rest.strip_prefix('-'))
                .and_then(|n| n.parse::<u64>().ok());
            if let Some(n) = parsed {
                let mut counters = counters.lock().expect("id counter poisoned");
                let current = counters.entry(kind).or_insert(0);
                *current = (*current).max(n);
            }
        }
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Always reports the same instant; keeps replay output byte-stable.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}
