//! Turns segmented conversations into titled third-person episodes and stores
//! them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, LlmError, StoreError};
use crate::llm::{extract_json_object, ChatRequest, Gateway, ResponseFormat, RoleTag};
use crate::model::{
    join_title_body, render_transcript, Clock, Episode, IdGenerator, IdKind, Message, Role, UserId,
};
use crate::prompts;
use crate::store::VectorStore;

const FALLBACK_TITLE_WORDS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeDraft {
    pub title: String,
    pub narrative: String,
    /// Built by the fallback path rather than the generator.
    #[serde(default)]
    pub degraded: bool,
}

impl EpisodeDraft {
    pub fn new(title: impl Into<String>, narrative: impl Into<String>) -> Option<Self> {
        let title = title.into().trim().to_string();
        let narrative = narrative.into().trim().to_string();
        if title.is_empty() || narrative.is_empty() {
            return None;
        }
        Some(Self {
            title,
            narrative,
            degraded: false,
        })
    }
}

pub fn parse_draft(text: &str) -> Option<EpisodeDraft> {
    let value = extract_json_object(text)?;
    EpisodeDraft::new(
        value.get("title")?.as_str()?,
        value.get("narrative")?.as_str()?,
    )
}

/// Draft used when the generator keeps returning unusable output: the first
/// words of the opening user message as title, the transcript as narrative.
pub fn fallback_draft(segment: &[Message]) -> EpisodeDraft {
    let opener = segment
        .iter()
        .find(|m| m.role == Role::User)
        .or(segment.first())
        .map(|m| m.content.as_str())
        .unwrap_or("Conversation");
    let title: Vec<&str> = opener
        .split_whitespace()
        .take(FALLBACK_TITLE_WORDS)
        .collect();
    let title = if title.is_empty() {
        "Conversation".to_string()
    } else {
        title.join(" ")
    };
    let narrative = render_transcript(segment);
    EpisodeDraft {
        title,
        narrative: if narrative.trim().is_empty() {
            "(empty conversation)".into()
        } else {
            narrative
        },
        degraded: true,
    }
}

/// Asks the generator for a title and narrative. Unparseable output is
/// retried once before falling back to [`fallback_draft`].
pub fn generate_episode(segment: &[Message], gateway: &Gateway) -> Result<EpisodeDraft, LlmError> {
    if segment.is_empty() {
        return Err(LlmError::Precondition("segment must not be empty".into()));
    }
    let req = ChatRequest::new(
        RoleTag::EpisodeGenerator,
        prompts::EPISODE_SYSTEM,
        prompts::episode_user(segment),
        ResponseFormat::JsonObject,
    );
    for _ in 0..2 {
        let text = gateway.chat(&req)?;
        if let Some(draft) = parse_draft(&text) {
            return Ok(draft);
        }
        tracing::warn!(response = %text, "unparseable episode generator output");
    }
    Ok(fallback_draft(segment))
}

/// Embeds `title\nnarrative`, assigns an id and stores the episode with its
/// source messages. Nothing is stored if any step fails.
pub fn store_episode(
    draft: &EpisodeDraft,
    segment: &[Message],
    user: &UserId,
    gateway: &Gateway,
    store: &VectorStore<Episode>,
    ids: &IdGenerator,
    clock: &dyn Clock,
) -> Result<Arc<Episode>, EngineError> {
    let embedding = gateway.embed(&join_title_body(&draft.title, &draft.narrative))?;
    if let Some(expected) = store.dimension() {
        if expected != embedding.dim() {
            return Err(StoreError::DimensionMismatch {
                expected,
                actual: embedding.dim(),
            }
            .into());
        }
    }
    let mut episode = Episode::new(
        ids.next(IdKind::Episode),
        user.clone(),
        draft.title.clone(),
        draft.narrative.clone(),
        segment.to_vec(),
        embedding,
        clock.now(),
    )?;
    episode.degraded = draft.degraded;
    Ok(store.insert(episode)?)
}
