//! Dense retrieval over either memory kind and query-time context assembly.
//!
//! Retrieval runs in three steps: cosine similarity against every stored
//! item, top-`m` selection, then an optional similarity floor (items equal to
//! the floor are kept). Ties rank the earlier `created_at` first, then the
//! smaller id.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use chrono::SecondsFormat;
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, RetrievalError};
use crate::llm::Gateway;
use crate::model::{
    render_transcript, EngineConfig, Episode, ItemKind, MemoryItem, SemanticFact, UserId,
};
use crate::store::VectorStore;
use crate::tokens::TokenEstimator;

/// Version tag of the rendered context layout.
pub const CONTEXT_FORMAT_VERSION: u32 = 1;

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut dot = 0.0f64;
    let mut norm_a = 0.0f64;
    let mut norm_b = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        norm_a += x * x;
        norm_b += y * y;
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(dot / (norm_a.sqrt() * norm_b.sqrt()))
}

#[derive(Debug, Clone)]
pub struct Scored<T> {
    pub item: Arc<T>,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item_id: String,
    pub similarity: f64,
    pub kind: ItemKind,
}

impl<T: MemoryItem> Scored<T> {
    pub fn to_item(&self) -> ScoredItem {
        ScoredItem {
            item_id: self.item.id().to_string(),
            similarity: self.similarity,
            kind: T::KIND,
        }
    }
}

/// `Less` means `a` ranks ahead of `b`.
fn rank<T: MemoryItem>(a: &Scored<T>, b: &Scored<T>) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.item.created_at().cmp(&b.item.created_at()))
        .then_with(|| a.item.id().cmp(b.item.id()))
}

/// Heap entry ordered so that the worst-ranked candidate sits on top.
struct Candidate<T: MemoryItem>(Scored<T>);

impl<T: MemoryItem> PartialEq for Candidate<T> {
    fn eq(&self, other: &Self) -> bool {
        rank(&self.0, &other.0) == Ordering::Equal
    }
}
impl<T: MemoryItem> Eq for Candidate<T> {}
impl<T: MemoryItem> PartialOrd for Candidate<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: MemoryItem> Ord for Candidate<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        rank(&self.0, &other.0)
    }
}

pub fn retrieve<T: MemoryItem>(
    query: &[f32],
    items: &[Arc<T>],
    limit: usize,
    threshold: Option<f64>,
) -> Result<Vec<Scored<T>>, RetrievalError> {
    if limit == 0 || items.is_empty() {
        return Ok(Vec::new());
    }
    let mut heap: BinaryHeap<Candidate<T>> = BinaryHeap::with_capacity(limit + 1);
    for item in items {
        let similarity = cosine_similarity(query, item.embedding().as_slice())?;
        heap.push(Candidate(Scored {
            item: item.clone(),
            similarity,
        }));
        if heap.len() > limit {
            heap.pop();
        }
    }
    let mut selected: Vec<Scored<T>> = heap.into_sorted_vec().into_iter().map(|c| c.0).collect();
    if let Some(floor) = threshold {
        selected.retain(|s| s.similarity >= floor);
    }
    Ok(selected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEpisode {
    pub episode: Episode,
    pub similarity: f64,
    pub include_raw_text: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextFact {
    pub fact: SemanticFact,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryContext {
    pub episodes: Vec<ContextEpisode>,
    pub facts: Vec<ContextFact>,
    pub rendered: String,
    pub token_estimate: usize,
}

pub fn assemble_context(
    query_text: &str,
    user: &UserId,
    episodes: &VectorStore<Episode>,
    facts: &VectorStore<SemanticFact>,
    gateway: &Gateway,
    cfg: &EngineConfig,
    estimator: &dyn TokenEstimator,
) -> Result<MemoryContext, EngineError> {
    if query_text.trim().is_empty() {
        return Err(crate::error::ModelError::Empty("query").into());
    }
    let query = gateway.embed(query_text)?;
    let threshold = Some(cfg.similarity_threshold);

    let episode_hits = if cfg.episodic_retrieval {
        episodes.search(user, &query, cfg.top_k_episodes, threshold)?
    } else {
        Vec::new()
    };
    let fact_hits = if cfg.semantic_retrieval {
        facts.search(user, &query, cfg.fact_limit(), threshold)?
    } else {
        Vec::new()
    };

    let context_episodes: Vec<ContextEpisode> = episode_hits
        .into_iter()
        .enumerate()
        .map(|(rank, hit)| ContextEpisode {
            episode: (*hit.item).clone(),
            similarity: hit.similarity,
            include_raw_text: rank < cfg.raw_text_episode_count,
        })
        .collect();
    let context_facts: Vec<ContextFact> = fact_hits
        .into_iter()
        .map(|hit| ContextFact {
            fact: (*hit.item).clone(),
            similarity: hit.similarity,
        })
        .collect();

    let rendered = render_context(&context_episodes, &context_facts, |id| {
        episodes.get(id).map(|e| e.time_span.end)
    });
    let token_estimate = estimator.estimate(&rendered);
    Ok(MemoryContext {
        episodes: context_episodes,
        facts: context_facts,
        rendered,
        token_estimate,
    })
}

/// Renders the prompt block. Layout (format 1):
///
/// ```text
/// MEMORY CONTEXT (format 1)
///
/// == EPISODES ==
/// [1] <title>
/// When: <start> to <end>
/// <narrative>
/// Transcript:
/// [<timestamp>] <role>: <content>
///
/// == KNOWLEDGE ==
/// - (<date>) <statement>
/// ```
///
/// Transcripts appear only for episodes marked `include_raw_text`; an empty
/// section shows `(none)`. Facts are dated by their source episode's end
/// time, falling back to their own creation time.
pub fn render_context(
    episodes: &[ContextEpisode],
    facts: &[ContextFact],
    episode_end: impl Fn(&str) -> Option<chrono::DateTime<chrono::Utc>>,
) -> String {
    let mut out = format!("MEMORY CONTEXT (format {CONTEXT_FORMAT_VERSION})\n\n== EPISODES ==\n");
    if episodes.is_empty() {
        out.push_str("(none)\n");
    }
    for (i, entry) in episodes.iter().enumerate() {
        let ep = &entry.episode;
        out.push_str(&format!("[{}] {}\n", i + 1, ep.title.trim()));
        out.push_str(&format!(
            "When: {} to {}\n",
            ep.time_span
                .start
                .to_rfc3339_opts(SecondsFormat::Secs, true),
            ep.time_span.end.to_rfc3339_opts(SecondsFormat::Secs, true)
        ));
        out.push_str(ep.narrative.trim());
        out.push('\n');
        if entry.include_raw_text {
            out.push_str("Transcript:\n");
            out.push_str(&render_transcript(&ep.source_messages));
            out.push('\n');
        }
        out.push('\n');
    }
    out.push_str("== KNOWLEDGE ==\n");
    if facts.is_empty() {
        out.push_str("(none)\n");
    }
    for entry in facts {
        let fact = &entry.fact;
        let date = episode_end(&fact.source_episode_id).unwrap_or(fact.created_at);
        out.push_str(&format!(
            "- ({}) {}\n",
            date.format("%Y-%m-%d"),
            fact.statement.trim()
        ));
    }
    out
}
