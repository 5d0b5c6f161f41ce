//! Question answering over assembled memory.

use epimem_core::llm::{ChatRequest, ResponseFormat, RoleTag};
use epimem_core::{prompts, Engine, EngineError, MemoryContext, UserId};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub answer: String,
    pub context: MemoryContext,
}

#[derive(Debug, thiserror::Error)]
#[error("answering failed: {source}")]
pub struct AnswerError {
    /// The context assembled before the failure, when assembly succeeded.
    pub context: Option<Box<MemoryContext>>,
    #[source]
    pub source: EngineError,
}

/// Assembles a context for `question` (with `top_k` episodes when given) and
/// asks the answerer.
pub fn answer(
    engine: &Engine,
    user: &UserId,
    question: &str,
    top_k: Option<usize>,
) -> Result<Answer, AnswerError> {
    let mut cfg = engine.config().clone();
    if let Some(k) = top_k {
        cfg.top_k_episodes = k;
        cfg.raw_text_episode_count = cfg.raw_text_episode_count.min(k);
    }
    let context = engine
        .assemble_context_with(user, question, &cfg)
        .map_err(|source| AnswerError {
            context: None,
            source,
        })?;
    let req = ChatRequest::new(
        RoleTag::Answerer,
        prompts::ANSWER_SYSTEM,
        prompts::answer_user(&context.rendered, question),
        ResponseFormat::FreeText,
    );
    match engine.gateway().chat(&req) {
        Ok(text) => Ok(Answer {
            answer: text.trim().to_string(),
            context,
        }),
        Err(e) => Err(AnswerError {
            context: Some(Box::new(context)),
            source: e.into(),
        }),
    }
}
