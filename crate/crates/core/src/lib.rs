//! Episodic and semantic long-term memory for conversational agents.
//!
//! Conversations are segmented into coherent episodes, each rewritten as a
//! titled narrative and embedded. In the background a predict-then-calibrate
//! loop distills durable facts from what the existing knowledge failed to
//! anticipate. At query time both memory kinds are retrieved by cosine
//! similarity and rendered into a prompt context.

pub mod engine;
pub mod episodic;
pub mod error;
pub mod llm;
pub mod model;
pub mod persistence;
pub mod prompts;
pub mod retrieval;
pub mod segmentation;
pub mod semantic;
pub mod store;
pub mod tokens;

pub use engine::{AppendResult, Engine, EngineBuilder};
pub use error::{EngineError, LlmError, ModelError, PersistError, RetrievalError, StoreError};
pub use model::{
    BoundaryDecision, Clock, Embedding, EngineConfig, Episode, FixedClock, IdGenerator, Message,
    Role, SemanticFact, SystemClock, UserId,
};
pub use retrieval::{MemoryContext, ScoredItem};
pub use semantic::{CycleStatus, LearningCycleRecord};
