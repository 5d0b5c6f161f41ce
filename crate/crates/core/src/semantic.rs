//! Knowledge distillation from prediction gaps.
//!
//! For each new episode a learning cycle:
//! 1. retrieves known facts similar to the episode and asks the predictor what
//!    the episode most likely contained, given only its title and those facts;
//! 2. hands the prediction and the *raw* segment (never the narrative) to the
//!    distiller, which returns statements for whatever the prediction missed;
//! 3. embeds and stores the new statements.
//!
//! Cycles run on background workers, one at a time per user in episode order,
//! so facts learned from episode *i* are visible when episode *i + 1* is
//! predicted. [`LearningPipeline::drain`] waits for quiescence.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, LlmError, PersistError, RetrievalError};
use crate::llm::{extract_json_array, ChatRequest, Gateway, ResponseFormat, RoleTag};
use crate::model::{
    Clock, EngineConfig, Episode, IdGenerator, IdKind, Message, SemanticFact, UserId,
};
use crate::prompts;
use crate::store::VectorStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleStatus {
    Queued,
    Predicted,
    Calibrated,
    Integrated,
    Failed,
}

impl CycleStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, CycleStatus::Integrated | CycleStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCycleRecord {
    pub episode_id: String,
    pub user_id: UserId,
    pub retrieved_fact_ids: Vec<String>,
    pub predicted_content: Option<String>,
    pub distilled_statements: Vec<String>,
    pub integrated_fact_ids: Vec<String>,
    pub status: CycleStatus,
    pub queued_at: DateTime<Utc>,
    pub predicted_at: Option<DateTime<Utc>>,
    pub calibrated_at: Option<DateTime<Utc>>,
    pub integrated_at: Option<DateTime<Utc>>,
    pub failed_at: Option<DateTime<Utc>>,
    /// Distiller output was unusable and treated as "nothing new".
    #[serde(default)]
    pub degraded: bool,
    pub error: Option<String>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("illegal cycle transition {from:?} -> {to:?}")]
pub struct TransitionError {
    pub from: CycleStatus,
    pub to: CycleStatus,
}

impl LearningCycleRecord {
    pub fn queued(episode: &Episode, at: DateTime<Utc>) -> Self {
        Self {
            episode_id: episode.id.clone(),
            user_id: episode.user_id.clone(),
            retrieved_fact_ids: Vec::new(),
            predicted_content: None,
            distilled_statements: Vec::new(),
            integrated_fact_ids: Vec::new(),
            status: CycleStatus::Queued,
            queued_at: at,
            predicted_at: None,
            calibrated_at: None,
            integrated_at: None,
            failed_at: None,
            degraded: false,
            error: None,
        }
    }

    /// Moves forward in `queued < predicted < calibrated < integrated`;
    /// `failed` is reachable from any non-terminal state. Stages may be
    /// skipped (direct extraction has no prediction).
    pub fn advance(&mut self, to: CycleStatus, at: DateTime<Utc>) -> Result<(), TransitionError> {
        let from = self.status;
        let ok = !from.is_terminal() && (to == CycleStatus::Failed || to > from);
        if !ok {
            return Err(TransitionError { from, to });
        }
        match to {
            CycleStatus::Predicted => self.predicted_at = Some(at),
            CycleStatus::Calibrated => self.calibrated_at = Some(at),
            CycleStatus::Integrated => self.integrated_at = Some(at),
            CycleStatus::Failed => self.failed_at = Some(at),
            CycleStatus::Queued => {}
        }
        self.status = to;
        Ok(())
    }

    fn fail(&mut self, at: DateTime<Utc>, error: impl std::fmt::Display) {
        self.error = Some(error.to_string());
        let _ = self.advance(CycleStatus::Failed, at);
    }
}

/// Facts of the episode's user most similar to the episode's stored
/// embedding (the same `title\nnarrative` text).
pub fn retrieve_relevant(
    episode: &Episode,
    facts: &VectorStore<SemanticFact>,
    cfg: &EngineConfig,
) -> Result<Vec<Arc<SemanticFact>>, RetrievalError> {
    let hits = facts.search(
        &episode.user_id,
        &episode.embedding,
        cfg.semantic_retrieval_limit_for_learning,
        Some(cfg.similarity_threshold),
    )?;
    Ok(hits.into_iter().map(|h| h.item).collect())
}

pub fn predict_episode(
    title: &str,
    relevant: &[SemanticFact],
    gateway: &Gateway,
) -> Result<String, LlmError> {
    if title.trim().is_empty() {
        return Err(LlmError::Precondition(
            "episode title must not be empty".into(),
        ));
    }
    let req = ChatRequest::new(
        RoleTag::EpisodePredictor,
        prompts::PREDICT_SYSTEM,
        prompts::predict_user(title, relevant),
        ResponseFormat::FreeText,
    );
    gateway.chat(&req).map(|t| t.trim().to_string())
}

/// Statements returned by the distiller.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Distilled {
    pub statements: Vec<String>,
    pub degraded: bool,
}

pub fn parse_statements(text: &str) -> Option<Vec<String>> {
    let value = extract_json_array(text)?;
    value
        .as_array()?
        .iter()
        .map(|v| v.as_str().map(|s| s.trim().to_string()))
        .collect::<Option<Vec<_>>>()
        .map(|all| all.into_iter().filter(|s| !s.is_empty()).collect())
}

fn distill_with(req: ChatRequest, gateway: &Gateway) -> Result<Distilled, LlmError> {
    for _ in 0..2 {
        let text = gateway.chat(&req)?;
        if let Some(statements) = parse_statements(&text) {
            return Ok(Distilled {
                statements,
                degraded: false,
            });
        }
        tracing::warn!(response = %text, "unparseable distiller output");
    }
    Ok(Distilled {
        statements: Vec::new(),
        degraded: true,
    })
}

/// Compares the prediction with the raw segment and returns the new knowledge.
pub fn distill_gap(
    prediction: &str,
    segment: &[Message],
    gateway: &Gateway,
) -> Result<Distilled, LlmError> {
    if segment.is_empty() {
        return Err(LlmError::Precondition("segment must not be empty".into()));
    }
    distill_with(
        ChatRequest::new(
            RoleTag::KnowledgeDistiller,
            prompts::DISTILL_SYSTEM,
            prompts::distill_user(prediction, segment),
            ResponseFormat::JsonArray,
        ),
        gateway,
    )
}

/// Extraction straight from the segment, without a prediction to compare to.
pub fn extract_direct(segment: &[Message], gateway: &Gateway) -> Result<Distilled, LlmError> {
    if segment.is_empty() {
        return Err(LlmError::Precondition("segment must not be empty".into()));
    }
    distill_with(
        ChatRequest::new(
            RoleTag::KnowledgeDistiller,
            prompts::EXTRACT_SYSTEM,
            prompts::extract_user(segment),
            ResponseFormat::JsonArray,
        ),
        gateway,
    )
}

/// Embeds and stores new statements. Blank statements and exact duplicates
/// (after trimming) of the user's existing facts or of earlier statements in
/// the batch are skipped. Either every new fact is stored or none is.
pub fn integrate(
    statements: &[String],
    episode_id: &str,
    user: &UserId,
    gateway: &Gateway,
    facts: &VectorStore<SemanticFact>,
    ids: &IdGenerator,
    clock: &dyn Clock,
) -> Result<Vec<Arc<SemanticFact>>, EngineError> {
    let mut known: HashSet<String> = facts
        .snapshot(user)
        .iter()
        .map(|f| f.statement.trim().to_string())
        .collect();
    let fresh: Vec<String> = statements
        .iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty() && known.insert(s.clone()))
        .collect();
    if fresh.is_empty() {
        return Ok(Vec::new());
    }
    let embeddings = fresh
        .iter()
        .map(|s| gateway.embed(s))
        .collect::<Result<Vec<_>, _>>()?;
    let now = clock.now();
    let batch: Vec<SemanticFact> = fresh
        .into_iter()
        .zip(embeddings)
        .map(|(statement, embedding)| SemanticFact {
            id: ids.next(IdKind::Fact),
            user_id: user.clone(),
            statement,
            embedding,
            source_episode_id: episode_id.to_string(),
            created_at: now,
        })
        .collect();
    Ok(facts.insert_all(batch)?)
}

/// Receives every finished cycle record.
pub trait CycleSink: Send + Sync {
    fn record(&self, record: &LearningCycleRecord) -> Result<(), PersistError>;
}

/// Everything a learning cycle needs.
#[derive(Clone)]
pub struct LearningContext {
    pub gateway: Arc<Gateway>,
    pub episodes: Arc<VectorStore<Episode>>,
    pub facts: Arc<VectorStore<SemanticFact>>,
    pub ids: Arc<IdGenerator>,
    pub clock: Arc<dyn Clock>,
    pub cfg: EngineConfig,
    pub sink: Option<Arc<dyn CycleSink>>,
}

/// Runs one full cycle for `episode`, whose source messages are the segment.
/// Any stage failure marks the record failed and leaves both stores as they
/// were.
pub fn run_learning_cycle(episode: &Episode, ctx: &LearningContext) -> LearningCycleRecord {
    let mut record = LearningCycleRecord::queued(episode, ctx.clock.now());
    run_stages(episode, ctx, &mut record);
    record
}

fn run_stages(episode: &Episode, ctx: &LearningContext, record: &mut LearningCycleRecord) {
    let segment = &episode.source_messages;
    let distilled = if ctx.cfg.direct_extraction {
        extract_direct(segment, &ctx.gateway)
    } else {
        let relevant = match retrieve_relevant(episode, &ctx.facts, &ctx.cfg) {
            Ok(r) => r,
            Err(e) => return record.fail(ctx.clock.now(), e),
        };
        record.retrieved_fact_ids = relevant.iter().map(|f| f.id.clone()).collect();
        let relevant: Vec<SemanticFact> = relevant.iter().map(|f| (**f).clone()).collect();
        let prediction = match predict_episode(&episode.title, &relevant, &ctx.gateway) {
            Ok(p) => p,
            Err(e) => return record.fail(ctx.clock.now(), e),
        };
        record.predicted_content = Some(prediction.clone());
        record
            .advance(CycleStatus::Predicted, ctx.clock.now())
            .expect("queued -> predicted");
        distill_gap(&prediction, segment, &ctx.gateway)
    };
    let distilled = match distilled {
        Ok(d) => d,
        Err(e) => return record.fail(ctx.clock.now(), e),
    };
    record.degraded = distilled.degraded;
    record.distilled_statements = distilled.statements.clone();
    record
        .advance(CycleStatus::Calibrated, ctx.clock.now())
        .expect("forward to calibrated");

    match integrate(
        &distilled.statements,
        &episode.id,
        &episode.user_id,
        &ctx.gateway,
        &ctx.facts,
        &ctx.ids,
        ctx.clock.as_ref(),
    ) {
        Ok(stored) => {
            record.integrated_fact_ids = stored.iter().map(|f| f.id.clone()).collect();
            record
                .advance(CycleStatus::Integrated, ctx.clock.now())
                .expect("calibrated -> integrated");
        }
        Err(e) => record.fail(ctx.clock.now(), e),
    }
}

struct State {
    queues: HashMap<UserId, VecDeque<Arc<Episode>>>,
    running: HashSet<UserId>,
    /// episode id -> user, for cycles not yet terminal
    pending: BTreeMap<String, UserId>,
    records: Vec<LearningCycleRecord>,
}

struct Shared {
    ctx: LearningContext,
    state: Mutex<State>,
    changed: Condvar,
}

/// Background executor for learning cycles: one worker per user with queued
/// work, cycles for a user run in enqueue order.
#[derive(Clone)]
pub struct LearningPipeline {
    shared: Arc<Shared>,
}

impl std::fmt::Debug for LearningPipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LearningPipeline").finish_non_exhaustive()
    }
}

impl LearningPipeline {
    pub fn new(ctx: LearningContext) -> Self {
        Self {
            shared: Arc::new(Shared {
                ctx,
                state: Mutex::new(State {
                    queues: HashMap::new(),
                    running: HashSet::new(),
                    pending: BTreeMap::new(),
                    records: Vec::new(),
                }),
                changed: Condvar::new(),
            }),
        }
    }

    pub fn context(&self) -> &LearningContext {
        &self.shared.ctx
    }

    pub fn enqueue(&self, episode: Arc<Episode>) {
        let user = episode.user_id.clone();
        let mut state = self.shared.state.lock().expect("pipeline poisoned");
        state.pending.insert(episode.id.clone(), user.clone());
        state
            .queues
            .entry(user.clone())
            .or_default()
            .push_back(episode);
        if state.running.insert(user.clone()) {
            let shared = self.shared.clone();
            let spawned = std::thread::Builder::new()
                .name(format!("learn-{user}"))
                .spawn(move || worker(shared, user.clone()));
            if let Err(e) = spawned {
                tracing::error!(error = %e, "could not spawn learning worker");
            }
        }
    }

    /// Blocks until every queued cycle (for `user`, or for everyone) is
    /// integrated or failed, or `timeout` elapses.
    pub fn drain(&self, user: Option<&UserId>, timeout: Duration) -> Result<(), EngineError> {
        let deadline = Instant::now() + timeout;
        let mut state = self.shared.state.lock().expect("pipeline poisoned");
        loop {
            let stuck: Vec<String> = state
                .pending
                .iter()
                .filter(|(_, u)| user.is_none_or(|want| want == *u))
                .map(|(id, _)| id.clone())
                .collect();
            if stuck.is_empty() {
                return Ok(());
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(EngineError::DrainTimeout { stuck });
            }
            state = self
                .shared
                .changed
                .wait_timeout(state, deadline - now)
                .expect("pipeline poisoned")
                .0;
        }
    }

    pub fn pending(&self) -> Vec<String> {
        let state = self.shared.state.lock().expect("pipeline poisoned");
        state.pending.keys().cloned().collect()
    }

    /// Makes records of cycles finished in an earlier run visible again.
    pub fn restore_records(&self, records: Vec<LearningCycleRecord>) {
        let mut state = self.shared.state.lock().expect("pipeline poisoned");
        state.records.extend(records);
    }

    /// Finished cycle records in completion order.
    pub fn records(&self, user: Option<&UserId>) -> Vec<LearningCycleRecord> {
        let state = self.shared.state.lock().expect("pipeline poisoned");
        state
            .records
            .iter()
            .filter(|r| user.is_none_or(|u| *u == r.user_id))
            .cloned()
            .collect()
    }
}

fn worker(shared: Arc<Shared>, user: UserId) {
    loop {
        let next = {
            let mut state = shared.state.lock().expect("pipeline poisoned");
            match state.queues.get_mut(&user).and_then(VecDeque::pop_front) {
                Some(ep) => ep,
                None => {
                    state.queues.remove(&user);
                    state.running.remove(&user);
                    shared.changed.notify_all();
                    return;
                }
            }
        };
        let ctx = &shared.ctx;
        let record = catch_unwind(AssertUnwindSafe(|| run_learning_cycle(&next, ctx)))
            .unwrap_or_else(|_| {
                let mut r = LearningCycleRecord::queued(&next, ctx.clock.now());
                r.fail(ctx.clock.now(), "learning cycle panicked");
                r
            });
        if record.status == CycleStatus::Failed {
            tracing::warn!(episode = %record.episode_id, error = ?record.error, "learning cycle failed");
        }
        if let Some(sink) = &ctx.sink {
            if let Err(e) = sink.record(&record) {
                tracing::error!(error = %e, "could not persist cycle record");
            }
        }
        let mut state = shared.state.lock().expect("pipeline poisoned");
        state.pending.remove(&record.episode_id);
        state.records.push(record);
        shared.changed.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::scripted::{FailureMode, HashEmbedder, ScriptedChat, ScriptedRule};
    use crate::llm::{CallLog, RetryPolicy};
    use crate::model::{Embedding, FixedClock, Role};

    fn t0() -> DateTime<Utc> {
        "2023-06-16T09:00:00Z".parse().unwrap()
    }

    fn user() -> UserId {
        UserId::new("jon").unwrap()
    }

    fn episode(id: &str, title: &str) -> Episode {
        let embedder = HashEmbedder::new(8);
        let narrative = format!("Narrative for {title}.");
        Episode::new(
            id.into(),
            user(),
            title.into(),
            narrative.clone(),
            vec![
                Message::new(Role::User, format!("raw talk about {title}"), t0()).unwrap(),
                Message::new(Role::Assistant, "noted", t0()).unwrap(),
            ],
            Embedding::new(embedder.vector(&format!("{title}\n{narrative}"))).unwrap(),
            t0(),
        )
        .unwrap()
    }

    fn context(rules: Vec<ScriptedRule>) -> LearningContext {
        let gateway = Gateway::new(
            Arc::new(ScriptedChat::new(rules, false)),
            Arc::new(HashEmbedder::new(8)),
        )
        .with_retry(RetryPolicy::immediate())
        .with_call_log(CallLog::new(true, 1000));
        LearningContext {
            gateway: Arc::new(gateway),
            episodes: Arc::new(VectorStore::new()),
            facts: Arc::new(VectorStore::new()),
            ids: Arc::new(IdGenerator::sequential()),
            clock: Arc::new(FixedClock(t0())),
            cfg: EngineConfig::default(),
            sink: None,
        }
    }

    fn seed_fact(ctx: &LearningContext, id: &str, statement: &str) {
        ctx.facts
            .insert(SemanticFact {
                id: id.into(),
                user_id: user(),
                statement: statement.into(),
                embedding: ctx.gateway.embed(statement).unwrap(),
                source_episode_id: "ep-000000".into(),
                created_at: t0(),
            })
            .unwrap();
    }

    #[test]
    fn status_transitions_are_monotonic() {
        let mut r = LearningCycleRecord::queued(&episode("ep-1", "t"), t0());
        r.advance(CycleStatus::Predicted, t0()).unwrap();
        assert!(r.advance(CycleStatus::Queued, t0()).is_err());
        r.advance(CycleStatus::Integrated, t0()).unwrap();
        assert!(r.advance(CycleStatus::Failed, t0()).is_err());
        let mut r = LearningCycleRecord::queued(&episode("ep-1", "t"), t0());
        r.advance(CycleStatus::Failed, t0()).unwrap();
        assert!(r.advance(CycleStatus::Integrated, t0()).is_err());
    }

    #[test]
    fn empty_fact_store_retrieves_nothing() {
        let ctx = context(vec![]);
        assert!(
            retrieve_relevant(&episode("ep-1", "x"), &ctx.facts, &ctx.cfg)
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn retrieval_respects_limit_and_threshold() {
        let ctx = context(vec![]);
        for i in 0..30 {
            seed_fact(
                &ctx,
                &format!("fact-{i:06}"),
                &format!("statement number {i}"),
            );
        }
        let ep = episode("ep-1", "statement number");
        let loose = LearningContext {
            cfg: EngineConfig {
                similarity_threshold: -1.0,
                ..Default::default()
            },
            ..ctx.clone()
        };
        assert_eq!(
            retrieve_relevant(&ep, &loose.facts, &loose.cfg)
                .unwrap()
                .len(),
            20
        );
        let hits = retrieve_relevant(&ep, &ctx.facts, &ctx.cfg).unwrap();
        assert!(hits.len() <= 20);
        for f in &hits {
            let s = crate::retrieval::cosine_similarity(
                ep.embedding.as_slice(),
                f.embedding.as_slice(),
            )
            .unwrap();
            assert!(s >= 0.0);
        }
    }

    #[test]
    fn prediction_without_knowledge_says_so() {
        let ctx = context(vec![ScriptedRule::respond(
            RoleTag::EpisodePredictor,
            "a guess",
        )]);
        let p = predict_episode("Apple tasting plan", &[], &ctx.gateway).unwrap();
        assert_eq!(p, "a guess");
        let log = ctx.gateway.call_log().for_role(RoleTag::EpisodePredictor);
        let prompt = log[0].prompt.as_deref().unwrap();
        assert!(prompt.contains("EPISODE TITLE: Apple tasting plan"));
        assert!(prompt.contains("(no prior knowledge exists)"));
    }

    #[test]
    fn predictor_timeouts_fail_the_cycle() {
        let ctx = context(vec![ScriptedRule::fail(
            RoleTag::EpisodePredictor,
            FailureMode::Timeout,
        )]);
        let record = run_learning_cycle(&episode("ep-1", "t"), &ctx);
        assert_eq!(record.status, CycleStatus::Failed);
        assert_eq!(
            ctx.gateway
                .call_log()
                .for_role(RoleTag::EpisodePredictor)
                .len(),
            3
        );
        assert!(ctx.facts.is_empty());
    }

    #[test]
    fn distiller_parsing() {
        assert_eq!(
            parse_statements("[\"Jon was mentored on June 15, 2023.\"]"),
            Some(vec!["Jon was mentored on June 15, 2023.".to_string()])
        );
        assert_eq!(parse_statements("nothing new: []"), Some(vec![]));
        assert_eq!(parse_statements("[1, 2]"), None);
        assert_eq!(parse_statements("oops"), None);
    }

    #[test]
    fn distiller_sees_raw_segment_not_narrative() {
        let ctx = context(vec![]);
        let ep = episode("ep-1", "Mentoring");
        distill_gap("prediction text", &ep.source_messages, &ctx.gateway).unwrap();
        let log = ctx.gateway.call_log().for_role(RoleTag::KnowledgeDistiller);
        let prompt = log[0].prompt.as_deref().unwrap();
        assert!(prompt.contains("raw talk about Mentoring"));
        assert!(prompt.contains("prediction text"));
        assert!(!prompt.contains(&ep.narrative));
    }

    #[test]
    fn distiller_garbage_degrades_to_empty() {
        let ctx = context(vec![ScriptedRule::fail(
            RoleTag::KnowledgeDistiller,
            FailureMode::Malformed,
        )]);
        let record = run_learning_cycle(&episode("ep-1", "t"), &ctx);
        assert_eq!(record.status, CycleStatus::Integrated);
        assert!(record.degraded);
        assert!(ctx.facts.is_empty());
    }

    #[test]
    fn integrate_counts_and_dedups() {
        let ctx = context(vec![]);
        let stmts = vec![
            "Jon likes apples.".to_string(),
            "Jon has a sister.".to_string(),
        ];
        let stored = integrate(
            &stmts,
            "ep-1",
            &user(),
            &ctx.gateway,
            &ctx.facts,
            &ctx.ids,
            ctx.clock.as_ref(),
        )
        .unwrap();
        assert_eq!(stored.len(), 2);
        assert_eq!(stored[0].id, "fact-000001");
        let again = integrate(
            &[
                " Jon likes apples. ".to_string(),
                "jon likes apples.".to_string(),
                "".into(),
            ],
            "ep-2",
            &user(),
            &ctx.gateway,
            &ctx.facts,
            &ctx.ids,
            ctx.clock.as_ref(),
        )
        .unwrap();
        assert_eq!(
            again.len(),
            1,
            "case-sensitive dedup keeps the lowercase variant"
        );
        assert_eq!(ctx.facts.len(), 3);
        assert!(integrate(
            &[],
            "ep-3",
            &user(),
            &ctx.gateway,
            &ctx.facts,
            &ctx.ids,
            ctx.clock.as_ref()
        )
        .unwrap()
        .is_empty());
    }

    #[test]
    fn fresh_user_cycle_integrates() {
        let ctx = context(vec![ScriptedRule::respond(
            RoleTag::KnowledgeDistiller,
            r#"["Jon was mentored on June 15, 2023."]"#,
        )]);
        let record = run_learning_cycle(&episode("ep-1", "Mentoring"), &ctx);
        assert_eq!(record.status, CycleStatus::Integrated);
        assert!(record.retrieved_fact_ids.is_empty());
        assert_eq!(record.integrated_fact_ids, vec!["fact-000001"]);
        assert_eq!(
            ctx.facts.get("fact-000001").unwrap().statement,
            "Jon was mentored on June 15, 2023."
        );
    }

    #[test]
    fn direct_extraction_skips_prediction() {
        let mut ctx = context(vec![ScriptedRule::respond(
            RoleTag::KnowledgeDistiller,
            r#"["a", "b", "c"]"#,
        )]);
        ctx.cfg.direct_extraction = true;
        let record = run_learning_cycle(&episode("ep-1", "t"), &ctx);
        assert_eq!(record.status, CycleStatus::Integrated);
        assert!(record.predicted_content.is_none());
        assert!(ctx
            .gateway
            .call_log()
            .for_role(RoleTag::EpisodePredictor)
            .is_empty());
        assert_eq!(ctx.facts.len(), 3);
    }

    #[test]
    fn pipeline_drains_and_orders_cycles() {
        let ctx = context(vec![ScriptedRule::respond(
            RoleTag::KnowledgeDistiller,
            r#"["Jon plays chess."]"#,
        )
        .at_call(1)]);
        let pipeline = LearningPipeline::new(ctx.clone());
        pipeline.drain(None, Duration::from_millis(10)).unwrap();
        for (i, title) in ["Chess club", "Chess club again", "Chess tournament"]
            .iter()
            .enumerate()
        {
            pipeline.enqueue(Arc::new(episode(&format!("ep-{i}"), title)));
        }
        pipeline
            .drain(Some(&user()), Duration::from_secs(10))
            .unwrap();
        let records = pipeline.records(None);
        assert_eq!(records.len(), 3);
        assert!(records.iter().all(|r| r.status == CycleStatus::Integrated));
        let order: Vec<&str> = records.iter().map(|r| r.episode_id.as_str()).collect();
        assert_eq!(order, vec!["ep-0", "ep-1", "ep-2"]);
        assert!(pipeline.pending().is_empty());
    }

    #[test]
    fn drain_times_out_on_a_hung_provider() {
        let ctx = context(vec![ScriptedRule::respond(
            RoleTag::EpisodePredictor,
            "late",
        )
        .delayed(3_000)]);
        let pipeline = LearningPipeline::new(ctx);
        pipeline.enqueue(Arc::new(episode("ep-9", "stuck")));
        match pipeline.drain(None, Duration::from_secs(1)) {
            Err(EngineError::DrainTimeout { stuck }) => assert_eq!(stuck, vec!["ep-9"]),
            other => panic!("expected timeout, got {other:?}"),
        }
    }
}
