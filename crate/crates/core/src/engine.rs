//! The memory engine: segmentation, episode creation, background learning and
//! query-time context assembly behind one handle.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use crate::episodic::{generate_episode, store_episode};
use crate::error::EngineError;
use crate::llm::Gateway;
use crate::model::{
    Clock, EngineConfig, Episode, IdGenerator, IdKind, Message, SemanticFact, SystemClock, UserId,
};
use crate::persistence::Persistence;
use crate::retrieval::{assemble_context, MemoryContext};
use crate::segmentation::{SegmentationOutcome, Segmenter};
use crate::semantic::{CycleSink, LearningContext, LearningCycleRecord, LearningPipeline};
use crate::store::{Journal, VectorStore};
use crate::tokens::{CharsPerToken, TokenEstimator};

/// Result of appending one message.
#[derive(Debug, Clone)]
pub struct AppendResult {
    pub segmentation: SegmentationOutcome,
    /// The episode created from the emitted segment, if any.
    pub episode: Option<Arc<Episode>>,
}

pub struct EngineBuilder {
    cfg: EngineConfig,
    gateway: Arc<Gateway>,
    clock: Arc<dyn Clock>,
    ids: IdGenerator,
    store_dir: Option<PathBuf>,
    estimator: Arc<dyn TokenEstimator>,
    resume: bool,
}

impl EngineBuilder {
    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn ids(mut self, ids: IdGenerator) -> Self {
        self.ids = ids;
        self
    }

    /// Persist to (and load from) this directory.
    pub fn store_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.store_dir = Some(dir.into());
        self
    }

    pub fn estimator(mut self, estimator: Arc<dyn TokenEstimator>) -> Self {
        self.estimator = estimator;
        self
    }

    /// Whether episodes loaded without a finished learning cycle are queued
    /// again. On by default.
    pub fn resume_learning(mut self, resume: bool) -> Self {
        self.resume = resume;
        self
    }

    pub fn build(self) -> Result<Engine, EngineError> {
        let cfg = self.cfg.validate()?;
        let ids = Arc::new(self.ids);
        let (episodes, facts, persistence, loaded) = match &self.store_dir {
            Some(dir) => {
                let (p, loaded) = Persistence::open(dir, &cfg)?;
                let p = Arc::new(p);
                let episodes = VectorStore::with_journal(p.clone() as Arc<dyn Journal<Episode>>);
                let facts = VectorStore::with_journal(p.clone() as Arc<dyn Journal<SemanticFact>>);
                (episodes, facts, Some(p), Some(loaded))
            }
            None => (VectorStore::new(), VectorStore::new(), None, None),
        };
        let episodes = Arc::new(episodes);
        let facts = Arc::new(facts);

        let ctx = LearningContext {
            gateway: self.gateway.clone(),
            episodes: episodes.clone(),
            facts: facts.clone(),
            ids: ids.clone(),
            clock: self.clock.clone(),
            cfg: cfg.clone(),
            sink: persistence.clone().map(|p| p as Arc<dyn CycleSink>),
        };
        let pipeline = LearningPipeline::new(ctx);

        let mut config_mismatch = false;
        if let Some(loaded) = loaded {
            config_mismatch = loaded.config_mismatch;
            let unfinished = loaded.unfinished_episodes();
            for e in &loaded.episodes {
                ids.observe(IdKind::Episode, &e.id);
            }
            for f in &loaded.facts {
                ids.observe(IdKind::Fact, &f.id);
            }
            episodes.restore(loaded.episodes)?;
            facts.restore(loaded.facts)?;
            pipeline.restore_records(loaded.cycles);
            if self.resume {
                for e in unfinished {
                    if let Some(stored) = episodes.get(&e.id) {
                        tracing::info!(episode = %e.id, "resuming learning cycle");
                        pipeline.enqueue(stored);
                    }
                }
            }
        }

        Ok(Engine {
            segmenter: Segmenter::new(self.clock.clone()),
            cfg,
            gateway: self.gateway,
            episodes,
            facts,
            pipeline,
            ids,
            clock: self.clock,
            persistence,
            estimator: self.estimator,
            config_mismatch,
        })
    }
}

pub struct Engine {
    cfg: EngineConfig,
    gateway: Arc<Gateway>,
    episodes: Arc<VectorStore<Episode>>,
    facts: Arc<VectorStore<SemanticFact>>,
    segmenter: Segmenter,
    pipeline: LearningPipeline,
    ids: Arc<IdGenerator>,
    clock: Arc<dyn Clock>,
    persistence: Option<Arc<Persistence>>,
    estimator: Arc<dyn TokenEstimator>,
    config_mismatch: bool,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("cfg", &self.cfg)
            .field("episodes", &self.episodes.len())
            .field("facts", &self.facts.len())
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn builder(cfg: EngineConfig, gateway: Arc<Gateway>) -> EngineBuilder {
        EngineBuilder {
            cfg,
            gateway,
            clock: Arc::new(SystemClock),
            ids: IdGenerator::random(),
            store_dir: None,
            estimator: Arc::new(CharsPerToken::default()),
            resume: true,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn persistence(&self) -> Option<&Persistence> {
        self.persistence.as_deref()
    }

    /// The loaded store was written under a different ingestion configuration.
    pub fn config_mismatch(&self) -> bool {
        self.config_mismatch
    }

    fn handoff(
        &self,
        user: &UserId,
        outcome: &SegmentationOutcome,
    ) -> Result<Option<Arc<Episode>>, EngineError> {
        let Some(segment) = &outcome.segment else {
            return Ok(None);
        };
        let draft = generate_episode(segment, &self.gateway)?;
        let episode = store_episode(
            &draft,
            segment,
            user,
            &self.gateway,
            &self.episodes,
            &self.ids,
            self.clock.as_ref(),
        )?;
        self.pipeline.enqueue(episode.clone());
        Ok(Some(episode))
    }

    /// Buffers `message` for `user`. When a boundary fires the segment becomes
    /// an episode before this returns; its learning cycle runs in the
    /// background. On error the buffer is left as it was.
    pub fn append_message(
        &self,
        user: &UserId,
        message: Message,
    ) -> Result<AppendResult, EngineError> {
        let (segmentation, episode) =
            self.segmenter
                .append_with(user, message, &self.cfg, &self.gateway, |o| {
                    self.handoff(user, o)
                })?;
        Ok(AppendResult {
            segmentation,
            episode,
        })
    }

    /// Turns whatever is buffered for `user` into an episode.
    pub fn flush_session(&self, user: &UserId) -> Result<Option<Arc<Episode>>, EngineError> {
        self.segmenter
            .flush_with(user, |o| self.handoff(user, o))
            .map(|(_, episode)| episode)
    }

    /// Waits for queued learning cycles (of `user`, or all) to finish.
    pub fn drain(&self, user: Option<&UserId>, timeout: Duration) -> Result<(), EngineError> {
        self.pipeline.drain(user, timeout)
    }

    pub fn assemble_context(
        &self,
        user: &UserId,
        query: &str,
    ) -> Result<MemoryContext, EngineError> {
        self.assemble_context_with(user, query, &self.cfg)
    }

    /// Like [`Engine::assemble_context`] with query-time settings overridden,
    /// e.g. a per-request `top_k_episodes`.
    pub fn assemble_context_with(
        &self,
        user: &UserId,
        query: &str,
        cfg: &EngineConfig,
    ) -> Result<MemoryContext, EngineError> {
        let cfg = cfg.clone().validate()?;
        assemble_context(
            query,
            user,
            &self.episodes,
            &self.facts,
            &self.gateway,
            &cfg,
            self.estimator.as_ref(),
        )
    }

    pub fn estimate_tokens(&self, text: &str) -> usize {
        self.estimator.estimate(text)
    }

    pub fn episodes(&self, user: &UserId) -> Vec<Arc<Episode>> {
        self.episodes.snapshot(user)
    }

    pub fn facts(&self, user: &UserId) -> Vec<Arc<SemanticFact>> {
        self.facts.snapshot(user)
    }

    pub fn episode_store(&self) -> &VectorStore<Episode> {
        &self.episodes
    }

    pub fn fact_store(&self) -> &VectorStore<SemanticFact> {
        &self.facts
    }

    pub fn buffered(&self, user: &UserId) -> Vec<Message> {
        self.segmenter.buffer(user)
    }

    pub fn cycle_records(&self, user: Option<&UserId>) -> Vec<LearningCycleRecord> {
        self.pipeline.records(user)
    }

    pub fn pending_cycles(&self) -> Vec<String> {
        self.pipeline.pending()
    }

    /// Whether anything at all is stored or buffered for `user`.
    pub fn knows_user(&self, user: &UserId) -> bool {
        self.episodes.count_for(user) > 0
            || self.facts.count_for(user) > 0
            || !self.segmenter.buffer(user).is_empty()
    }

    /// Users with stored episodes or facts.
    pub fn users(&self) -> Vec<UserId> {
        let mut users = self.episodes.users();
        users.extend(self.facts.users());
        users.sort();
        users.dedup();
        users
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::scripted::{HashEmbedder, ScriptedChat, ScriptedRule};
    use crate::llm::{RetryPolicy, RoleTag};
    use crate::model::{FixedClock, Role};
    use chrono::{DateTime, Utc};

    fn t(i: i64) -> DateTime<Utc> {
        DateTime::from_timestamp(1_686_906_000 + i * 60, 0).unwrap()
    }

    fn engine(rules: Vec<ScriptedRule>, dir: Option<&std::path::Path>) -> Engine {
        let gateway = Gateway::new(
            Arc::new(ScriptedChat::new(rules, false)),
            Arc::new(HashEmbedder::new(8)),
        )
        .with_retry(RetryPolicy::immediate());
        let mut b = Engine::builder(EngineConfig::default(), Arc::new(gateway))
            .clock(Arc::new(FixedClock(t(0))))
            .ids(IdGenerator::sequential());
        if let Some(d) = dir {
            b = b.store_dir(d);
        }
        b.build().unwrap()
    }

    fn msg(i: i64, text: &str) -> Message {
        let role = if i % 2 == 0 {
            Role::User
        } else {
            Role::Assistant
        };
        Message::new(role, text, t(i)).unwrap()
    }

    #[test]
    fn boundary_creates_episode_and_learns() {
        let e = engine(
            vec![
                ScriptedRule::respond(
                    RoleTag::BoundaryDetector,
                    r#"{"is_boundary": true, "confidence": 0.9}"#,
                )
                .containing("topic two"),
                ScriptedRule::respond(RoleTag::KnowledgeDistiller, r#"["The user likes tea."]"#),
            ],
            None,
        );
        let u = UserId::new("u1").unwrap();
        e.append_message(&u, msg(0, "I like tea")).unwrap();
        e.append_message(&u, msg(1, "Noted")).unwrap();
        let r = e.append_message(&u, msg(2, "topic two begins")).unwrap();
        let ep = r.episode.expect("episode created");
        assert_eq!(ep.source_messages.len(), 2);
        assert_eq!(e.buffered(&u).len(), 1);
        e.drain(None, Duration::from_secs(5)).unwrap();
        assert_eq!(e.facts(&u).len(), 1);
        assert!(e.flush_session(&u).unwrap().is_some());
        assert!(e.flush_session(&u).unwrap().is_none());
        e.drain(Some(&u), Duration::from_secs(5)).unwrap();
        assert_eq!(e.episodes(&u).len(), 2);
        let ctx = e.assemble_context(&u, &ep.embedding_text()).unwrap();
        assert_eq!(ctx.episodes[0].episode.id, ep.id);
        assert!((ctx.episodes[0].similarity - 1.0).abs() < 1e-9);
        assert!(ctx.episodes[0].include_raw_text);
    }

    #[test]
    fn reload_restores_state_and_counters() {
        let dir = tempfile::tempdir().unwrap();
        let u = UserId::new("u1").unwrap();
        {
            let e = engine(vec![], Some(dir.path()));
            e.append_message(&u, msg(0, "hello")).unwrap();
            e.flush_session(&u).unwrap();
            e.drain(None, Duration::from_secs(5)).unwrap();
        }
        let e = engine(vec![], Some(dir.path()));
        assert_eq!(e.episodes(&u).len(), 1);
        assert!(e.pending_cycles().is_empty());
        assert_eq!(e.cycle_records(Some(&u)).len(), 1);
        e.append_message(&u, msg(1, "again")).unwrap();
        let ep = e.flush_session(&u).unwrap().unwrap();
        assert_eq!(ep.id, "ep-000002");
    }

    #[test]
    fn unknown_user_has_empty_context() {
        let e = engine(vec![], None);
        let u = UserId::new("nobody").unwrap();
        assert!(!e.knows_user(&u));
        let ctx = e.assemble_context(&u, "anything").unwrap();
        assert!(ctx.episodes.is_empty() && ctx.facts.is_empty());
    }
}
