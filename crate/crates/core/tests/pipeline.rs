use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use epimem_core::error::LlmError;
use epimem_core::llm::scripted::{FailureMode, ScriptedChat, ScriptedRule};
use epimem_core::llm::{CallLog, EmbeddingBackend, Gateway, RetryPolicy, RoleTag};
use epimem_core::{
    CycleStatus, Engine, EngineConfig, EngineError, FixedClock, Message, Role, UserId,
};

/// Every vector lies in the positive orthant, so any pair has cosine > 0
/// and a zero similarity floor never hides a fact.
struct PositiveEmbedder;

impl EmbeddingBackend for PositiveEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>, LlmError> {
        let n = text.len() as f32;
        Ok(vec![1.0, 1.0 + n % 7.0, 1.0 + n % 3.0, 0.5])
    }
}

fn t(i: i64) -> DateTime<Utc> {
    DateTime::from_timestamp(1_686_906_000 + i * 60, 0).unwrap()
}

fn engine(rules: Vec<ScriptedRule>) -> Engine {
    let gateway = Gateway::new(
        Arc::new(ScriptedChat::new(rules, false)),
        Arc::new(PositiveEmbedder),
    )
    .with_retry(RetryPolicy::immediate())
    .with_call_log(CallLog::new(true, 10_000));
    Engine::builder(EngineConfig::default(), Arc::new(gateway))
        .clock(Arc::new(FixedClock(t(0))))
        .build()
        .unwrap()
}

fn jon() -> UserId {
    UserId::new("jon").unwrap()
}

/// Appends a two-message session and closes it.
fn session(e: &Engine, start: i64, user_text: &str) -> String {
    let u = jon();
    e.append_message(&u, Message::new(Role::User, user_text, t(start)).unwrap())
        .unwrap();
    e.append_message(
        &u,
        Message::new(Role::Assistant, "Good to know.", t(start + 1)).unwrap(),
    )
    .unwrap();
    e.flush_session(&u).unwrap().expect("episode").id.clone()
}

fn prompts(e: &Engine, role: RoleTag) -> Vec<String> {
    e.gateway()
        .call_log()
        .for_role(role)
        .into_iter()
        .filter_map(|r| r.prompt)
        .collect()
}

const STUDIO: &str = "Jon opened a dance studio in June 2023.";

#[test]
fn earlier_facts_feed_later_predictions() {
    let e = engine(vec![
        ScriptedRule::respond(RoleTag::KnowledgeDistiller, format!(r#"["{STUDIO}"]"#)).at_call(1),
        ScriptedRule::respond(
            RoleTag::KnowledgeDistiller,
            r#"["Jon teaches salsa on Fridays."]"#,
        )
        .at_call(2),
    ]);
    let u = jon();
    let first = session(&e, 0, "I just opened my dance studio!");
    e.drain(Some(&u), Duration::from_secs(10)).unwrap();
    let studio = e.facts(&u)[0].id.clone();
    let second = session(&e, 10, "Friday salsa classes are full.");
    e.drain(Some(&u), Duration::from_secs(10)).unwrap();

    let predictor = prompts(&e, RoleTag::EpisodePredictor);
    assert_eq!(predictor.len(), 2);
    assert!(predictor[0].contains("(no prior knowledge exists)"));
    assert!(predictor[1].contains(&format!("- {STUDIO}")));

    let records = e.cycle_records(Some(&u));
    let r1 = records.iter().find(|r| r.episode_id == first).unwrap();
    let r2 = records.iter().find(|r| r.episode_id == second).unwrap();
    assert!(r1.retrieved_fact_ids.is_empty());
    assert_eq!(r2.retrieved_fact_ids, vec![studio]);
    for r in [r1, r2] {
        assert_eq!(r.status, CycleStatus::Integrated);
        assert!(r.predicted_at.is_some() && r.calibrated_at.is_some() && r.integrated_at.is_some());
    }

    // The second prediction ran only after the first cycle's facts were stored.
    let log = e.gateway().call_log().records();
    let seq = |role, nth: usize| {
        log.iter()
            .filter(|r| r.role_tag == Some(role))
            .nth(nth)
            .unwrap()
            .seq
    };
    assert!(seq(RoleTag::KnowledgeDistiller, 0) < seq(RoleTag::EpisodePredictor, 1));
    assert_eq!(e.facts(&u).len(), 2);
}

#[test]
fn zero_gap_adds_nothing() {
    let e = engine(vec![
        ScriptedRule::respond(RoleTag::KnowledgeDistiller, format!(r#"["{STUDIO}"]"#)).at_call(1),
        // second cycle: nothing new, then a restatement of a known fact
        ScriptedRule::respond(RoleTag::KnowledgeDistiller, "[]").at_call(2),
        ScriptedRule::respond(RoleTag::KnowledgeDistiller, format!(r#"["  {STUDIO}  "]"#))
            .at_call(3),
    ]);
    let u = jon();
    session(&e, 0, "I just opened my dance studio!");
    e.drain(None, Duration::from_secs(10)).unwrap();
    let before: Vec<String> = e.facts(&u).iter().map(|f| f.id.clone()).collect();
    assert_eq!(before.len(), 1);

    session(&e, 10, "The studio is going well.");
    session(&e, 20, "Still dancing.");
    e.drain(None, Duration::from_secs(10)).unwrap();
    let after: Vec<String> = e.facts(&u).iter().map(|f| f.id.clone()).collect();
    assert_eq!(after, before);
    let records = e.cycle_records(Some(&u));
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r.status == CycleStatus::Integrated));
    assert!(records[1..]
        .iter()
        .all(|r| r.integrated_fact_ids.is_empty()));
}

#[test]
fn predictor_failure_leaves_stores_untouched() {
    let e = engine(vec![
        ScriptedRule::respond(RoleTag::KnowledgeDistiller, format!(r#"["{STUDIO}"]"#)).at_call(1),
        ScriptedRule::fail(RoleTag::EpisodePredictor, FailureMode::Timeout)
            .containing("EPISODE TITLE: Doomed"),
        ScriptedRule::respond(
            RoleTag::EpisodeGenerator,
            r#"{"title": "Doomed", "narrative": "The user mentioned a doomed plan."}"#,
        )
        .at_call(2),
    ]);
    let u = jon();
    session(&e, 0, "I just opened my dance studio!");
    e.drain(None, Duration::from_secs(10)).unwrap();
    let facts_before = e.facts(&u);

    let doomed = session(&e, 10, "This one will not be learned.");
    let episodes_before = e.episodes(&u);
    e.drain(None, Duration::from_secs(10)).unwrap();

    let rec = e
        .cycle_records(Some(&u))
        .into_iter()
        .find(|r| r.episode_id == doomed)
        .unwrap();
    assert_eq!(rec.status, CycleStatus::Failed);
    assert!(rec.failed_at.is_some() && rec.error.is_some());
    assert!(rec.integrated_fact_ids.is_empty());
    assert_eq!(e.facts(&u), facts_before);
    assert_eq!(e.episodes(&u), episodes_before);
    // No distiller call was made for the failed cycle.
    assert_eq!(prompts(&e, RoleTag::KnowledgeDistiller).len(), 1);
    assert_eq!(prompts(&e, RoleTag::EpisodePredictor).len(), 1 + 3);
}

#[test]
fn distiller_sees_raw_messages_not_the_narrative() {
    let e = engine(vec![ScriptedRule::respond(
        RoleTag::EpisodeGenerator,
        r#"{"title": "Studio news", "narrative": "NARRATIVE-ONLY-MARKER summary."}"#,
    )]);
    session(&e, 0, "RAW-ONLY-MARKER my studio opens on July 20.");
    e.drain(None, Duration::from_secs(10)).unwrap();
    let distiller = prompts(&e, RoleTag::KnowledgeDistiller);
    assert_eq!(distiller.len(), 1);
    assert!(distiller[0].contains("RAW-ONLY-MARKER my studio opens on July 20."));
    assert!(distiller[0].contains("Good to know."));
    assert!(!distiller[0].contains("NARRATIVE-ONLY-MARKER"));
    // the predictor sees only the title and known facts
    let predictor = prompts(&e, RoleTag::EpisodePredictor);
    assert!(predictor[0].contains("Studio news"));
    assert!(!predictor[0].contains("RAW-ONLY-MARKER"));
}

#[test]
fn drain_reports_stuck_cycles() {
    let e = engine(vec![ScriptedRule::respond(
        RoleTag::EpisodePredictor,
        "slow",
    )
    .delayed(1500)]);
    let u = jon();
    let id = session(&e, 0, "Something to learn slowly.");
    match e.drain(Some(&u), Duration::from_millis(100)) {
        Err(EngineError::DrainTimeout { stuck }) => assert_eq!(stuck, vec![id.clone()]),
        other => panic!("expected a drain timeout, got {other:?}"),
    }
    e.drain(Some(&u), Duration::from_secs(10)).unwrap();
    assert!(e.pending_cycles().is_empty());
    let rec = &e.cycle_records(Some(&u))[0];
    assert_eq!(rec.episode_id, id);
    assert_eq!(rec.status, CycleStatus::Integrated);
}
