//! Transcript files and streaming them through the engine.

use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use epimem_core::{CycleStatus, Engine, EngineError, Message, UserId};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub messages: Vec<Message>,
}

/// One conversation. `conversation_id` doubles as the memory owner's user id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptFile {
    pub conversation_id: String,
    #[serde(default)]
    pub sessions: Vec<Session>,
}

impl TranscriptFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading transcript {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("invalid transcript {}", path.display()))
    }

    pub fn user_id(&self) -> Result<UserId> {
        Ok(UserId::new(&self.conversation_id)?)
    }

    /// Checks the user id and that messages never go back in time, within
    /// and across sessions.
    pub fn validate(&self) -> Result<()> {
        self.user_id()?;
        let mut last = None;
        for session in &self.sessions {
            for (i, m) in session.messages.iter().enumerate() {
                if let Some(prev) = last {
                    if m.timestamp < prev {
                        bail!(
                            "session {} message {} at {} precedes the previous message",
                            session.session_id,
                            i + 1,
                            m.timestamp
                        );
                    }
                }
                last = Some(m.timestamp);
            }
        }
        Ok(())
    }

    pub fn message_count(&self) -> usize {
        self.sessions.iter().map(|s| s.messages.len()).sum()
    }

    /// All message contents joined as one transcript, for size comparisons.
    pub fn rendered(&self) -> String {
        let all: Vec<Message> = self
            .sessions
            .iter()
            .flat_map(|s| s.messages.iter().cloned())
            .collect();
        epimem_core::model::render_transcript(&all)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub user_id: String,
    pub sessions: usize,
    pub messages: usize,
    pub episodes: usize,
    pub facts: usize,
    pub failed_cycles: usize,
    pub degraded_episodes: usize,
}

#[derive(Debug, thiserror::Error)]
#[error("ingest stopped after {} messages: {source}", report.messages)]
pub struct IngestError {
    /// Counts up to the failure.
    pub report: IngestReport,
    #[source]
    pub source: Box<EngineError>,
}

/// Streams every message through the engine in order, ends each session with
/// a flush, then waits for background learning to finish.
pub fn ingest(
    transcript: &TranscriptFile,
    engine: &Engine,
    drain_timeout: Duration,
) -> Result<IngestReport, IngestError> {
    let user = UserId::new(&transcript.conversation_id).map_err(|e| IngestError {
        report: IngestReport::default(),
        source: Box::new(e.into()),
    })?;
    let episodes_before = engine.episodes(&user).len();
    let facts_before = engine.facts(&user).len();
    let cycles_before = engine.cycle_records(Some(&user)).len();
    let mut report = IngestReport {
        user_id: user.to_string(),
        ..Default::default()
    };

    let fail = |report: &IngestReport, source: EngineError| {
        let mut report = report.clone();
        report.episodes = engine.episodes(&user).len() - episodes_before;
        report.facts = engine.facts(&user).len() - facts_before;
        IngestError {
            report,
            source: Box::new(source),
        }
    };

    for session in &transcript.sessions {
        for message in &session.messages {
            engine
                .append_message(&user, message.clone())
                .map_err(|e| fail(&report, e))?;
            report.messages += 1;
        }
        engine.flush_session(&user).map_err(|e| fail(&report, e))?;
        report.sessions += 1;
    }
    engine
        .drain(Some(&user), drain_timeout)
        .map_err(|e| fail(&report, e))?;

    let episodes = engine.episodes(&user);
    report.episodes = episodes.len() - episodes_before;
    report.degraded_episodes = episodes[episodes_before..]
        .iter()
        .filter(|e| e.degraded)
        .count();
    report.facts = engine.facts(&user).len() - facts_before;
    report.failed_cycles = engine.cycle_records(Some(&user))[cycles_before..]
        .iter()
        .filter(|c| c.status == CycleStatus::Failed)
        .count();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_time_travel_and_bad_ids() {
        let bad_order = r#"{"conversation_id": "c1", "sessions": [
            {"session_id": "s1", "messages": [
                {"role": "user", "content": "later", "timestamp": "2023-06-16T10:00:00Z"},
                {"role": "assistant", "content": "earlier", "timestamp": "2023-06-16T09:00:00Z"}]}]}"#;
        assert!(TranscriptFile::from_json(bad_order).is_err());
        let bad_role = r#"{"conversation_id": "c1", "sessions": [
            {"session_id": "s1", "messages": [
                {"role": "system", "content": "x", "timestamp": "2023-06-16T10:00:00Z"}]}]}"#;
        assert!(TranscriptFile::from_json(bad_role).is_err());
        assert!(
            TranscriptFile::from_json(r#"{"conversation_id": "../x", "sessions": []}"#).is_err()
        );
        let empty =
            TranscriptFile::from_json(r#"{"conversation_id": "c1", "sessions": []}"#).unwrap();
        assert_eq!(empty.message_count(), 0);
    }
}
