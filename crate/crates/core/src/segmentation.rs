//! Per-user message buffering and episode boundary detection.
//!
//! Each arriving message is shown to the boundary detector together with the
//! buffered conversation. A segment is emitted when the detector reports a
//! boundary with confidence strictly above the threshold, or when the buffer
//! (counting the arriving message) reaches its capacity.
//!
//! On a semantic boundary the buffered messages form the segment and the new
//! message opens the next buffer. On a capacity flush the arriving message is
//! included in the segment and the next buffer starts empty.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{LlmError, ModelError};
use crate::llm::{extract_json_object, ChatRequest, Gateway, ResponseFormat, RoleTag};
use crate::model::{BoundaryDecision, Clock, EngineConfig, Message, MessageBuffer, UserId};
use crate::prompts;
use crate::tokens::{CharsPerToken, TokenEstimator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerCause {
    SemanticBoundary,
    BufferFull,
    SessionEnd,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationOutcome {
    pub triggered: bool,
    pub segment: Option<Vec<Message>>,
    pub decision: BoundaryDecision,
    pub trigger_cause: TriggerCause,
    /// The detector output could not be parsed and the fallback was used.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub parse_failed: bool,
    /// The detector confidence was outside [0, 1] and got clamped.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clamped: bool,
}

impl SegmentationOutcome {
    fn idle(decision: BoundaryDecision) -> Self {
        Self {
            triggered: false,
            segment: None,
            decision,
            trigger_cause: TriggerCause::None,
            parse_failed: false,
            clamped: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorOutput {
    pub decision: BoundaryDecision,
    pub clamped: bool,
    pub parse_failed: bool,
}

/// Trigger rule: `(b && c > threshold) || len >= capacity`. A full buffer
/// takes precedence as the reported cause. Confidence is ignored when the
/// detector says "no boundary".
pub fn should_trigger(
    decision: &BoundaryDecision,
    buffer_len: usize,
    cfg: &EngineConfig,
) -> (bool, TriggerCause) {
    if buffer_len >= cfg.max_buffer_size {
        (true, TriggerCause::BufferFull)
    } else if decision.is_boundary && decision.confidence > cfg.boundary_confidence_threshold {
        (true, TriggerCause::SemanticBoundary)
    } else {
        (false, TriggerCause::None)
    }
}

/// Parses `{"is_boundary": bool, "confidence": number}` out of detector output.
pub fn parse_boundary(text: &str) -> Option<(bool, f64)> {
    let value = extract_json_object(text)?;
    let is_boundary = value.get("is_boundary")?.as_bool()?;
    let confidence = value.get("confidence")?.as_f64()?;
    Some((is_boundary, confidence))
}

/// Renders the detector prompt body. When the whole buffer would exceed the
/// token budget only the most recent messages are kept.
pub fn render_detector_prompt(
    new_message: &Message,
    buffer: &[Message],
    cfg: &EngineConfig,
) -> String {
    let full = prompts::boundary_user(new_message, buffer, 0);
    let estimator = CharsPerToken::default();
    if estimator.estimate(prompts::BOUNDARY_SYSTEM) + estimator.estimate(&full)
        <= cfg.detector_token_budget
        || buffer.len() <= cfg.detector_recent_messages
    {
        return full;
    }
    let keep = cfg.detector_recent_messages;
    let omitted = buffer.len() - keep;
    prompts::boundary_user(new_message, &buffer[omitted..], omitted)
}

/// Asks the detector whether `new_message` opens a new episode.
///
/// An empty buffer short-circuits to "no boundary" without a provider call.
/// Unparseable output is retried once, then degrades to "no boundary".
pub fn detect_boundary(
    new_message: &Message,
    buffer: &[Message],
    gateway: &Gateway,
    cfg: &EngineConfig,
) -> Result<DetectorOutput, LlmError> {
    if buffer.is_empty() {
        return Ok(DetectorOutput {
            decision: BoundaryDecision::NONE,
            clamped: false,
            parse_failed: false,
        });
    }
    let req = ChatRequest::new(
        RoleTag::BoundaryDetector,
        prompts::BOUNDARY_SYSTEM,
        render_detector_prompt(new_message, buffer, cfg),
        ResponseFormat::JsonObject,
    );
    for _ in 0..2 {
        let text = gateway.chat(&req)?;
        if let Some((is_boundary, confidence)) = parse_boundary(&text) {
            let (decision, clamped) = BoundaryDecision::clamped(is_boundary, confidence);
            if clamped {
                tracing::warn!(confidence, "boundary confidence outside [0, 1], clamped");
            }
            return Ok(DetectorOutput {
                decision,
                clamped,
                parse_failed: false,
            });
        }
        tracing::warn!(response = %text, "unparseable boundary detector output");
    }
    Ok(DetectorOutput {
        decision: BoundaryDecision::NONE,
        clamped: false,
        parse_failed: true,
    })
}

/// Errors from [`Segmenter::append_message`].
#[derive(Debug, thiserror::Error)]
pub enum SegmentError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Owns the live buffers. Appends for one user are serialized by that
/// user's lock; different users proceed independently.
pub struct Segmenter {
    clock: Arc<dyn Clock>,
    buffers: Mutex<HashMap<UserId, Arc<Mutex<MessageBuffer>>>>,
}

impl std::fmt::Debug for Segmenter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Segmenter").finish_non_exhaustive()
    }
}

impl Segmenter {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            clock,
            buffers: Mutex::new(HashMap::new()),
        }
    }

    fn slot(&self, user: &UserId) -> Arc<Mutex<MessageBuffer>> {
        let mut buffers = self.buffers.lock().expect("buffer map poisoned");
        buffers
            .entry(user.clone())
            .or_insert_with(|| {
                Arc::new(Mutex::new(MessageBuffer::new(
                    user.clone(),
                    self.clock.now(),
                )))
            })
            .clone()
    }

    pub fn append_message(
        &self,
        user: &UserId,
        message: Message,
        cfg: &EngineConfig,
        gateway: &Gateway,
    ) -> Result<SegmentationOutcome, SegmentError> {
        self.append_with(user, message, cfg, gateway, |_| Ok::<_, SegmentError>(()))
            .map(|(outcome, ())| outcome)
    }

    /// Appends `message` and runs `handoff` on the outcome while still holding
    /// the user's lock. The buffer change is committed only if both the
    /// detector call and `handoff` succeed.
    pub fn append_with<T, E>(
        &self,
        user: &UserId,
        message: Message,
        cfg: &EngineConfig,
        gateway: &Gateway,
        handoff: impl FnOnce(&SegmentationOutcome) -> Result<T, E>,
    ) -> Result<(SegmentationOutcome, T), E>
    where
        E: From<LlmError> + From<ModelError>,
    {
        let slot = self.slot(user);
        let mut buffer = slot.lock().expect("buffer poisoned");
        if let Some(last) = buffer.messages.last() {
            if message.timestamp < last.timestamp {
                return Err(ModelError::OutOfRange {
                    field: "timestamp",
                    detail: format!(
                        "{} precedes the last buffered message at {}",
                        message.timestamp, last.timestamp
                    ),
                }
                .into());
            }
        }

        let detected = detect_boundary(&message, &buffer.messages, gateway, cfg)?;
        let (_, cause) = should_trigger(&detected.decision, buffer.len() + 1, cfg);

        let (segment, next) = match cause {
            TriggerCause::BufferFull => {
                let mut segment = buffer.messages.clone();
                segment.push(message);
                (Some(segment), Vec::new())
            }
            TriggerCause::SemanticBoundary => (Some(buffer.messages.clone()), vec![message]),
            _ => {
                let mut next = buffer.messages.clone();
                next.push(message);
                (None, next)
            }
        };
        let outcome = SegmentationOutcome {
            triggered: segment.is_some(),
            segment,
            decision: detected.decision,
            trigger_cause: cause,
            parse_failed: detected.parse_failed,
            clamped: detected.clamped,
        };

        let value = handoff(&outcome)?;
        if outcome.triggered {
            buffer.created_at = self.clock.now();
        }
        buffer.messages = next;
        Ok((outcome, value))
    }

    /// Emits any buffered messages as a segment (end of session).
    pub fn flush_session(&self, user: &UserId) -> SegmentationOutcome {
        self.flush_with(user, |_| Ok::<_, ModelError>(()))
            .map(|(o, ())| o)
            .expect("infallible handoff")
    }

    pub fn flush_with<T, E>(
        &self,
        user: &UserId,
        handoff: impl FnOnce(&SegmentationOutcome) -> Result<T, E>,
    ) -> Result<(SegmentationOutcome, T), E> {
        let slot = self.slot(user);
        let mut buffer = slot.lock().expect("buffer poisoned");
        let outcome = if buffer.is_empty() {
            SegmentationOutcome::idle(BoundaryDecision::NONE)
        } else {
            SegmentationOutcome {
                triggered: true,
                segment: Some(buffer.messages.clone()),
                decision: BoundaryDecision::NONE,
                trigger_cause: TriggerCause::SessionEnd,
                parse_failed: false,
                clamped: false,
            }
        };
        let value = handoff(&outcome)?;
        if outcome.triggered {
            buffer.messages.clear();
            buffer.created_at = self.clock.now();
        }
        Ok((outcome, value))
    }

    pub fn buffer(&self, user: &UserId) -> Vec<Message> {
        let buffers = self.buffers.lock().expect("buffer map poisoned");
        buffers
            .get(user)
            .map(|slot| slot.lock().expect("buffer poisoned").messages.clone())
            .unwrap_or_default()
    }

    /// Users that currently hold a non-empty buffer.
    pub fn active_users(&self) -> Vec<UserId> {
        let buffers = self.buffers.lock().expect("buffer map poisoned");
        let mut users: Vec<UserId> = buffers
            .iter()
            .filter(|(_, slot)| !slot.lock().expect("buffer poisoned").is_empty())
            .map(|(u, _)| u.clone())
            .collect();
        users.sort();
        users
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::scripted::{FailureMode, HashEmbedder, ScriptedChat, ScriptedRule};
    use crate::llm::{CallLog, RetryPolicy};
    use crate::model::{FixedClock, Role};
    use chrono::{DateTime, Duration, Utc};

    fn t0() -> DateTime<Utc> {
        "2023-06-15T10:00:00Z".parse().unwrap()
    }

    fn msg(i: usize) -> Message {
        Message::new(
            Role::User,
            format!("message {i}"),
            t0() + Duration::minutes(i as i64),
        )
        .unwrap()
    }

    fn gateway(rules: Vec<ScriptedRule>) -> Gateway {
        Gateway::new(
            Arc::new(ScriptedChat::new(rules, false)),
            Arc::new(HashEmbedder::new(8)),
        )
        .with_retry(RetryPolicy::immediate())
        .with_call_log(CallLog::new(true, 1000))
    }

    fn segmenter() -> Segmenter {
        Segmenter::new(Arc::new(FixedClock(t0())))
    }

    fn user() -> UserId {
        UserId::new("u1").unwrap()
    }

    fn decision(b: bool, c: f64) -> BoundaryDecision {
        BoundaryDecision {
            is_boundary: b,
            confidence: c,
        }
    }

    #[test]
    fn trigger_examples() {
        let cfg = EngineConfig::default();
        assert_eq!(
            should_trigger(&decision(true, 0.8), 5, &cfg),
            (true, TriggerCause::SemanticBoundary)
        );
        assert_eq!(
            should_trigger(&decision(true, 0.7), 5, &cfg),
            (false, TriggerCause::None)
        );
        assert_eq!(
            should_trigger(&decision(false, 0.99), 25, &cfg),
            (true, TriggerCause::BufferFull)
        );
        assert_eq!(
            should_trigger(&decision(false, 0.0), 1, &cfg),
            (false, TriggerCause::None)
        );
        assert_eq!(
            should_trigger(&decision(true, 0.9), 25, &cfg),
            (true, TriggerCause::BufferFull)
        );
    }

    #[test]
    fn trigger_truth_table() {
        let cfg = EngineConfig::default();
        for b in [true, false] {
            for c in [0.0, 0.69, 0.7, 0.71, 1.0] {
                for len in [0usize, 1, 24, 25, 26] {
                    let expected = (b && c > 0.7) || len >= 25;
                    let (fired, cause) = should_trigger(&decision(b, c), len, &cfg);
                    assert_eq!(fired, expected, "b={b} c={c} len={len}");
                    assert_eq!(cause == TriggerCause::None, !fired);
                }
            }
        }
    }

    #[test]
    fn empty_buffer_skips_the_provider() {
        let gw = gateway(vec![]);
        let out = detect_boundary(&msg(1), &[], &gw, &EngineConfig::default()).unwrap();
        assert_eq!(out.decision, BoundaryDecision::NONE);
        assert!(gw.call_log().records().is_empty());
    }

    #[test]
    fn scripted_decision_is_echoed_and_clamped() {
        let gw = gateway(vec![
            ScriptedRule::respond(
                RoleTag::BoundaryDetector,
                r#"{"is_boundary": true, "confidence": 0.9}"#,
            )
            .at_call(1),
            ScriptedRule::respond(
                RoleTag::BoundaryDetector,
                r#"{"is_boundary": true, "confidence": 1.7}"#,
            )
            .at_call(2),
        ]);
        let cfg = EngineConfig::default();
        let out = detect_boundary(&msg(2), &[msg(1)], &gw, &cfg).unwrap();
        assert_eq!(out.decision, decision(true, 0.9));
        let out = detect_boundary(&msg(2), &[msg(1)], &gw, &cfg).unwrap();
        assert_eq!(out.decision, decision(true, 1.0));
        assert!(out.clamped);
    }

    #[test]
    fn unparseable_output_retries_once_then_falls_back() {
        let gw = gateway(vec![ScriptedRule::fail(
            RoleTag::BoundaryDetector,
            FailureMode::Malformed,
        )]);
        let out = detect_boundary(&msg(2), &[msg(1)], &gw, &EngineConfig::default()).unwrap();
        assert_eq!(out.decision, BoundaryDecision::NONE);
        assert!(out.parse_failed);
        assert_eq!(gw.call_log().records().len(), 2);
    }

    #[test]
    fn malformed_then_valid_succeeds_on_retry() {
        let gw = gateway(vec![
            ScriptedRule::fail(RoleTag::BoundaryDetector, FailureMode::Malformed).times(1),
            ScriptedRule::respond(
                RoleTag::BoundaryDetector,
                r#"{"is_boundary": true, "confidence": 0.8}"#,
            ),
        ]);
        let out = detect_boundary(&msg(2), &[msg(1)], &gw, &EngineConfig::default()).unwrap();
        assert_eq!(out.decision, decision(true, 0.8));
        assert!(!out.parse_failed);
    }

    #[test]
    fn semantic_boundary_moves_new_message_to_next_buffer() {
        let seg = segmenter();
        let cfg = EngineConfig::default();
        let gw = gateway(vec![ScriptedRule::respond(
            RoleTag::BoundaryDetector,
            r#"{"is_boundary": true, "confidence": 0.9}"#,
        )
        .containing("message 6")
        .times(1)]);
        for i in 1..=5 {
            let out = seg.append_message(&user(), msg(i), &cfg, &gw).unwrap();
            assert!(!out.triggered);
        }
        let out = seg.append_message(&user(), msg(6), &cfg, &gw).unwrap();
        assert_eq!(out.trigger_cause, TriggerCause::SemanticBoundary);
        assert_eq!(out.segment.unwrap(), (1..=5).map(msg).collect::<Vec<_>>());
        assert_eq!(seg.buffer(&user()), vec![msg(6)]);
    }

    #[test]
    fn full_buffer_flush_includes_arriving_message() {
        let seg = segmenter();
        let cfg = EngineConfig::default();
        let gw = gateway(vec![ScriptedRule::respond(
            RoleTag::BoundaryDetector,
            r#"{"is_boundary": false, "confidence": 0.1}"#,
        )]);
        for i in 1..=24 {
            assert!(
                !seg.append_message(&user(), msg(i), &cfg, &gw)
                    .unwrap()
                    .triggered
            );
        }
        let out = seg.append_message(&user(), msg(25), &cfg, &gw).unwrap();
        assert_eq!(out.trigger_cause, TriggerCause::BufferFull);
        assert_eq!(out.segment.unwrap(), (1..=25).map(msg).collect::<Vec<_>>());
        assert!(seg.buffer(&user()).is_empty());
    }

    #[test]
    fn first_message_just_fills_the_buffer() {
        let seg = segmenter();
        let gw = gateway(vec![]);
        let out = seg
            .append_message(&user(), msg(1), &EngineConfig::default(), &gw)
            .unwrap();
        assert!(!out.triggered);
        assert_eq!(out.trigger_cause, TriggerCause::None);
        assert_eq!(seg.buffer(&user()), vec![msg(1)]);
    }

    #[test]
    fn provider_error_leaves_buffer_unchanged() {
        let seg = segmenter();
        let cfg = EngineConfig::default();
        let gw = gateway(vec![ScriptedRule::fail(
            RoleTag::BoundaryDetector,
            FailureMode::TransportError,
        )]);
        seg.append_message(&user(), msg(1), &cfg, &gw).unwrap();
        assert!(seg.append_message(&user(), msg(2), &cfg, &gw).is_err());
        assert_eq!(seg.buffer(&user()), vec![msg(1)]);
    }

    #[test]
    fn handoff_failure_rolls_back() {
        let seg = segmenter();
        let cfg = EngineConfig {
            max_buffer_size: 2,
            ..Default::default()
        };
        let gw = gateway(vec![]);
        seg.append_message(&user(), msg(1), &cfg, &gw).unwrap();
        let res = seg.append_with(&user(), msg(2), &cfg, &gw, |o| {
            assert!(o.triggered);
            Err::<(), SegmentError>(ModelError::Empty("title").into())
        });
        assert!(res.is_err());
        assert_eq!(seg.buffer(&user()), vec![msg(1)]);
    }

    #[test]
    fn out_of_order_timestamp_rejected() {
        let seg = segmenter();
        let gw = gateway(vec![]);
        let cfg = EngineConfig::default();
        seg.append_message(&user(), msg(5), &cfg, &gw).unwrap();
        assert!(matches!(
            seg.append_message(&user(), msg(4), &cfg, &gw),
            Err(SegmentError::Model(_))
        ));
    }

    #[test]
    fn flush_session_semantics() {
        let seg = segmenter();
        let gw = gateway(vec![]);
        let cfg = EngineConfig::default();
        seg.append_message(&user(), msg(1), &cfg, &gw).unwrap();
        seg.append_message(&user(), msg(2), &cfg, &gw).unwrap();
        let out = seg.flush_session(&user());
        assert_eq!(out.trigger_cause, TriggerCause::SessionEnd);
        assert_eq!(out.segment.unwrap(), vec![msg(1), msg(2)]);
        let again = seg.flush_session(&user());
        assert!(!again.triggered);
        assert!(again.segment.is_none());
        assert!(!seg.flush_session(&UserId::new("nobody").unwrap()).triggered);
    }

    #[test]
    fn long_buffers_are_truncated_in_the_detector_prompt() {
        let cfg = EngineConfig {
            detector_token_budget: 50,
            detector_recent_messages: 3,
            ..Default::default()
        };
        let buffer: Vec<Message> = (1..=10).map(msg).collect();
        let prompt = render_detector_prompt(&msg(11), &buffer, &cfg);
        assert!(prompt.contains("[... 7 earlier messages omitted ...]"));
        assert!(!prompt.contains("message 7\n"));
        assert!(prompt.contains("message 8"));
        assert!(prompt.ends_with("message 11"));

        let roomy = render_detector_prompt(&msg(11), &buffer, &EngineConfig::default());
        assert!(!roomy.contains("omitted"));
        assert!(roomy.contains("message 1\n"));
    }
}
