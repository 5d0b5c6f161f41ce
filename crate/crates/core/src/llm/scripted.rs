//! Deterministic backends for tests and replays.
//!
//! A script is a JSON document:
//!
//! ```json
//! {
//!   "strict": false,
//!   "embedding_dimension": 8,
//!   "fixed_time": "2025-01-01T00:00:00Z",
//!   "rules": [
//!     {"role": "boundary_detector", "contains": "by the way", "times": 1,
//!      "response": "{\"is_boundary\": true, \"confidence\": 0.9}"},
//!     {"role": "episode_generator", "call_index": 2, "failure": "malformed"}
//!   ]
//! }
//! ```
//!
//! Rules are consulted in declaration order and the first match wins. A rule
//! matches when every matcher it declares holds: `role` (the role tag),
//! `contains` (substring of the user prompt), `call_index` (1-based position
//! among calls for that role, counting retries) and `times` (remaining uses).
//! `failure` injects `timeout`, `malformed` or `transport_error`;
//! `delay_ms` sleeps before answering. Responses may use the placeholders
//! `{{call_index}}` and `{{prompt_chars}}`.
//!
//! Without `strict`, unmatched calls fall back to a fixed per-role default;
//! with it they fail with [`LlmError::Scripting`].

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatBackend, ChatRequest, EmbeddingBackend, RoleTag};
use crate::error::LlmError;

pub const DEFAULT_EMBEDDING_DIMENSION: usize = 8;
pub const MALFORMED_OUTPUT: &str = "<<malformed>> {\"unterminated\": [";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    Timeout,
    Malformed,
    TransportError,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<RoleTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call_index: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<u64>,
    #[serde(default)]
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
}

impl ScriptedRule {
    pub fn respond(role: RoleTag, response: impl Into<String>) -> Self {
        Self {
            role: Some(role),
            response: response.into(),
            ..Default::default()
        }
    }

    pub fn fail(role: RoleTag, failure: FailureMode) -> Self {
        Self {
            role: Some(role),
            failure: Some(failure),
            ..Default::default()
        }
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.contains = Some(needle.into());
        self
    }

    pub fn at_call(mut self, index: u64) -> Self {
        self.call_index = Some(index);
        self
    }

    pub fn times(mut self, n: u64) -> Self {
        self.times = Some(n);
        self
    }

    pub fn delayed(mut self, ms: u64) -> Self {
        self.delay_ms = Some(ms);
        self
    }
}

fn default_dimension() -> usize {
    DEFAULT_EMBEDDING_DIMENSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub strict: bool,
    #[serde(default = "default_dimension")]
    pub embedding_dimension: usize,
    /// Instant reported by the engine clock in scripted runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_time: Option<DateTime<Utc>>,
    #[serde(default)]
    pub rules: Vec<ScriptedRule>,
}

impl Default for Script {
    fn default() -> Self {
        Self {
            strict: false,
            embedding_dimension: DEFAULT_EMBEDDING_DIMENSION,
            fixed_time: None,
            rules: Vec::new(),
        }
    }
}

impl Script {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

#[derive(Debug)]
struct MatchState {
    uses: Vec<u64>,
    calls_per_role: HashMap<RoleTag, u64>,
}

/// Rule-driven chat backend. Matching is serialized so that sequence-position
/// rules replay identically.
#[derive(Debug)]
pub struct ScriptedChat {
    strict: bool,
    rules: Vec<ScriptedRule>,
    state: Mutex<MatchState>,
}

impl ScriptedChat {
    pub fn new(rules: Vec<ScriptedRule>, strict: bool) -> Self {
        let uses = vec![0; rules.len()];
        Self {
            strict,
            rules,
            state: Mutex::new(MatchState {
                uses,
                calls_per_role: HashMap::new(),
            }),
        }
    }

    pub fn from_script(script: &Script) -> Self {
        Self::new(script.rules.clone(), script.strict)
    }

    /// Number of calls seen so far for `role`.
    pub fn calls(&self, role: RoleTag) -> u64 {
        let state = self.state.lock().expect("script state poisoned");
        state.calls_per_role.get(&role).copied().unwrap_or(0)
    }

    fn select(&self, req: &ChatRequest) -> (u64, Option<ScriptedRule>) {
        let mut state = self.state.lock().expect("script state poisoned");
        let counter = state.calls_per_role.entry(req.role_tag).or_insert(0);
        *counter += 1;
        let call_index = *counter;
        let hit = self.rules.iter().enumerate().find(|(i, rule)| {
            rule.role.is_none_or(|r| r == req.role_tag)
                && rule
                    .contains
                    .as_deref()
                    .is_none_or(|needle| req.user_prompt.contains(needle))
                && rule.call_index.is_none_or(|n| n == call_index)
                && rule.times.is_none_or(|t| state.uses[*i] < t)
        });
        match hit {
            Some((i, rule)) => {
                let rule = rule.clone();
                state.uses[i] += 1;
                (call_index, Some(rule))
            }
            None => (call_index, None),
        }
    }
}

fn render_template(template: &str, call_index: u64, req: &ChatRequest) -> String {
    template
        .replace("{{call_index}}", &call_index.to_string())
        .replace(
            "{{prompt_chars}}",
            &req.user_prompt.chars().count().to_string(),
        )
}

fn default_response(role: RoleTag, call_index: u64) -> String {
    match role {
        RoleTag::BoundaryDetector => r#"{"is_boundary": false, "confidence": 0.0}"#.into(),
        RoleTag::EpisodeGenerator => format!(
            r#"{{"title": "Conversation segment {call_index}", "narrative": "The user and the assistant held conversation segment {call_index}."}}"#
        ),
        RoleTag::EpisodePredictor => "No specific expectations about this episode.".into(),
        RoleTag::KnowledgeDistiller => "[]".into(),
        RoleTag::Answerer => "I don't know.".into(),
        RoleTag::Judge => r#"{"score": 0}"#.into(),
    }
}

impl ChatBackend for ScriptedChat {
    fn complete(&self, req: &ChatRequest) -> Result<String, LlmError> {
        let (call_index, rule) = self.select(req);
        let Some(rule) = rule else {
            if self.strict {
                return Err(LlmError::Scripting {
                    role: req.role_tag.to_string(),
                    digest: req.digest(),
                });
            }
            return Ok(default_response(req.role_tag, call_index));
        };
        if let Some(ms) = rule.delay_ms {
            thread::sleep(Duration::from_millis(ms));
        }
        match rule.failure {
            Some(FailureMode::Timeout) => Err(LlmError::Timeout),
            Some(FailureMode::TransportError) => {
                Err(LlmError::Transport("scripted transport failure".into()))
            }
            Some(FailureMode::Malformed) if rule.response.is_empty() => Ok(MALFORMED_OUTPUT.into()),
            _ => Ok(render_template(&rule.response, call_index, req)),
        }
    }
}

/// Deterministic embedder. Each word is feature-hashed into a signed bucket,
/// and a whole-text hash contributes a small dense component so that distinct
/// texts (including word permutations) almost surely differ. The result is a
/// unit vector: its `f32` components are tuned so that the norm computed in
/// `f64` is within 1e-9 of 1. Below about six dimensions the `f32` grid is
/// too coarse for that bound to always be reachable.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dimension: usize,
}

const TEXT_HASH_WEIGHT: f64 = 0.35;

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn vector(&self, text: &str) -> Vec<f32> {
        let dim = self.dimension;
        let mut acc = vec![0.0f64; dim];
        let lowered = text.to_lowercase();
        for word in lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            let h = Sha256::digest(format!("w:{word}").as_bytes());
            let bucket = (u64::from_le_bytes(h[0..8].try_into().unwrap()) % dim as u64) as usize;
            let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        }
        let words_norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if words_norm > 0.0 {
            acc.iter_mut().for_each(|v| *v /= words_norm);
        }
        for (i, slot) in acc.iter_mut().enumerate() {
            let h = Sha256::digest(format!("t:{i}:{text}").as_bytes());
            let unit = u64::from_le_bytes(h[0..8].try_into().unwrap()) as f64 / u64::MAX as f64;
            *slot += TEXT_HASH_WEIGHT * (2.0 * unit - 1.0);
        }
        unit_f32(&acc)
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>, LlmError> {
        if text.trim().is_empty() {
            return Err(LlmError::Precondition(
                "embedding text must not be empty".into(),
            ));
        }
        Ok(self.vector(text))
    }
}

fn sum_sq(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum()
}

/// Normalises `v` and rounds to `f32`, then nudges components by single ulps
/// until the `f64` squared norm is as close to 1 as the grid allows.
fn unit_f32(v: &[f64]) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out: Vec<f32> = v.iter().map(|x| (x / norm) as f32).collect();

    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| out[b].abs().total_cmp(&out[a].abs()).then(a.cmp(&b)));

    // Coarse pass: absorb the residual into components, largest first.
    for &i in &order {
        let x = out[i] as f64;
        if x == 0.0 {
            continue;
        }
        let residual = 1.0 - sum_sq(&out);
        let candidate = (x + residual / (2.0 * x)) as f32;
        let before = out[i];
        out[i] = candidate;
        if (1.0 - sum_sq(&out)).abs() > residual.abs() {
            out[i] = before;
        }
    }

    // Fine pass: single-ulp moves, then opposite moves on a pair of
    // components, until nothing improves. Works on the residual directly.
    let sq = |x: f32| (x as f64) * (x as f64);
    let mut residual = 1.0 - sum_sq(&out);
    // (index, value, optional paired (index, value), resulting error)
    type Move = (usize, f32, Option<(usize, f32)>, f64);
    for _ in 0..256 {
        let mut best: Option<Move> = None;
        let mut best_err = residual.abs();
        for &i in order.iter().rev() {
            let x = out[i];
            if x == 0.0 {
                continue;
            }
            for c in [x.next_up(), x.next_down()] {
                let r = residual - (sq(c) - sq(x));
                if r.abs() < best_err {
                    best_err = r.abs();
                    best = Some((i, c, None, r));
                }
            }
        }
        if best.is_none() && residual.abs() > 1e-12 {
            let moves: Vec<(usize, f32, f64)> = (0..out.len())
                .filter(|&i| out[i] != 0.0)
                .flat_map(|i| {
                    let x = out[i];
                    [x.next_up(), x.next_down()].map(|c| (i, c, sq(c) - sq(x)))
                })
                .collect();
            for &(i, ci, di) in &moves {
                for &(j, cj, dj) in &moves {
                    if i == j {
                        continue;
                    }
                    let r = residual - di - dj;
                    if r.abs() < best_err {
                        best_err = r.abs();
                        best = Some((i, ci, Some((j, cj)), r));
                    }
                }
            }
        }
        match best {
            Some((i, ci, pair, r)) => {
                out[i] = ci;
                if let Some((j, cj)) = pair {
                    out[j] = cj;
                }
                residual = r;
            }
            None => break,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ResponseFormat;

    fn req(role: RoleTag, prompt: &str) -> ChatRequest {
        ChatRequest::new(role, "system", prompt, ResponseFormat::FreeText)
    }

    #[test]
    fn first_matching_rule_wins() {
        let chat = ScriptedChat::new(
            vec![
                ScriptedRule::respond(RoleTag::BoundaryDetector, "A").containing("by the way"),
                ScriptedRule::respond(RoleTag::BoundaryDetector, "B"),
            ],
            true,
        );
        assert_eq!(
            chat.complete(&req(RoleTag::BoundaryDetector, "oh by the way, apples"))
                .unwrap(),
            "A"
        );
        assert_eq!(
            chat.complete(&req(RoleTag::BoundaryDetector, "apples"))
                .unwrap(),
            "B"
        );
    }

    #[test]
    fn strict_mode_names_role_and_digest() {
        let chat = ScriptedChat::new(vec![], true);
        let r = req(RoleTag::EpisodePredictor, "x");
        match chat.complete(&r) {
            Err(LlmError::Scripting { role, digest }) => {
                assert_eq!(role, "episode_predictor");
                assert_eq!(digest, r.digest());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_once_then_next_rule() {
        let chat = ScriptedChat::new(
            vec![
                ScriptedRule::fail(RoleTag::EpisodeGenerator, FailureMode::Malformed).times(1),
                ScriptedRule::respond(RoleTag::EpisodeGenerator, "{\"title\":\"t\"}"),
            ],
            true,
        );
        let r = req(RoleTag::EpisodeGenerator, "x");
        assert_eq!(chat.complete(&r).unwrap(), MALFORMED_OUTPUT);
        assert_eq!(chat.complete(&r).unwrap(), "{\"title\":\"t\"}");
    }

    #[test]
    fn call_index_counts_per_role() {
        let chat = ScriptedChat::new(
            vec![ScriptedRule::respond(RoleTag::Answerer, "second").at_call(2)],
            false,
        );
        let a = req(RoleTag::Answerer, "q");
        let other = req(RoleTag::Judge, "q");
        assert_eq!(chat.complete(&a).unwrap(), "I don't know.");
        chat.complete(&other).unwrap();
        assert_eq!(chat.complete(&a).unwrap(), "second");
        assert_eq!(chat.calls(RoleTag::Answerer), 2);
    }

    #[test]
    fn failure_modes() {
        let chat = ScriptedChat::new(
            vec![
                ScriptedRule::fail(RoleTag::Judge, FailureMode::Timeout).at_call(1),
                ScriptedRule::fail(RoleTag::Judge, FailureMode::TransportError).at_call(2),
            ],
            true,
        );
        let r = req(RoleTag::Judge, "q");
        assert!(matches!(chat.complete(&r), Err(LlmError::Timeout)));
        assert!(matches!(chat.complete(&r), Err(LlmError::Transport(_))));
    }

    #[test]
    fn templates_expand() {
        let chat = ScriptedChat::new(
            vec![ScriptedRule::respond(
                RoleTag::Answerer,
                "n={{call_index}} len={{prompt_chars}}",
            )],
            true,
        );
        assert_eq!(
            chat.complete(&req(RoleTag::Answerer, "abcd")).unwrap(),
            "n=1 len=4"
        );
    }

    #[test]
    fn script_json_parses() {
        let script = Script::from_json(
            r#"{"strict": true, "rules": [{"role": "boundary_detector", "contains": "by the way", "times": 1, "response": "{}"}]}"#,
        )
        .unwrap();
        assert!(script.strict);
        assert_eq!(script.embedding_dimension, 8);
        assert_eq!(script.rules[0].times, Some(1));
        assert!(Script::from_json(r#"{"rules": [{"bogus": 1}]}"#).is_err());
    }

    #[test]
    fn embeddings_are_deterministic_unit_vectors() {
        let e = HashEmbedder::new(8);
        let a = e.embed("Apple tasting plan").unwrap();
        assert_eq!(a, e.embed("Apple tasting plan").unwrap());
        assert_eq!(a.len(), 8);
        assert!((sum_sq(&a).sqrt() - 1.0).abs() <= 1e-9);
        assert_ne!(a, e.embed("plan tasting Apple").unwrap());
        assert!(e.embed("   ").is_err());
    }

    #[test]
    fn unit_norm_holds_across_many_texts_and_dimensions() {
        for (dim, texts) in [(8usize, 3000), (16, 1000), (64, 500), (384, 100)] {
            let e = HashEmbedder::new(dim);
            for i in 0..texts {
                let v = e.vector(&format!("sample text number {i} about topic {}", i % 7));
                let err = (sum_sq(&v).sqrt() - 1.0).abs();
                assert!(err <= 1e-9, "dim {dim} text {i}: |norm-1| = {err:e}");
            }
        }
    }

    #[test]
    fn shared_words_raise_similarity() {
        let e = HashEmbedder::new(64);
        let dot = |a: &[f32], b: &[f32]| -> f64 {
            a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
        };
        let a = e.vector("Jon was mentored on June 15, 2023");
        let b = e.vector("Jon was mentored in June");
        let c = e.vector("Quarterly tax forms arrived");
        assert!(dot(&a, &b) > dot(&a, &c));
    }
}
