//! Batch evaluation: answer each case, score it, aggregate by category.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use epimem_core::llm::{extract_json_object, ChatRequest, ResponseFormat, RoleTag};
use epimem_core::{Engine, UserId};
use serde::{Deserialize, Serialize};

use crate::metrics::{bleu1, token_f1};
use crate::qa::answer;

pub const UNCATEGORIZED: &str = "uncategorized";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub question: String,
    pub gold_answer: String,
    #[serde(default)]
    pub category: Option<String>,
    /// Whose memory to ask. Defaults to the only user in the store.
    #[serde(default)]
    pub user_id: Option<String>,
}

impl EvalCase {
    fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() || self.gold_answer.trim().is_empty() {
            bail!("eval cases need a non-empty question and gold_answer");
        }
        Ok(())
    }
}

pub fn load_cases(path: &Path) -> Result<Vec<EvalCase>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading cases {}", path.display()))?;
    let cases: Vec<EvalCase> =
        serde_json::from_str(&text).with_context(|| format!("parsing cases {}", path.display()))?;
    for (i, case) in cases.iter().enumerate() {
        case.validate().with_context(|| format!("case {}", i + 1))?;
    }
    Ok(cases)
}

/// Optional model-graded score. The template may use `{{question}}`,
/// `{{gold_answer}}` and `{{answer}}`; the judge must reply with a JSON object
/// holding a numeric `score`.
#[derive(Debug, Clone)]
pub struct JudgeTemplate(pub String);

impl JudgeTemplate {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self(std::fs::read_to_string(path).with_context(|| {
            format!("reading judge template {}", path.display())
        })?))
    }

    pub fn render(&self, case: &EvalCase, answer: &str) -> String {
        self.0
            .replace("{{question}}", &case.question)
            .replace("{{gold_answer}}", &case.gold_answer)
            .replace("{{answer}}", answer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub question: String,
    pub gold_answer: String,
    pub category: String,
    pub answer: Option<String>,
    pub f1: f64,
    pub bleu1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub context_tokens: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub cases: usize,
    pub f1: f64,
    pub bleu1: f64,
    /// Mean judge score over the cases that were judged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<f64>,
    pub failed: usize,
}

impl Aggregate {
    fn over<'a>(results: impl Iterator<Item = &'a CaseResult>) -> Self {
        let results: Vec<&CaseResult> = results.collect();
        let n = results.len();
        if n == 0 {
            return Self::default();
        }
        let judged: Vec<f64> = results.iter().filter_map(|r| r.judge).collect();
        Self {
            cases: n,
            f1: results.iter().map(|r| r.f1).sum::<f64>() / n as f64,
            bleu1: results.iter().map(|r| r.bleu1).sum::<f64>() / n as f64,
            judge: (!judged.is_empty()).then(|| judged.iter().sum::<f64>() / judged.len() as f64),
            failed: results.iter().filter(|r| r.error.is_some()).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Aggregate,
    pub categories: BTreeMap<String, Aggregate>,
    pub cases: Vec<CaseResult>,
}

impl EvalReport {
    pub fn from_results(cases: Vec<CaseResult>) -> Self {
        let mut groups: BTreeMap<String, Vec<&CaseResult>> = BTreeMap::new();
        for c in &cases {
            groups.entry(c.category.clone()).or_default().push(c);
        }
        let categories = groups
            .into_iter()
            .map(|(k, v)| (k, Aggregate::over(v.into_iter())))
            .collect();
        Self {
            overall: Aggregate::over(cases.iter()),
            categories,
            cases,
        }
    }

    pub fn to_table(&self) -> String {
        let judged = self.overall.judge.is_some();
        let mut out = format!(
            "{:<24} {:>6} {:>8} {:>8}",
            "category", "cases", "F1", "BLEU-1"
        );
        if judged {
            out.push_str(&format!(" {:>8}", "judge"));
        }
        out.push_str(&format!(" {:>7}\n", "failed"));
        let row = |name: &str, a: &Aggregate| {
            let mut line = format!("{:<24} {:>6} {:>8.4} {:>8.4}", name, a.cases, a.f1, a.bleu1);
            if judged {
                match a.judge {
                    Some(j) => line.push_str(&format!(" {j:>8.4}")),
                    None => line.push_str(&format!(" {:>8}", "-")),
                }
            }
            line.push_str(&format!(" {:>7}\n", a.failed));
            line
        };
        for (name, agg) in &self.categories {
            out.push_str(&row(name, agg));
        }
        out.push_str(&row("overall", &self.overall));
        out
    }
}

fn resolve_user(engine: &Engine, case: &EvalCase) -> Result<UserId> {
    if let Some(id) = &case.user_id {
        return Ok(UserId::new(id)?);
    }
    match engine.users().as_slice() {
        [only] => Ok(only.clone()),
        [] => bail!("the store is empty; give the case a user_id"),
        _ => bail!("the store holds several users; give the case a user_id"),
    }
}

fn judge_score(
    engine: &Engine,
    template: &JudgeTemplate,
    case: &EvalCase,
    answer: &str,
) -> Result<f64> {
    let req = ChatRequest::new(
        RoleTag::Judge,
        "You grade answers against a reference. Reply with JSON {\"score\": number}.",
        template.render(case, answer),
        ResponseFormat::JsonObject,
    );
    let text = engine.gateway().chat(&req)?;
    extract_json_object(&text)
        .and_then(|v| v.get("score").and_then(|s| s.as_f64()))
        .with_context(|| format!("judge reply without a numeric score: {text}"))
}

/// Runs every case. A case whose answer cannot be produced scores 0 and
/// carries the error; the run continues.
pub fn run_eval(
    engine: &Engine,
    cases: &[EvalCase],
    top_k: Option<usize>,
    judge: Option<&JudgeTemplate>,
) -> EvalReport {
    let results = cases
        .iter()
        .map(|case| {
            let category = case
                .category
                .clone()
                .unwrap_or_else(|| UNCATEGORIZED.into());
            let attempt = resolve_user(engine, case).and_then(|user| {
                answer(engine, &user, &case.question, top_k).map_err(anyhow::Error::from)
            });
            match attempt {
                Ok(a) => {
                    let judged = judge.map(|t| judge_score(engine, t, case, &a.answer));
                    let (judge, error) = match judged {
                        Some(Ok(score)) => (Some(score), None),
                        Some(Err(e)) => (None, Some(format!("judge: {e:#}"))),
                        None => (None, None),
                    };
                    CaseResult {
                        question: case.question.clone(),
                        gold_answer: case.gold_answer.clone(),
                        category,
                        f1: token_f1(&a.answer, &case.gold_answer),
                        bleu1: bleu1(&a.answer, &case.gold_answer),
                        answer: Some(a.answer),
                        judge,
                        error,
                        context_tokens: Some(a.context.token_estimate),
                    }
                }
                Err(e) => CaseResult {
                    question: case.question.clone(),
                    gold_answer: case.gold_answer.clone(),
                    category,
                    answer: None,
                    f1: 0.0,
                    bleu1: 0.0,
                    judge: judge.map(|_| 0.0),
                    error: Some(format!("{e:#}")),
                    context_tokens: None,
                },
            }
        })
        .collect();
    EvalReport::from_results(results)
}
