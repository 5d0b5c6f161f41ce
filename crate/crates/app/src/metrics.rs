//! Lexical answer-quality metrics.
//!
//! Both metrics share one tokenizer: lowercase, every non-alphanumeric
//! character becomes a space, then split on whitespace.

use std::collections::HashMap;

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut out = HashMap::new();
    for t in tokens {
        *out.entry(t.as_str()).or_insert(0) += 1;
    }
    out
}

/// Tokens of `prediction` also in `gold`, counting each gold token at most as
/// often as it occurs there.
fn clipped_overlap(prediction: &[String], gold: &[String]) -> usize {
    let gold = counts(gold);
    counts(prediction)
        .into_iter()
        .map(|(tok, n)| n.min(gold.get(tok).copied().unwrap_or(0)))
        .sum()
}

/// Harmonic mean of token precision and recall over multiset overlap.
/// Two empty texts score 1; one empty text scores 0.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = tokenize(prediction);
    let g = tokenize(gold);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    // 2PR / (P + R) with P = o/|p| and R = o/|g| reduces to 2o / (|p| + |g|),
    // which avoids rounding in the intermediate ratios.
    let overlap = clipped_overlap(&p, &g);
    2.0 * overlap as f64 / (p.len() + g.len()) as f64
}

/// Clipped unigram precision times the brevity penalty `exp(1 - r/c)` for a
/// candidate shorter than the reference.
pub fn bleu1(prediction: &str, gold: &str) -> f64 {
    let p = tokenize(prediction);
    let g = tokenize(gold);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let precision = clipped_overlap(&p, &g) as f64 / p.len() as f64;
    let (c, r) = (p.len() as f64, g.len() as f64);
    let brevity = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    precision * brevity
}
