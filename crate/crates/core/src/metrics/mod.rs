//! Overlap, embedding and entity metrics.
//!
//! Every metric returns a [`Prf`]. A zero denominator makes the affected
//! component zero, and F1 is zero whenever precision and recall are both zero.

mod evaluate;

pub use evaluate::{
    aggregate, evaluate_pair, render_comparison, Averaging, CategoryAggregate, CategoryScore,
    CategoryStatus, Cell, EvalDeps, EvalPolicy, EvaluationReport, MacroRow, MeanPrf, OneSided,
    SampleScores, SkipReason, REPORT_FORMAT_VERSION, TABLE_COLUMNS,
};

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding matrix is empty")]
    EmptyMatrix,
    #[error("no cell was scored")]
    NothingScored,
}

/// Precision, recall and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }

    /// `matched / predicted` and `matched / reference`, zero when a side is empty.
    pub fn from_counts(matched: usize, predicted: usize, reference: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Self::new(ratio(matched, predicted), ratio(matched, reference))
    }
}

/// Lowercases and splits on maximal runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        let key: Vec<&str> = window.iter().map(AsRef::as_ref).collect();
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

/// ROUGE-N with clipped n-gram counts.
pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> Prf {
    assert!(n >= 1, "n-gram order must be at least 1");
    let cand = ngram_counts(candidate, n);
    let refr = ngram_counts(reference, n);
    let overlap: usize = cand
        .iter()
        .map(|(gram, &c)| c.min(refr.get(gram).copied().unwrap_or(0)))
        .sum();
    let cand_total = candidate.len().saturating_sub(n - 1);
    let ref_total = reference.len().saturating_sub(n - 1);
    Prf::from_counts(overlap, cand_total, ref_total)
}

/// Length of the longest common subsequence, O(|a|·|b|) time, O(|b|) space.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Prf {
    let l = lcs_len(candidate, reference);
    Prf::from_counts(l, candidate.len(), reference.len())
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Greedy-matching BERTScore without IDF weighting or baseline rescaling.
///
/// Each candidate row is matched to its most similar reference row (precision)
/// and vice versa (recall). A best match with negative cosine counts as 0.
pub fn bert_score(candidate: &[Vec<f32>], reference: &[Vec<f32>]) -> Result<Prf, MetricError> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(MetricError::EmptyMatrix);
    }
    let dim = candidate[0].len();
    if dim == 0 {
        return Err(MetricError::EmptyMatrix);
    }
    if let Some(bad) = candidate.iter().chain(reference).find(|r| r.len() != dim) {
        return Err(MetricError::DimensionMismatch(dim, bad.len()));
    }
    let sims: Vec<Vec<f64>> = candidate
        .iter()
        .map(|c| reference.iter().map(|r| cosine(c, r)).collect())
        .collect();
    let precision = sims
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0))
        .sum::<f64>()
        / candidate.len() as f64;
    let recall = (0..reference.len())
        .map(|j| sims.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max).max(0.0))
        .sum::<f64>()
        / reference.len() as f64;
    Ok(Prf::new(precision, recall))
}

/// Lowercase, trim, collapse internal whitespace.
pub fn normalize_entity(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Set-based entity P/R/F1. `None` when both sets are empty; the caller skips
/// such cells instead of scoring them.
pub fn entity_prf(predicted: &BTreeSet<String>, gold: &BTreeSet<String>) -> Option<Prf> {
    if predicted.is_empty() && gold.is_empty() {
        return None;
    }
    let matched = predicted.intersection(gold).count();
    Some(Prf::from_counts(matched, predicted.len(), gold.len()))
}
