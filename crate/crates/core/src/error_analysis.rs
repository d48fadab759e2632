//! Concept-level error taxonomy and reproducible error sampling.
//!
//! Each gold concept is either matched, missing, or wrongly categorized;
//! each predicted concept is either matched, spurious, or wrongly
//! categorized. Matching compares normalized concept strings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::inference::{ExtractionResult, Outcome};
use crate::metrics::tokenize;
use crate::schema::{Category, StructuredReport};
use crate::shuffle::{rng_from_seed, shuffle};

/// Token-set Jaccard at or above which an unmatched pair is a near miss.
pub const NEAR_MISS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Missing,
    WronglyCategorized,
    Spurious,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Missing => "missing",
            ErrorKind::WronglyCategorized => "wrongly_categorized",
            ErrorKind::Spurious => "spurious",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub sample_id: String,
    pub kind: ErrorKind,
    /// Where the concept belongs (absent for spurious concepts).
    pub gold_category: Option<Category>,
    /// Where the model put it (absent for missing concepts).
    pub predicted_category: Option<Category>,
    pub value: String,
    /// Closest unmatched counterpart in the same category, for reading only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near_miss: Option<String>,
    /// The predicted value also appears in an in-context example's gold.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub icl_copy: bool,
}

impl ErrorRecord {
    /// Category the record is grouped under in digests.
    pub fn category(&self) -> Category {
        self.gold_category
            .or(self.predicted_category)
            .expect("every record names a category")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleErrors {
    pub sample_id: String,
    pub matched: usize,
    pub gold_concepts: usize,
    pub predicted_concepts: usize,
    pub errors: Vec<ErrorRecord>,
}

impl SampleErrors {
    pub fn count(&self, kind: ErrorKind) -> usize {
        self.errors.iter().filter(|e| e.kind == kind).count()
    }
}

/// Lowercases and collapses whitespace.
pub fn normalize_concept(value: &str) -> String {
    value
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn jaccard(a: &str, b: &str) -> f64 {
    let a: BTreeSet<String> = tokenize(a).into_iter().collect();
    let b: BTreeSet<String> = tokenize(b).into_iter().collect();
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / a.union(&b).count() as f64
}

struct Slot<'a> {
    category: Category,
    value: &'a str,
    key: String,
    used: bool,
}

fn slots(report: &StructuredReport) -> Vec<Slot<'_>> {
    report
        .iter()
        .flat_map(|(category, values)| {
            values.iter().map(move |v| Slot {
                category,
                value: v.as_str(),
                key: normalize_concept(v),
                used: false,
            })
        })
        .collect()
}

/// Classifies every concept of `predicted` against `gold`.
///
/// Same-category matches are taken first, then cross-category matches, both
/// greedily in category order. Leftovers are missing or spurious.
pub fn classify(sample_id: &str, predicted: &StructuredReport, gold: &StructuredReport) -> SampleErrors {
    let mut gold_slots = slots(gold);
    let mut pred_slots = slots(predicted);
    let mut matched = 0;
    for g in gold_slots.iter_mut() {
        if let Some(p) = pred_slots
            .iter_mut()
            .find(|p| !p.used && p.category == g.category && p.key == g.key)
        {
            p.used = true;
            g.used = true;
            matched += 1;
        }
    }

    let mut errors = Vec::new();
    for g in gold_slots.iter_mut().filter(|g| !g.used) {
        if let Some(p) = pred_slots.iter_mut().find(|p| !p.used && p.key == g.key) {
            p.used = true;
            g.used = true;
            errors.push(ErrorRecord {
                sample_id: sample_id.to_string(),
                kind: ErrorKind::WronglyCategorized,
                gold_category: Some(g.category),
                predicted_category: Some(p.category),
                value: p.value.to_string(),
                near_miss: None,
                icl_copy: false,
            });
        }
    }

    let near = |category: Category, value: &str, others: &[Slot<'_>]| {
        others
            .iter()
            .filter(|o| !o.used && o.category == category)
            .map(|o| (jaccard(value, o.value), o.value))
            .filter(|(score, _)| *score >= NEAR_MISS_THRESHOLD)
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, v)| v.to_string())
    };
    for g in gold_slots.iter().filter(|g| !g.used) {
        errors.push(ErrorRecord {
            sample_id: sample_id.to_string(),
            kind: ErrorKind::Missing,
            gold_category: Some(g.category),
            predicted_category: None,
            value: g.value.to_string(),
            near_miss: near(g.category, g.value, &pred_slots),
            icl_copy: false,
        });
    }
    for p in pred_slots.iter().filter(|p| !p.used) {
        errors.push(ErrorRecord {
            sample_id: sample_id.to_string(),
            kind: ErrorKind::Spurious,
            gold_category: None,
            predicted_category: Some(p.category),
            value: p.value.to_string(),
            near_miss: near(p.category, p.value, &gold_slots),
            icl_copy: false,
        });
    }

    SampleErrors {
        sample_id: sample_id.to_string(),
        matched,
        gold_concepts: gold_slots.len(),
        predicted_concepts: pred_slots.len(),
        errors,
    }
}

/// Marks spurious and miscategorized values that occur in any example's gold.
pub fn flag_icl_copies(errors: &mut [ErrorRecord], examples: &[&StructuredReport]) {
    let seen: BTreeSet<String> = examples
        .iter()
        .flat_map(|r| r.iter().flat_map(|(_, vs)| vs.iter().map(|v| normalize_concept(v))))
        .collect();
    for e in errors.iter_mut().filter(|e| e.kind != ErrorKind::Missing) {
        e.icl_copy = seen.contains(&normalize_concept(&e.value));
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzedSample {
    pub sample_id: String,
    /// `parsed`, `parse_failed`, or `failed`.
    pub prediction_status: String,
    #[serde(flatten)]
    pub errors: SampleErrors,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub seed: u64,
    pub requested: usize,
    pub population: usize,
    pub samples: Vec<AnalyzedSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shortfall: Option<String>,
}

fn analyze(result: &ExtractionResult, corpus: &Corpus, icl_source: Option<&Corpus>) -> Option<AnalyzedSample> {
    let gold = &corpus.get(&result.sample_id)?.gold;
    let empty = StructuredReport::new();
    let (status, predicted) = match &result.outcome {
        Outcome::Parsed { report, .. } => ("parsed", report),
        Outcome::ParseFailed { .. } => ("parse_failed", &empty),
        Outcome::Failed { .. } => ("failed", &empty),
    };
    let mut errors = classify(&result.sample_id, predicted, gold);
    if let Some(source) = icl_source {
        let examples: Vec<&StructuredReport> = result
            .example_ids
            .iter()
            .filter_map(|id| source.get(id).map(|s| &s.gold))
            .collect();
        flag_icl_copies(&mut errors.errors, &examples);
    }
    Some(AnalyzedSample {
        sample_id: result.sample_id.clone(),
        prediction_status: status.to_string(),
        errors,
    })
}

/// Draws `n` error-bearing samples reproducibly.
///
/// Candidates are sorted by id and shuffled with `seed`, so the draw does not
/// depend on result order. Failed or unparseable predictions count as empty.
/// Results whose sample is absent from `corpus` are ignored.
pub fn sample_errors(
    results: &[ExtractionResult],
    corpus: &Corpus,
    n: usize,
    seed: u64,
    icl_source: Option<&Corpus>,
) -> ErrorSample {
    let mut candidates: Vec<AnalyzedSample> = results
        .iter()
        .filter_map(|r| analyze(r, corpus, icl_source))
        .filter(|a| !a.errors.errors.is_empty())
        .collect();
    candidates.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    candidates.dedup_by(|a, b| a.sample_id == b.sample_id);
    let population = candidates.len();
    shuffle(&mut candidates, &mut rng_from_seed(seed));
    candidates.truncate(n);
    let shortfall = (population < n).then(|| {
        format!("requested {n} samples with errors but only {population} exist")
    });
    ErrorSample {
        seed,
        requested: n,
        population,
        samples: candidates,
        shortfall,
    }
}

/// Error counts grouped by kind, then category.
pub fn tally(samples: &[AnalyzedSample]) -> BTreeMap<ErrorKind, BTreeMap<Category, usize>> {
    let mut out: BTreeMap<ErrorKind, BTreeMap<Category, usize>> = BTreeMap::new();
    for e in samples.iter().flat_map(|s| &s.errors.errors) {
        *out.entry(e.kind).or_default().entry(e.category()).or_default() += 1;
    }
    out
}

/// Plain-text digest for manual review.
pub fn render_digest(sample: &ErrorSample) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Error sample: {} of {} requested (seed {}, {} samples with errors)",
        sample.samples.len(),
        sample.requested,
        sample.seed,
        sample.population
    );
    if let Some(note) = &sample.shortfall {
        let _ = writeln!(out, "Note: {note}");
    }
    for (kind, by_category) in tally(&sample.samples) {
        let total: usize = by_category.values().sum();
        let _ = writeln!(out, "\n{} ({total})", kind.as_str());
        for (category, count) in by_category {
            let _ = writeln!(out, "  {:<28} {count}", category.as_str());
        }
    }
    for s in &sample.samples {
        let _ = writeln!(out, "\n== {} [{}]", s.sample_id, s.prediction_status);
        for e in &s.errors.errors {
            let place = match (e.gold_category, e.predicted_category) {
                (Some(g), Some(p)) => format!("{} -> {}", g.as_str(), p.as_str()),
                (Some(g), None) => g.as_str().to_string(),
                (None, Some(p)) => p.as_str().to_string(),
                (None, None) => String::new(),
            };
            let _ = write!(out, "  {:<20} {place}: {}", e.kind.as_str(), e.value);
            if let Some(n) = &e.near_miss {
                let _ = write!(out, " (near: {n})");
            }
            if e.icl_copy {
                let _ = write!(out, " [in examples]");
            }
            out.push('\n');
        }
    }
    out
}
