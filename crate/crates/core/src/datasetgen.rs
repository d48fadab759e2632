//! Model-assisted annotation of new reports and manual validation of the
//! resulting gold labels.
//!
//! The workflow is: annotate reports with a fixed set of curated examples,
//! quarantine anything that fails, draw a per-category validation sheet for
//! human judges, then estimate per-category error rates from the judged sheet.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{presence_stats, render_presence_table, Corpus, CorpusError, CorpusSample};
use crate::inference::{run_batch, BatchOptions, ChatClient, InferenceError, Outcome, Setup};
use crate::prompting::DefinitionSet;
use crate::schema::{Category, ClinicalReport};
use crate::shuffle::{derive_seed, rng_from_seed, shuffle};

#[derive(Debug, Error)]
pub enum DatasetGenError {
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {message}")]
    Sheet { path: PathBuf, message: String },
    #[error("{count} validation row(s) have no judgment")]
    UnjudgedRows { count: usize },
    #[error("no curated examples supplied")]
    NoExamples,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quarantined {
    pub sample_id: String,
    pub reason: String,
    /// Model output, when there was one.
    pub raw: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRun {
    pub corpus: Corpus,
    pub quarantined: Vec<Quarantined>,
}

/// Annotates `reports` using the same curated examples in every prompt.
///
/// Unparseable or failed outputs are quarantined with their raw text. An
/// authentication failure or interruption aborts the run.
pub fn generate_annotations(
    client: &ChatClient,
    reports: &[ClinicalReport],
    examples: &[CorpusSample],
    definitions: &DefinitionSet,
    options: &BatchOptions,
) -> Result<AnnotationRun, DatasetGenError> {
    if examples.is_empty() {
        return Err(DatasetGenError::NoExamples);
    }
    let setup = Setup::FixedExamples {
        examples,
        definitions,
    };
    let results = run_batch(client, reports, &setup, options)?;
    let mut samples = Vec::new();
    let mut quarantined = Vec::new();
    for (report, result) in reports.iter().zip(results) {
        match result.outcome {
            Outcome::Parsed { report: gold, .. } => samples.push(CorpusSample {
                report: report.clone(),
                gold,
                source_id: report.id().to_string(),
            }),
            Outcome::ParseFailed { failure } => quarantined.push(Quarantined {
                sample_id: result.sample_id,
                reason: format!("unparseable output: {failure:?}"),
                raw: result.raw_completion,
            }),
            Outcome::Failed { error } => quarantined.push(Quarantined {
                sample_id: result.sample_id,
                reason: error,
                raw: None,
            }),
        }
    }
    Ok(AnnotationRun {
        corpus: Corpus::new(samples)?,
        quarantined,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Judgment {
    Correct,
    Incorrect,
}

/// One row of the validation sheet; `judgment` is blank until reviewed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub sample_id: String,
    pub category: Category,
    pub gold_value: String,
    pub judgment: Option<Judgment>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationSample {
    pub rows: Vec<ValidationRow>,
    /// Categories with fewer eligible samples than requested: (category, available).
    pub shortfalls: Vec<(Category, usize)>,
}

/// Draws up to `per_category` samples in which each category is present.
///
/// Each category gets its own seeded stream over id-sorted candidates, so
/// the draw is independent of corpus order.
pub fn draw_validation_sample(corpus: &Corpus, per_category: usize, seed: u64) -> ValidationSample {
    let mut rows = Vec::new();
    let mut shortfalls = Vec::new();
    for category in Category::ALL {
        let mut candidates: Vec<&CorpusSample> =
            corpus.iter().filter(|s| s.gold.contains(category)).collect();
        candidates.sort_by(|a, b| a.id().cmp(b.id()));
        if candidates.len() < per_category {
            shortfalls.push((category, candidates.len()));
        }
        let mut rng = rng_from_seed(derive_seed(seed, category.index() as u64));
        shuffle(&mut candidates, &mut rng);
        for sample in candidates.into_iter().take(per_category) {
            rows.push(ValidationRow {
                sample_id: sample.id().to_string(),
                category,
                gold_value: sample.gold.joined(category).unwrap_or_default(),
                judgment: None,
            });
        }
    }
    ValidationSample { rows, shortfalls }
}

fn sheet_error(path: &Path, e: impl std::fmt::Display) -> DatasetGenError {
    DatasetGenError::Sheet {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes the sheet as CSV with columns sample_id, category, gold_value, judgment.
pub fn write_sheet(rows: &[ValidationRow], path: &Path) -> Result<(), DatasetGenError> {
    let file = File::create(path).map_err(|e| sheet_error(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    for row in rows {
        writer.serialize(row).map_err(|e| sheet_error(path, e))?;
    }
    writer.flush().map_err(|e| sheet_error(path, e))
}

pub fn read_sheet(path: &Path) -> Result<Vec<ValidationRow>, DatasetGenError> {
    let file = File::open(path).map_err(|e| sheet_error(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| sheet_error(path, format!("row {}: {e}", i + 1))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRate {
    pub category: Category,
    pub judged: usize,
    pub incorrect: usize,
    /// Percentage of judged rows marked incorrect.
    pub percent: f64,
}

/// Per-category error rates from a fully judged sheet, in category order.
pub fn estimate_error_rates(rows: &[ValidationRow]) -> Result<Vec<ErrorRate>, DatasetGenError> {
    let unjudged = rows.iter().filter(|r| r.judgment.is_none()).count();
    if unjudged > 0 {
        return Err(DatasetGenError::UnjudgedRows { count: unjudged });
    }
    Ok(Category::ALL
        .iter()
        .filter_map(|&category| {
            let judged: Vec<_> = rows.iter().filter(|r| r.category == category).collect();
            if judged.is_empty() {
                return None;
            }
            let incorrect = judged
                .iter()
                .filter(|r| r.judgment == Some(Judgment::Incorrect))
                .count();
            Some(ErrorRate {
                category,
                judged: judged.len(),
                incorrect,
                percent: 100.0 * incorrect as f64 / judged.len() as f64,
            })
        })
        .collect())
}

/// Presence and error-rate table for a generated dataset.
pub fn render_dataset_table(corpus: &Corpus, rates: &[ErrorRate]) -> Result<String, DatasetGenError> {
    let stats = presence_stats(corpus)?;
    let pairs: Vec<(Category, f64)> = rates.iter().map(|r| (r.category, r.percent)).collect();
    Ok(render_presence_table(&stats, Some(&pairs)))
}
