//! Subcommands other than `run`: corpus tooling, error analysis, the
//! annotation workflow and report rendering.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clinex_core::corpus::{
    load_corpus, load_reports, presence_stats, render_presence_table, write_corpus, Corpus,
    CorpusFormat, LoadOptions,
};
use clinex_core::datasetgen::{
    draw_validation_sample, estimate_error_rates, generate_annotations, read_sheet,
    render_dataset_table, write_sheet, AnnotationRun, ErrorRate,
};
use clinex_core::error_analysis::{render_digest, sample_errors, ErrorSample};
use clinex_core::inference::{read_results, BatchOptions, ChatClient, ChatTransport};
use clinex_core::metrics::{render_comparison, EvaluationReport, REPORT_FORMAT_VERSION};
use clinex_core::prompting::{fine_tuning_record, DefinitionSet};
use serde::Deserialize;
use serde_json::Value;

use crate::config::{DefinitionsConfig, EndpointConfig};
use crate::experiment::REPORT_JSON;
use crate::RunError;

fn failed(context: impl std::fmt::Display, e: impl std::fmt::Display) -> RunError {
    RunError::Failed(format!("{context}: {e}"))
}

fn lenient(format: Option<CorpusFormat>) -> LoadOptions {
    LoadOptions {
        format,
        fail_fast: false,
        ..Default::default()
    }
}

pub struct IngestSummary {
    pub written: usize,
    pub rejected: Vec<(usize, String)>,
    pub filtered_language: usize,
}

/// Normalizes a source file into the canonical corpus layout.
pub fn ingest(input: &Path, output: &Path, options: &LoadOptions) -> Result<IngestSummary, RunError> {
    let loaded = load_corpus(input, options).map_err(|e| failed(input.display(), e))?;
    write_corpus(&loaded.corpus, output, CorpusFormat::Jsonl).map_err(|e| failed(output.display(), e))?;
    Ok(IngestSummary {
        written: loaded.corpus.len(),
        rejected: loaded.rejected.into_iter().map(|r| (r.index, r.reason)).collect(),
        filtered_language: loaded.filtered_language,
    })
}

/// Presence table for a corpus, optionally with error rates from a judged sheet.
pub fn stats(corpus: &Path, format: Option<CorpusFormat>, sheet: Option<&Path>) -> Result<String, RunError> {
    let corpus = load_corpus(corpus, &lenient(format))
        .map_err(|e| failed(corpus.display(), e))?
        .corpus;
    match sheet {
        Some(sheet) => rates_table(&corpus, sheet).map(|(table, _)| table),
        None => {
            let stats = presence_stats(&corpus).map_err(|e| failed("stats", e))?;
            Ok(render_presence_table(&stats, None))
        }
    }
}

fn rates_table(corpus: &Corpus, sheet: &Path) -> Result<(String, Vec<ErrorRate>), RunError> {
    let rows = read_sheet(sheet).map_err(|e| failed("sheet", e))?;
    let rates = estimate_error_rates(&rows).map_err(|e| failed("sheet", e))?;
    let table = render_dataset_table(corpus, &rates).map_err(|e| failed("table", e))?;
    Ok((table, rates))
}

/// Error-rate table from a judged sheet; with `corpus`, presence is included.
pub fn rates(sheet: &Path, corpus: Option<&Path>) -> Result<String, RunError> {
    if let Some(path) = corpus {
        let corpus = load_corpus(path, &lenient(None))
            .map_err(|e| failed(path.display(), e))?
            .corpus;
        return rates_table(&corpus, sheet).map(|(table, _)| table);
    }
    let rows = read_sheet(sheet).map_err(|e| failed("sheet", e))?;
    let rates = estimate_error_rates(&rows).map_err(|e| failed("sheet", e))?;
    let mut out = format!("{:<32} | {:>6} | {:>9} | {:>14}\n", "Category", "Judged", "Incorrect", "Error Rate (%)");
    out.push_str(&"-".repeat(70));
    out.push('\n');
    for r in rates {
        let label = format!("C{}: {}", r.category.index() + 1, r.category);
        out.push_str(&format!("{label:<32} | {:>6} | {:>9} | {:>14.2}\n", r.judged, r.incorrect, r.percent));
    }
    Ok(out)
}

/// Draws a validation sheet and writes it as CSV. Returns shortfall notes.
pub fn sheet(corpus: &Path, per_category: usize, seed: u64, output: &Path) -> Result<Vec<String>, RunError> {
    let corpus = load_corpus(corpus, &lenient(None))
        .map_err(|e| failed(corpus.display(), e))?
        .corpus;
    let draw = draw_validation_sample(&corpus, per_category, seed);
    write_sheet(&draw.rows, output).map_err(|e| failed("sheet", e))?;
    Ok(draw
        .shortfalls
        .iter()
        .map(|(c, n)| format!("{c}: only {n} sample(s) available"))
        .collect())
}

/// Writes chat-format fine-tuning records (minimal prompt plus gold answer).
pub fn sft_data(corpus: &Path, output: &Path) -> Result<usize, RunError> {
    let corpus = load_corpus(corpus, &lenient(None))
        .map_err(|e| failed(corpus.display(), e))?
        .corpus;
    let mut out = String::new();
    for sample in &corpus {
        out.push_str(&serde_json::to_string(&fine_tuning_record(sample)).map_err(|e| failed("record", e))?);
        out.push('\n');
    }
    fs::write(output, out).map_err(|e| failed(output.display(), e))?;
    Ok(corpus.len())
}

/// Settings read by `generate annotate`; other keys in the file are ignored.
#[derive(Debug, Deserialize)]
pub struct AnnotationConfig {
    pub endpoint: EndpointConfig,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub definitions: DefinitionsConfig,
}

fn default_concurrency() -> usize {
    4
}

impl AnnotationConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, RunError> {
        let content = fs::read_to_string(path)
            .map_err(|e| RunError::ConfigInvalid(format!("cannot read {}: {e}", path.display())))?;
        let mut table: toml::Table =
            toml::from_str(&content).map_err(|e| RunError::ConfigInvalid(e.to_string()))?;
        crate::config::apply_overrides(&mut table, overrides)?;
        let mut config: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| RunError::ConfigInvalid(e.to_string()))?;
        if let Some(p) = config.definitions.path.as_mut() {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new("")).join(&*p);
            }
        }
        Ok(config)
    }
}

pub struct AnnotateRequest<'a> {
    pub config: &'a AnnotationConfig,
    pub input: &'a Path,
    pub examples: &'a Path,
    pub output: &'a Path,
    pub quarantine: &'a Path,
    pub transport: Option<Arc<dyn ChatTransport>>,
}

/// Annotates raw reports with the teacher model and writes the accepted
/// corpus plus a quarantine file.
pub fn annotate(request: &AnnotateRequest<'_>) -> Result<AnnotationRun, RunError> {
    let config = request.config;
    let endpoint = config.endpoint.to_endpoint();
    endpoint.validate().map_err(|e| RunError::ConfigInvalid(e.to_string()))?;
    let definitions = match &config.definitions.path {
        Some(p) => DefinitionSet::load(p).map_err(|e| RunError::ConfigInvalid(e.to_string()))?,
        None => DefinitionSet::builtin(),
    };
    let reports = load_reports(request.input, &LoadOptions::default())
        .map_err(|e| failed(request.input.display(), e))?;
    let examples = load_corpus(request.examples, &LoadOptions::default())
        .map_err(|e| failed(request.examples.display(), e))?
        .corpus;
    let client = match &request.transport {
        Some(t) => ChatClient::with_transport(endpoint, Arc::clone(t)),
        None => ChatClient::http(endpoint),
    }
    .map_err(|e| match e {
        clinex_core::inference::InferenceError::Auth(m) => RunError::Auth(m),
        other => RunError::ConfigInvalid(other.to_string()),
    })?;
    let options = BatchOptions {
        limit: config.concurrency,
        ..Default::default()
    };
    let run = generate_annotations(&client, &reports, examples.samples(), &definitions, &options).map_err(
        |e| match e {
            clinex_core::datasetgen::DatasetGenError::Inference(
                clinex_core::inference::InferenceError::Auth(m),
            ) => RunError::Auth(m),
            other => failed("annotate", other),
        },
    )?;
    if !run.corpus.is_empty() {
        write_corpus(&run.corpus, request.output, CorpusFormat::Jsonl).map_err(|e| failed("output", e))?;
    }
    let mut q = String::new();
    for item in &run.quarantined {
        q.push_str(&serde_json::to_string(item).map_err(|e| failed("quarantine", e))?);
        q.push('\n');
    }
    fs::write(request.quarantine, q).map_err(|e| failed(request.quarantine.display(), e))?;
    Ok(run)
}

/// Samples error-bearing results and writes `errors.jsonl` and `digest.txt`.
pub fn analyze_errors(
    results: &Path,
    corpus: &Path,
    n: usize,
    seed: u64,
    examples: Option<&Path>,
    out_dir: &Path,
) -> Result<ErrorSample, RunError> {
    let results = read_results(results).map_err(|e| failed(results.display(), e))?;
    if results.is_empty() {
        return Err(RunError::EmptyInput("results file holds no records".into()));
    }
    let corpus = load_corpus(corpus, &lenient(None))
        .map_err(|e| failed(corpus.display(), e))?
        .corpus;
    let icl = match examples {
        Some(p) => Some(load_corpus(p, &lenient(None)).map_err(|e| failed(p.display(), e))?.corpus),
        None => None,
    };
    let sample = sample_errors(&results, &corpus, n, seed, icl.as_ref());
    fs::create_dir_all(out_dir).map_err(|e| failed(out_dir.display(), e))?;
    let mut lines = String::new();
    for record in sample.samples.iter().flat_map(|s| &s.errors.errors) {
        lines.push_str(&serde_json::to_string(record).map_err(|e| failed("errors", e))?);
        lines.push('\n');
    }
    fs::write(out_dir.join("errors.jsonl"), lines).map_err(|e| failed("errors", e))?;
    fs::write(out_dir.join("digest.txt"), render_digest(&sample)).map_err(|e| failed("digest", e))?;
    Ok(sample)
}

fn report_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(REPORT_JSON)
    } else {
        path.to_path_buf()
    }
}

/// Reads one aggregate report, checking its format version.
pub fn read_report(path: &Path) -> Result<EvaluationReport, RunError> {
    let path = report_path(path);
    let content = fs::read_to_string(&path).map_err(|e| failed(path.display(), e))?;
    if content.trim().is_empty() {
        return Err(RunError::EmptyInput(format!("{} is empty", path.display())));
    }
    let value: Value = serde_json::from_str(&content).map_err(|e| failed(path.display(), e))?;
    match value.get("format_version").and_then(Value::as_u64) {
        Some(v) if v == u64::from(REPORT_FORMAT_VERSION) => {}
        Some(v) => {
            return Err(RunError::SchemaMismatch(format!(
                "{} has format version {v}, expected {REPORT_FORMAT_VERSION}",
                path.display()
            )))
        }
        None => {
            return Err(RunError::SchemaMismatch(format!(
                "{} has no format_version",
                path.display()
            )))
        }
    }
    serde_json::from_value(value).map_err(|e| RunError::SchemaMismatch(format!("{}: {e}", path.display())))
}

/// Side-by-side macro table of one or more reports (files or run directories).
pub fn render_report(paths: &[PathBuf], markdown: bool) -> Result<String, RunError> {
    if paths.is_empty() {
        return Err(RunError::EmptyInput("no reports given".into()));
    }
    let reports = paths
        .iter()
        .map(|p| read_report(p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(render_comparison(&reports, markdown))
}

/// Per-category table of a single report.
pub fn render_single(path: &Path, markdown: bool) -> Result<String, RunError> {
    Ok(read_report(path)?.render(markdown))
}
