//! End-to-end experiment orchestration: split, index, extract, evaluate.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clinex_core::concurrency::bounded_map_all;
use clinex_core::corpus::{load_corpus, split_corpus, Corpus, LoadOptions, SplitSpec};
use clinex_core::embedding::{
    EntityRecognizer, HashingSentenceEmbedder, HashingTokenEmbedder, LexiconRecognizer,
    SentenceEmbedder, TokenEmbedder,
};
use clinex_core::inference::{
    read_results, run_batch, write_results, BatchOptions, ChatClient, ChatTransport,
    ExtractionResult, InferenceError, Outcome, Setup,
};
use clinex_core::metrics::{aggregate, evaluate_pair, EvalDeps, EvalPolicy, EvaluationReport, SampleScores};
use clinex_core::prompting::{DefinitionSet, Mode};
use clinex_core::retrieval::{build_index, EmbeddingIndex, ExampleRetriever, RetrievalConfig as CoreRetrieval};
use clinex_core::schema::{ClinicalReport, StructuredReport};
use clinex_core::sidecar::SidecarClient;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::info;

use crate::config::{EmbedderKind, ExperimentConfig, NerBackend, TokenBackend};
use crate::RunError;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_MARKDOWN: &str = "report.md";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const INDEX_FILE: &str = "index.bin";

/// Injected replacements for external services. Anything left `None` is
/// built from the configuration.
#[derive(Clone, Default)]
pub struct Services {
    pub chat: Option<Arc<dyn ChatTransport>>,
    pub sentence: Option<Arc<dyn SentenceEmbedder>>,
    pub tokens: Option<Arc<dyn TokenEmbedder>>,
    pub ner: Option<Arc<dyn EntityRecognizer>>,
    pub stop: Option<Arc<AtomicBool>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub parsed: usize,
    pub parse_failed: usize,
    pub failed: usize,
}

impl OutcomeCounts {
    pub fn of(results: &[ExtractionResult]) -> Self {
        let mut counts = Self::default();
        for r in results {
            match r.outcome {
                Outcome::Parsed { .. } => counts.parsed += 1,
                Outcome::ParseFailed { .. } => counts.parse_failed += 1,
                Outcome::Failed { .. } => counts.failed += 1,
            }
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub train_fraction: f64,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Everything needed to reproduce the run's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub label: String,
    pub mode: Mode,
    pub model: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub definitions_version: String,
    pub definitions_hash: String,
    pub embedder_id: Option<String>,
    pub token_embedder_id: Option<String>,
    pub ner_id: Option<String>,
    pub split: SplitRecord,
    pub evaluated_samples: usize,
    pub outcomes: OutcomeCounts,
    /// SHA-256 of each written artifact.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub outcomes: OutcomeCounts,
    pub report: EvaluationReport,
    pub manifest: Manifest,
}

impl RunSummary {
    /// 1 when any sample had no usable completion.
    pub fn exit_code(&self) -> i32 {
        i32::from(self.outcomes.failed > 0)
    }
}

fn failed(context: &str, e: impl std::fmt::Display) -> RunError {
    RunError::Failed(format!("{context}: {e}"))
}

fn from_inference(e: InferenceError) -> RunError {
    match e {
        InferenceError::Auth(m) => RunError::Auth(m),
        InferenceError::Config(m) => RunError::ConfigInvalid(m),
        InferenceError::Interrupted { completed } => RunError::Interrupted(format!(
            "{completed} sample(s) completed; rerun the same command to resume"
        )),
        other => RunError::Failed(other.to_string()),
    }
}

/// Lazily connected sidecar shared by every service that needs it.
struct SidecarSlot<'a> {
    config: &'a ExperimentConfig,
    client: Option<Arc<SidecarClient>>,
}

impl SidecarSlot<'_> {
    fn get(&mut self) -> Result<Arc<SidecarClient>, RunError> {
        if self.client.is_none() {
            let url = &self.config.sidecar.url;
            let timeout = Duration::from_secs(self.config.sidecar.timeout_secs);
            let client = SidecarClient::connect(url, timeout).map_err(|e| failed("model sidecar", e))?;
            self.client = Some(client);
        }
        Ok(Arc::clone(self.client.as_ref().expect("connected above")))
    }
}

pub fn load_definitions(config: &ExperimentConfig) -> Result<DefinitionSet, RunError> {
    match &config.definitions.path {
        Some(path) => DefinitionSet::load(path).map_err(|e| RunError::ConfigInvalid(e.to_string())),
        None => Ok(DefinitionSet::builtin()),
    }
}

pub fn load_split(config: &ExperimentConfig) -> Result<(Corpus, Corpus), RunError> {
    let options = LoadOptions {
        format: config.corpus_format,
        ..Default::default()
    };
    let corpus = load_corpus(&config.corpus, &options)
        .map_err(|e| failed("corpus", e))?
        .corpus;
    let spec = SplitSpec::new(config.split.train_fraction, config.seed)
        .map_err(|e| RunError::ConfigInvalid(e.to_string()))?;
    split_corpus(&corpus, &spec).map_err(|e| failed("split", e))
}

fn sentence_embedder(
    config: &ExperimentConfig,
    services: &Services,
    sidecar: &mut SidecarSlot<'_>,
) -> Result<Arc<dyn SentenceEmbedder>, RunError> {
    if let Some(e) = &services.sentence {
        return Ok(Arc::clone(e));
    }
    match config.retrieval.embedder {
        Some(EmbedderKind::Hashing) => Ok(Arc::new(HashingSentenceEmbedder::new(config.retrieval.hashing_dim))),
        Some(EmbedderKind::Sidecar) => Ok(Arc::new(
            sidecar.get()?.sentence_embedder().map_err(|e| failed("model sidecar", e))?,
        )),
        None => Err(RunError::ConfigInvalid("retrieval.embedder is not set".into())),
    }
}

/// Loads the configured index if present, otherwise builds it from `train`
/// and saves it (to the configured path or the output directory).
pub fn obtain_index(
    config: &ExperimentConfig,
    train: &Corpus,
    embedder: &dyn SentenceEmbedder,
) -> Result<EmbeddingIndex, RunError> {
    let path = config
        .retrieval
        .index_path
        .clone()
        .unwrap_or_else(|| config.output_dir.join(INDEX_FILE));
    if path.is_file() {
        let index = EmbeddingIndex::load(&path).map_err(|e| failed("index", e))?;
        if index.embedder_id() == embedder.embedder_id() {
            info!(path = %path.display(), rows = index.len(), "loaded embedding index");
            return Ok(index);
        }
        info!(path = %path.display(), "index was built with another embedder; rebuilding");
    }
    info!(rows = train.len(), embedder = embedder.embedder_id(), "building embedding index");
    let index = build_index(train.samples(), embedder, config.concurrency).map_err(|e| failed("index", e))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| failed("index", e))?;
    }
    index.save(&path).map_err(|e| failed("index", e))?;
    Ok(index)
}

fn check_credentials(config: &ExperimentConfig) -> Result<(), RunError> {
    config
        .endpoint
        .to_endpoint()
        .resolve_credential()
        .map(|_| ())
        .map_err(from_inference)
}

fn chat_client(config: &ExperimentConfig, services: &Services) -> Result<ChatClient, RunError> {
    let endpoint = config.endpoint.to_endpoint();
    match &services.chat {
        Some(t) => ChatClient::with_transport(endpoint, Arc::clone(t)),
        None => ChatClient::http(endpoint),
    }
    .map_err(from_inference)
}

fn test_reports(config: &ExperimentConfig, test: &Corpus) -> Vec<ClinicalReport> {
    let n = config.limit.unwrap_or(usize::MAX).min(test.len());
    test.samples()[..n].iter().map(|s| s.report.clone()).collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), RunError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(|e| failed("write", e))?);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| failed("write", e))?;
        out.write_all(b"\n").map_err(|e| failed("write", e))?;
    }
    out.flush().map_err(|e| failed("write", e))
}

fn sha256_file(path: &Path) -> Result<String, RunError> {
    let bytes = fs::read(path).map_err(|e| failed("hash", e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Serialize)]
struct PromptDump<'a> {
    sample_id: &'a str,
    prompt: &'a clinex_core::prompting::PromptSpec,
}

/// Runs the whole experiment described by `config` against real services.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary, RunError> {
    run_experiment_with(config, &Services::default())
}

/// Like [`run_experiment`] with some services replaced.
///
/// Configuration is validated and credentials resolved before any network
/// call. Samples already present in the journal are not requested again.
pub fn run_experiment_with(config: &ExperimentConfig, services: &Services) -> Result<RunSummary, RunError> {
    config.validate()?;
    let definitions = load_definitions(config)?;
    check_credentials(config)?;
    let client = chat_client(config, services)?;

    let (train, test) = load_split(config)?;
    fs::create_dir_all(&config.output_dir).map_err(|e| failed("output directory", e))?;
    let mut sidecar = SidecarSlot { config, client: None };

    let retriever = match config.mode {
        Mode::Advanced => {
            let embedder = sentence_embedder(config, services, &mut sidecar)?;
            let index = obtain_index(config, &train, embedder.as_ref())?;
            let retrieval = CoreRetrieval { m: config.retrieval.m };
            Some(ExampleRetriever::new(index, embedder, &train, retrieval).map_err(|e| failed("retrieval", e))?)
        }
        _ => None,
    };
    let setup = match (&retriever, config.mode) {
        (Some(retriever), _) => Setup::Advanced {
            retriever,
            definitions: &definitions,
        },
        (None, Mode::Minimal) => Setup::Minimal,
        (None, _) => Setup::Naive,
    };

    let reports = test_reports(config, &test);
    if config.dump_prompts {
        let prompts = bounded_map_all(&reports, config.concurrency, |_, r| setup.prompt(r));
        let mut dumps = Vec::with_capacity(prompts.len());
        for (r, p) in reports.iter().zip(&prompts) {
            let p = p.as_ref().map_err(|e| failed("prompt", e))?;
            dumps.push(PromptDump { sample_id: r.id(), prompt: p });
        }
        write_jsonl(&config.output_dir.join(PROMPTS_FILE), &dumps)?;
    }

    info!(samples = reports.len(), mode = config.mode.as_str(), "running extraction");
    let options = BatchOptions {
        limit: config.concurrency,
        repair: config.repair,
        journal: Some(config.output_dir.join(JOURNAL_FILE)),
        stop: services.stop.clone(),
    };
    let results = run_batch(&client, &reports, &setup, &options).map_err(from_inference)?;
    write_results(&config.output_dir.join(RESULTS_FILE), &results).map_err(|e| failed("results", e))?;

    let evaluated = evaluate_results(config, services, &mut sidecar, &test, &results)?;
    let split = SplitRecord {
        train_fraction: config.split.train_fraction,
        seed: config.seed,
        train_size: train.len(),
        test_size: test.len(),
    };
    finish(config, &definitions, retriever.as_ref().map(|r| r.embedder_id().to_string()), split, &results, evaluated)
}

struct Evaluated {
    report: EvaluationReport,
    token_id: Option<String>,
    ner_id: Option<String>,
}

fn evaluate_results(
    config: &ExperimentConfig,
    services: &Services,
    sidecar: &mut SidecarSlot<'_>,
    gold: &Corpus,
    results: &[ExtractionResult],
) -> Result<Evaluated, RunError> {
    let tokens: Option<Arc<dyn TokenEmbedder>> = match (&services.tokens, config.evaluation.token_embedder) {
        (Some(t), _) => Some(Arc::clone(t)),
        (None, TokenBackend::Hashing) => Some(Arc::new(HashingTokenEmbedder::new(config.evaluation.hashing_dim))),
        (None, TokenBackend::Sidecar) => Some(Arc::new(sidecar.get()?.token_embedder())),
        (None, TokenBackend::None) => None,
    };
    let ner: Option<Arc<dyn EntityRecognizer>> = match (&services.ner, config.evaluation.ner) {
        (Some(n), _) => Some(Arc::clone(n)),
        (None, NerBackend::Lexicon) => Some(Arc::new(LexiconRecognizer::builtin())),
        (None, NerBackend::Sidecar) => Some(Arc::new(sidecar.get()?.recognizer())),
        (None, NerBackend::None) => None,
    };
    let deps = EvalDeps {
        tokens: tokens.as_deref(),
        ner: ner.as_deref(),
    };
    let policy = EvalPolicy {
        one_sided: config.evaluation.one_sided,
    };
    let empty = StructuredReport::new();
    let mut missing = Vec::new();
    let pairs: Vec<(&ExtractionResult, &StructuredReport)> = results
        .iter()
        .filter_map(|r| match gold.get(&r.sample_id) {
            Some(s) => Some((r, &s.gold)),
            None => {
                missing.push(r.sample_id.clone());
                None
            }
        })
        .collect();
    if !missing.is_empty() {
        return Err(RunError::Failed(format!(
            "{} result(s) have no gold sample in the test split (first: {})",
            missing.len(),
            missing[0]
        )));
    }
    info!(samples = pairs.len(), "evaluating");
    let scores: Vec<SampleScores> = bounded_map_all(&pairs, config.concurrency, |_, (result, gold)| SampleScores {
        sample_id: result.sample_id.clone(),
        scores: evaluate_pair(result.parsed().unwrap_or(&empty), gold, &deps, &policy),
    });
    write_jsonl(&config.output_dir.join(SCORES_FILE), &scores)?;
    let mut report = aggregate(&scores, config.evaluation.averaging).map_err(|e| failed("aggregate", e))?;
    report.label = config.label();
    report.setup = config.mode.as_str().to_string();
    Ok(Evaluated {
        report,
        token_id: tokens.map(|t| t.model_id().to_string()),
        ner_id: ner.map(|n| n.model_id().to_string()),
    })
}

fn finish(
    config: &ExperimentConfig,
    definitions: &DefinitionSet,
    embedder_id: Option<String>,
    split: SplitRecord,
    results: &[ExtractionResult],
    evaluated: Evaluated,
) -> Result<RunSummary, RunError> {
    let Evaluated {
        mut report,
        token_id,
        ner_id,
    } = evaluated;
    let outcomes = OutcomeCounts::of(results);
    let meta = &mut report.metadata;
    meta.insert("model".into(), config.endpoint.model.clone());
    meta.insert("seed".into(), config.seed.to_string());
    meta.insert("definitions_hash".into(), definitions.content_hash());
    meta.insert("parsed".into(), outcomes.parsed.to_string());
    meta.insert("parse_failed".into(), outcomes.parse_failed.to_string());
    meta.insert("failed".into(), outcomes.failed.to_string());
    if let Some(id) = &embedder_id {
        meta.insert("embedder_id".into(), id.clone());
    }
    if let Some(id) = &token_id {
        meta.insert("token_embedder_id".into(), id.clone());
    }
    if let Some(id) = &ner_id {
        meta.insert("ner_id".into(), id.clone());
    }

    let dir = &config.output_dir;
    let json = serde_json::to_string_pretty(&report).map_err(|e| failed("report", e))?;
    fs::write(dir.join(REPORT_JSON), json + "\n").map_err(|e| failed("report", e))?;
    fs::write(dir.join(REPORT_TEXT), report.render(false)).map_err(|e| failed("report", e))?;
    fs::write(dir.join(REPORT_MARKDOWN), report.render(true)).map_err(|e| failed("report", e))?;

    let mut files = BTreeMap::new();
    for name in [RESULTS_FILE, SCORES_FILE, REPORT_JSON, PROMPTS_FILE] {
        let path = dir.join(name);
        if path.is_file() {
            files.insert(name.to_string(), sha256_file(&path)?);
        }
    }
    let mut recorded = config.clone();
    recorded.output_dir = PathBuf::new();
    let manifest = Manifest {
        label: config.label(),
        mode: config.mode,
        model: config.endpoint.model.clone(),
        seed: config.seed,
        config_hash: config.content_hash(),
        config: recorded,
        definitions_version: definitions.version().to_string(),
        definitions_hash: definitions.content_hash(),
        embedder_id,
        token_embedder_id: token_id,
        ner_id,
        split,
        evaluated_samples: results.len(),
        outcomes,
        files,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| failed("manifest", e))?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n").map_err(|e| failed("manifest", e))?;
    Ok(RunSummary {
        output_dir: dir.clone(),
        outcomes,
        report,
        manifest,
    })
}

/// Re-scores an existing `results.jsonl` without calling the chat endpoint.
pub fn evaluate_existing(config: &ExperimentConfig, services: &Services) -> Result<RunSummary, RunError> {
    config.validate()?;
    let definitions = load_definitions(config)?;
    let (train, test) = load_split(config)?;
    let path = config.output_dir.join(RESULTS_FILE);
    let results = read_results(&path).map_err(|e| failed(&path.display().to_string(), e))?;
    if results.is_empty() {
        return Err(RunError::EmptyInput(format!("{} holds no results", path.display())));
    }
    let mut sidecar = SidecarSlot { config, client: None };
    let evaluated = evaluate_results(config, services, &mut sidecar, &test, &results)?;
    let embedder_id = results
        .iter()
        .any(|r| r.mode == Mode::Advanced)
        .then(|| {
            EmbeddingIndex::load(
                &config.retrieval.index_path.clone().unwrap_or_else(|| config.output_dir.join(INDEX_FILE)),
            )
            .ok()
            .map(|i| i.embedder_id().to_string())
        })
        .flatten();
    let split = SplitRecord {
        train_fraction: config.split.train_fraction,
        seed: config.seed,
        train_size: train.len(),
        test_size: test.len(),
    };
    finish(config, &definitions, embedder_id, split, &results, evaluated)
}

/// Builds (or reuses) the retrieval index for the configured training split.
pub fn build_experiment_index(config: &ExperimentConfig, services: &Services) -> Result<EmbeddingIndex, RunError> {
    config.validate()?;
    if config.retrieval.embedder.is_none() && services.sentence.is_none() {
        return Err(RunError::ConfigInvalid("retrieval.embedder is not set".into()));
    }
    let (train, _) = load_split(config)?;
    let mut sidecar = SidecarSlot { config, client: None };
    let embedder = sentence_embedder(config, services, &mut sidecar)?;
    obtain_index(config, &train, embedder.as_ref())
}
