//! Chat-completion client, single-report extraction, and the batch runner.
//!
//! A [`ChatClient`] pairs a [`ModelEndpoint`] with a [`ChatTransport`]. The
//! HTTP transport speaks the common chat-completion wire format; tests and
//! offline runs plug in [`FnTransport`].

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::concurrency::bounded_map;
use crate::corpus::CorpusSample;
use crate::prompting::{
    build_advanced_prompt, build_advanced_prompt_from_samples, build_minimal_prompt,
    build_naive_prompt, DefinitionSet, Mode, PromptSpec, REPAIR_NUDGE,
};
use crate::retrieval::ExampleRetriever;
use crate::schema::{
    parse_model_output, ClinicalReport, ParseFailureKind, ParseMode, ParseWarning,
    StructuredReport,
};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("malformed server response: {0}")]
    MalformedResponse(String),
    #[error("prompt construction failed: {0}")]
    Prompt(String),
    #[error("invalid endpoint configuration: {0}")]
    Config(String),
    #[error("batch interrupted after {completed} completed sample(s)")]
    Interrupted { completed: usize },
    #[error("journal {path}: {message}")]
    Journal { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Full jitter: uniform in `[0, min(max, base · 2^(attempt-1))]`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let exp = self
            .base_backoff
            .saturating_mul(1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX));
        let cap = exp.min(self.max_backoff);
        if cap.is_zero() {
            return cap;
        }
        // jitter only shifts timing; it never reaches any output
        Duration::from_secs_f64(rand::rng().random_range(0.0..=cap.as_secs_f64()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model_name: String,
    pub decoding: Decoding,
    /// Environment variable holding the bearer token, if the endpoint needs one.
    pub auth_env: Option<String>,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

impl ModelEndpoint {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            decoding: Decoding::default(),
            auth_env: None,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
        }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        let bad = |m: &str| Err(InferenceError::Config(m.to_string()));
        if self.retry.max_attempts < 1 {
            return bad("max_attempts must be at least 1");
        }
        if !(self.decoding.temperature >= 0.0 && self.decoding.temperature.is_finite()) {
            return bad("temperature must be a nonnegative number");
        }
        if self.decoding.max_output_tokens == 0 {
            return bad("max_output_tokens must be positive");
        }
        if self.model_name.trim().is_empty() {
            return bad("model name is empty");
        }
        Ok(())
    }

    /// Reads the credential named by `auth_env`. An unset or empty variable
    /// is an [`InferenceError::Auth`].
    pub fn resolve_credential(&self) -> Result<Option<String>, InferenceError> {
        match &self.auth_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.trim().is_empty() => Ok(Some(v)),
                _ => Err(InferenceError::Auth(format!(
                    "environment variable {var} is not set"
                ))),
            },
        }
    }

    pub fn chat_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.to_string(),
            content: content.into(),
        }
    }
}

/// Request body of the chat-completion wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

/// Extracts the first choice's message content from a response body.
pub fn parse_chat_response(body: &str) -> Result<String, TransportFailure> {
    let response: ChatResponse =
        serde_json::from_str(body).map_err(|e| TransportFailure::Malformed(e.to_string()))?;
    response
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| TransportFailure::Malformed("no message content in first choice".into()))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportFailure {
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl TransportFailure {
    fn is_transient(&self) -> bool {
        match self {
            TransportFailure::Timeout | TransportFailure::Connection(_) => true,
            TransportFailure::Status { code, .. } => *code == 429 || (500..600).contains(code),
            TransportFailure::Malformed(_) => false,
        }
    }

    fn is_auth(&self) -> bool {
        matches!(self, TransportFailure::Status { code: 401 | 403, .. })
    }
}

/// Sends one chat request and returns the completion text.
pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportFailure>;
}

/// Transport backed by a closure; used for mocks and scripted endpoints.
pub struct FnTransport<F>(pub F);

impl<F> ChatTransport for FnTransport<F>
where
    F: Fn(&ChatRequest) -> Result<String, TransportFailure> + Send + Sync,
{
    fn send(&self, request: &ChatRequest) -> Result<String, TransportFailure> {
        (self.0)(request)
    }
}

/// Replaces every occurrence of `secret` with a fixed marker.
pub fn redact(text: &str, secret: Option<&str>) -> String {
    match secret {
        Some(s) if !s.is_empty() => text.replace(s, "[REDACTED]"),
        _ => text.to_string(),
    }
}

pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    credential: Option<String>,
}

impl HttpTransport {
    pub fn new(endpoint: &ModelEndpoint, credential: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            url: endpoint.chat_url(),
            credential,
        }
    }
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportFailure> {
        let body = serde_json::to_string(request).map_err(|e| TransportFailure::Malformed(e.to_string()))?;
        let secret = self.credential.as_deref();
        debug!(target: "clinex::wire", url = %self.url, body = %redact(&body, secret), "chat request");
        let mut call = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(token) = secret {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = match call.send(body.as_bytes()) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(TransportFailure::Timeout),
            Err(e) => return Err(TransportFailure::Connection(redact(&e.to_string(), secret))),
        };
        let code = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportFailure::Connection(e.to_string()))?;
        debug!(target: "clinex::wire", status = code, body = %redact(&text, secret), "chat response");
        if !(200..300).contains(&code) {
            return Err(TransportFailure::Status { code, body: text });
        }
        parse_chat_response(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

#[derive(Clone)]
pub struct ChatClient {
    endpoint: ModelEndpoint,
    transport: Arc<dyn ChatTransport>,
}

impl ChatClient {
    /// HTTP client for `endpoint`; fails before any request if the credential
    /// variable is missing.
    pub fn http(endpoint: ModelEndpoint) -> Result<Self, InferenceError> {
        endpoint.validate()?;
        let credential = endpoint.resolve_credential()?;
        let transport = Arc::new(HttpTransport::new(&endpoint, credential));
        Ok(Self {
            endpoint,
            transport,
        })
    }

    pub fn with_transport(
        endpoint: ModelEndpoint,
        transport: Arc<dyn ChatTransport>,
    ) -> Result<Self, InferenceError> {
        endpoint.validate()?;
        Ok(Self {
            endpoint,
            transport,
        })
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    /// Sends `system_text` and `user_text` as a two-message chat.
    pub fn complete(&self, prompt: &PromptSpec) -> Result<Completion, InferenceError> {
        self.complete_messages(vec![
            ChatMessage::new("system", prompt.system_text.clone()),
            ChatMessage::new("user", prompt.user_text.clone()),
        ])
    }

    /// Retries timeouts, connection errors, 429 and 5xx with exponential
    /// backoff and full jitter, up to `max_attempts` sends in total.
    pub fn complete_messages(&self, messages: Vec<ChatMessage>) -> Result<Completion, InferenceError> {
        let request = ChatRequest {
            model: self.endpoint.model_name.clone(),
            messages,
            temperature: self.endpoint.decoding.temperature,
            max_tokens: self.endpoint.decoding.max_output_tokens,
        };
        let policy = &self.endpoint.retry;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.transport.send(&request) {
                Ok(text) => {
                    return Ok(Completion {
                        text,
                        attempts: attempt,
                    })
                }
                Err(failure) if failure.is_auth() => {
                    return Err(InferenceError::Auth(failure.to_string()))
                }
                Err(TransportFailure::Malformed(m)) => {
                    return Err(InferenceError::MalformedResponse(m))
                }
                Err(failure) if failure.is_transient() && attempt < policy.max_attempts => {
                    let delay = policy.backoff(attempt);
                    warn!(attempt, error = %failure, delay_ms = delay.as_millis() as u64, "retrying chat request");
                    thread::sleep(delay);
                }
                Err(failure) => {
                    return Err(InferenceError::Transport {
                        attempts: attempt,
                        message: failure.to_string(),
                    })
                }
            }
        }
    }
}

/// How prompts are built for each report.
#[derive(Clone, Copy)]
pub enum Setup<'a> {
    Naive,
    Minimal,
    /// Definitions plus examples retrieved per report.
    Advanced {
        retriever: &'a ExampleRetriever,
        definitions: &'a DefinitionSet,
    },
    /// Definitions plus the same curated examples for every report.
    FixedExamples {
        examples: &'a [CorpusSample],
        definitions: &'a DefinitionSet,
    },
}

impl Setup<'_> {
    pub fn mode(&self) -> Mode {
        match self {
            Setup::Naive => Mode::Naive,
            Setup::Minimal => Mode::Minimal,
            Setup::Advanced { .. } | Setup::FixedExamples { .. } => Mode::Advanced,
        }
    }

    pub fn prompt(&self, report: &ClinicalReport) -> Result<PromptSpec, InferenceError> {
        let prompt_err = |e: &dyn std::fmt::Display| InferenceError::Prompt(e.to_string());
        match self {
            Setup::Naive => Ok(build_naive_prompt(report)),
            Setup::Minimal => Ok(build_minimal_prompt(report)),
            Setup::Advanced {
                retriever,
                definitions,
            } => {
                let examples = retriever.examples_for(report).map_err(|e| prompt_err(&e))?;
                let pairs: Vec<_> = examples.iter().map(|(s, _)| (&s.report, &s.gold)).collect();
                build_advanced_prompt(report, &pairs, definitions).map_err(|e| prompt_err(&e))
            }
            Setup::FixedExamples {
                examples,
                definitions,
            } => {
                let refs: Vec<&CorpusSample> = examples.iter().collect();
                build_advanced_prompt_from_samples(report, &refs, definitions)
                    .map_err(|e| prompt_err(&e))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Parsed {
        report: StructuredReport,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        warnings: Vec<ParseWarning>,
    },
    ParseFailed {
        failure: ParseFailureKind,
    },
    /// No usable completion (transport, retrieval, or prompt failure).
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairRecord {
    pub original_completion: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub sample_id: String,
    pub mode: Mode,
    pub prompt_hash: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub example_ids: Vec<String>,
    pub raw_completion: Option<String>,
    pub outcome: Outcome,
    /// Sends made for the primary completion.
    pub attempts: u32,
    /// Present when the repair re-ask was used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair: Option<RepairRecord>,
    #[serde(skip)]
    pub latency: Duration,
}

impl ExtractionResult {
    pub fn parsed(&self) -> Option<&StructuredReport> {
        match &self.outcome {
            Outcome::Parsed { report, .. } => Some(report),
            _ => None,
        }
    }

    pub fn is_failed(&self) -> bool {
        matches!(self.outcome, Outcome::Failed { .. })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExtractOptions {
    /// Re-ask once, asking for only the object, when parsing fails.
    pub repair: bool,
}

/// Builds the prompt, calls the model, and parses the completion leniently.
///
/// Parse failures are recorded in the result. Transport and prompt errors
/// are returned; [`run_batch`] turns them into failed results.
pub fn extract_one(
    client: &ChatClient,
    report: &ClinicalReport,
    setup: &Setup<'_>,
    options: &ExtractOptions,
) -> Result<ExtractionResult, InferenceError> {
    let started = Instant::now();
    let prompt = setup.prompt(report)?;
    let completion = client.complete(&prompt)?;
    let mut result = ExtractionResult {
        sample_id: report.id().to_string(),
        mode: prompt.mode,
        prompt_hash: prompt.hash(),
        example_ids: prompt.example_ids.clone(),
        raw_completion: Some(completion.text.clone()),
        outcome: outcome_of(&completion.text),
        attempts: completion.attempts,
        repair: None,
        latency: Duration::ZERO,
    };
    if options.repair && matches!(result.outcome, Outcome::ParseFailed { .. }) {
        let repaired = client.complete_messages(vec![
            ChatMessage::new("system", prompt.system_text.clone()),
            ChatMessage::new("user", prompt.user_text.clone()),
            ChatMessage::new("assistant", completion.text.clone()),
            ChatMessage::new("user", REPAIR_NUDGE),
        ])?;
        result.outcome = outcome_of(&repaired.text);
        result.raw_completion = Some(repaired.text);
        result.repair = Some(RepairRecord {
            original_completion: completion.text,
            attempts: repaired.attempts,
        });
    }
    result.latency = started.elapsed();
    Ok(result)
}

fn outcome_of(text: &str) -> Outcome {
    match parse_model_output(text, ParseMode::Lenient) {
        Ok(parsed) => Outcome::Parsed {
            report: parsed.report,
            warnings: parsed.warnings,
        },
        Err(failure) => Outcome::ParseFailed {
            failure: failure.kind,
        },
    }
}

fn failed_result(report: &ClinicalReport, mode: Mode, error: &InferenceError) -> ExtractionResult {
    let attempts = match error {
        InferenceError::Transport { attempts, .. } => *attempts,
        _ => 0,
    };
    ExtractionResult {
        sample_id: report.id().to_string(),
        mode,
        prompt_hash: String::new(),
        example_ids: Vec::new(),
        raw_completion: None,
        outcome: Outcome::Failed {
            error: error.to_string(),
        },
        attempts,
        repair: None,
        latency: Duration::ZERO,
    }
}

#[derive(Debug, Clone, Default)]
pub struct BatchOptions {
    /// Maximum requests in flight.
    pub limit: usize,
    pub repair: bool,
    /// Progress journal; completed samples found in it are not re-requested.
    pub journal: Option<PathBuf>,
    /// Setting this stops new work; the batch returns `Interrupted`.
    pub stop: Option<Arc<AtomicBool>>,
}

/// Journal line: a result plus its wall-clock latency.
#[derive(Serialize, Deserialize)]
struct JournalEntry {
    #[serde(flatten)]
    result: ExtractionResult,
    latency_ms: u64,
}

fn journal_error(path: &Path, e: impl std::fmt::Display) -> InferenceError {
    InferenceError::Journal {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads reusable entries: same mode, not failed. Later lines win.
fn read_journal(path: &Path, mode: Mode) -> Result<HashMap<String, ExtractionResult>, InferenceError> {
    let mut done = HashMap::new();
    if !path.exists() {
        return Ok(done);
    }
    let file = File::open(path).map_err(|e| journal_error(path, e))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| journal_error(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        // a torn final line from an interrupted write is skipped
        let Ok(entry) = serde_json::from_str::<JournalEntry>(&line) else {
            warn!(path = %path.display(), "skipping unreadable journal line");
            continue;
        };
        let mut result = entry.result;
        if result.mode != mode || result.is_failed() {
            done.remove(&result.sample_id);
            continue;
        }
        result.latency = Duration::from_millis(entry.latency_ms);
        done.insert(result.sample_id.clone(), result);
    }
    Ok(done)
}

/// Extracts every report with at most `options.limit` requests in flight.
///
/// Results come back in input order. Per-sample failures become
/// [`Outcome::Failed`] results; only an authentication error or the stop flag
/// ends the batch early.
pub fn run_batch(
    client: &ChatClient,
    reports: &[ClinicalReport],
    setup: &Setup<'_>,
    options: &BatchOptions,
) -> Result<Vec<ExtractionResult>, InferenceError> {
    let mode = setup.mode();
    let mut previous = match &options.journal {
        Some(path) => read_journal(path, mode)?,
        None => HashMap::new(),
    };
    let journal = match &options.journal {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| journal_error(path, e))?;
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| journal_error(path, e))?;
            Some((path.as_path(), Mutex::new(file)))
        }
        None => None,
    };

    let pending: Vec<&ClinicalReport> = reports
        .iter()
        .filter(|r| !previous.contains_key(r.id()))
        .collect();
    let local_stop = AtomicBool::new(false);
    let stop = options.stop.as_deref().unwrap_or(&local_stop);
    let abort: Mutex<Option<InferenceError>> = Mutex::new(None);
    let extract_options = ExtractOptions {
        repair: options.repair,
    };

    let fresh = bounded_map(&pending, options.limit, stop, |_, report| {
        let result = match extract_one(client, report, setup, &extract_options) {
            Ok(r) => r,
            Err(InferenceError::Auth(message)) => {
                abort
                    .lock()
                    .expect("abort slot poisoned")
                    .get_or_insert(InferenceError::Auth(message));
                stop.store(true, Ordering::SeqCst);
                return None;
            }
            Err(e) => failed_result(report, mode, &e),
        };
        if let Some((path, file)) = &journal {
            let entry = JournalEntry {
                result: result.clone(),
                latency_ms: result.latency.as_millis() as u64,
            };
            let line = serde_json::to_string(&entry).expect("journal entries serialize");
            let mut file = file.lock().expect("journal poisoned");
            if let Err(e) = writeln!(file, "{line}").and_then(|_| file.flush()) {
                warn!(path = %path.display(), error = %e, "journal write failed");
            }
        }
        Some(result)
    });

    if let Some(err) = abort.into_inner().expect("abort slot poisoned") {
        return Err(err);
    }
    for result in fresh.into_iter().flatten().flatten() {
        previous.insert(result.sample_id.clone(), result);
    }
    let completed = reports.iter().filter(|r| previous.contains_key(r.id())).count();
    if completed < reports.len() {
        return Err(InferenceError::Interrupted { completed });
    }
    Ok(reports
        .iter()
        .map(|r| previous.remove(r.id()).expect("every report has a result"))
        .collect())
}

/// Writes results as one JSON record per line, in the given order.
pub fn write_results(path: &Path, results: &[ExtractionResult]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for result in results {
        serde_json::to_writer(&mut out, result)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_results(path: &Path) -> std::io::Result<Vec<ExtractionResult>> {
    let file = File::open(path)?;
    let mut results = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let result = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        results.push(result);
    }
    Ok(results)
}
