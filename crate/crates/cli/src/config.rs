//! Experiment configuration: one TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clinex_core::corpus::{CorpusFormat, SplitSpec};
use clinex_core::inference::{Decoding, ModelEndpoint, RetryPolicy};
use clinex_core::metrics::{Averaging, OneSided};
use clinex_core::prompting::Mode;
use clinex_core::retrieval::DEFAULT_M;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::RunError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Row label in reports; defaults to the model name.
    #[serde(default)]
    pub label: Option<String>,
    pub corpus: PathBuf,
    #[serde(default)]
    pub corpus_format: Option<CorpusFormat>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub mode: Mode,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Evaluate only the first `limit` test samples.
    #[serde(default)]
    pub limit: Option<usize>,
    /// Re-ask once when a completion does not parse.
    #[serde(default)]
    pub repair: bool,
    /// Also write every rendered prompt to `prompts.jsonl`.
    #[serde(default)]
    pub dump_prompts: bool,
    #[serde(default)]
    pub split: SplitConfig,
    pub endpoint: EndpointConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub definitions: DefinitionsConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub sidecar: SidecarConfig,
}

fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.9
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: default_train_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_base_backoff_ms")]
    pub base_backoff_ms: u64,
    #[serde(default = "default_max_backoff_ms")]
    pub max_backoff_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_max_output_tokens() -> u32 {
    1024
}
fn default_max_attempts() -> u32 {
    4
}
fn default_base_backoff_ms() -> u64 {
    500
}
fn default_max_backoff_ms() -> u64 {
    30_000
}
fn default_timeout_secs() -> u64 {
    120
}

impl EndpointConfig {
    pub fn to_endpoint(&self) -> ModelEndpoint {
        ModelEndpoint {
            base_url: self.base_url.clone(),
            model_name: self.model.clone(),
            decoding: Decoding {
                temperature: self.temperature,
                max_output_tokens: self.max_output_tokens,
            },
            auth_env: self.api_key_env.clone(),
            retry: RetryPolicy {
                max_attempts: self.max_attempts,
                base_backoff: Duration::from_millis(self.base_backoff_ms),
                max_backoff: Duration::from_millis(self.max_backoff_ms),
            },
            timeout: Duration::from_secs(self.timeout_secs),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Sidecar,
    Hashing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    #[serde(default = "default_m")]
    pub m: usize,
    /// Sentence encoder for example retrieval; required in advanced mode.
    #[serde(default)]
    pub embedder: Option<EmbedderKind>,
    #[serde(default = "default_hashing_dim")]
    pub hashing_dim: usize,
    /// Prebuilt index; built and saved here when the file does not exist.
    #[serde(default)]
    pub index_path: Option<PathBuf>,
}

fn default_m() -> usize {
    DEFAULT_M
}
fn default_hashing_dim() -> usize {
    256
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            m: default_m(),
            embedder: None,
            hashing_dim: default_hashing_dim(),
            index_path: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefinitionsConfig {
    /// Definition-set file; the built-in set is used when absent.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenBackend {
    Sidecar,
    Hashing,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NerBackend {
    Sidecar,
    Lexicon,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_token_backend")]
    pub token_embedder: TokenBackend,
    #[serde(default = "default_hashing_dim")]
    pub hashing_dim: usize,
    #[serde(default = "default_ner_backend")]
    pub ner: NerBackend,
    #[serde(default)]
    pub one_sided: OneSided,
    #[serde(default)]
    pub averaging: Averaging,
}

fn default_token_backend() -> TokenBackend {
    TokenBackend::None
}
fn default_ner_backend() -> NerBackend {
    NerBackend::None
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            token_embedder: default_token_backend(),
            hashing_dim: default_hashing_dim(),
            ner: default_ner_backend(),
            one_sided: OneSided::default(),
            averaging: Averaging::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarConfig {
    #[serde(default = "default_sidecar_url")]
    pub url: String,
    #[serde(default = "default_sidecar_timeout")]
    pub timeout_secs: u64,
}

fn default_sidecar_url() -> String {
    "http://127.0.0.1:8765".into()
}
fn default_sidecar_timeout() -> u64 {
    60
}

impl Default for SidecarConfig {
    fn default() -> Self {
        Self {
            url: default_sidecar_url(),
            timeout_secs: default_sidecar_timeout(),
        }
    }
}

fn invalid(message: impl Into<String>) -> RunError {
    RunError::ConfigInvalid(message.into())
}

/// Applies `a.b.c=value` overrides to a parsed TOML table. Values parse as
/// TOML literals where possible and fall back to plain strings.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<(), RunError> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| invalid(format!("override {item:?} is not key=value")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let (last, parents) = parts.split_last().expect("split yields at least one part");
        let mut cursor = &mut *table;
        for part in parents {
            cursor = cursor
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| invalid(format!("override {key:?}: {part} is not a table")))?;
        }
        cursor.insert(last.to_string(), value);
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(content: &str, overrides: &[String]) -> Result<Self, RunError> {
        let mut table: toml::Table =
            toml::from_str(content).map_err(|e| invalid(format!("config does not parse: {e}")))?;
        apply_overrides(&mut table, overrides)?;
        table
            .try_into()
            .map_err(|e: toml::de::Error| invalid(format!("config: {e}")))
    }

    /// Reads the file, applies overrides, resolves relative paths against the
    /// file's directory, and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, RunError> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::from_toml_str(&content, overrides)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.output_dir);
        if let Some(p) = self.retrieval.index_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.definitions.path.as_mut() {
            fix(p);
        }
    }

    /// Checks everything that can be checked without touching the network.
    pub fn validate(&self) -> Result<(), RunError> {
        if !self.corpus.is_file() {
            return Err(invalid(format!("corpus file {} does not exist", self.corpus.display())));
        }
        if let Some(p) = &self.definitions.path {
            if !p.is_file() {
                return Err(invalid(format!("definitions file {} does not exist", p.display())));
            }
        }
        if self.concurrency == 0 {
            return Err(invalid("concurrency must be at least 1"));
        }
        if self.limit == Some(0) {
            return Err(invalid("limit must be positive when set"));
        }
        SplitSpec::new(self.split.train_fraction, self.seed).map_err(|e| invalid(e.to_string()))?;
        self.endpoint
            .to_endpoint()
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        if self.mode == Mode::Advanced {
            if self.retrieval.embedder.is_none() {
                return Err(invalid(
                    "advanced mode needs a retrieval embedder: set retrieval.embedder to \"sidecar\" or \"hashing\"",
                ));
            }
            if self.retrieval.m == 0 {
                return Err(invalid("retrieval.m must be at least 1"));
            }
        }
        for dim in [self.retrieval.hashing_dim, self.evaluation.hashing_dim] {
            if dim == 0 {
                return Err(invalid("hashing_dim must be positive"));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.endpoint.model.clone())
    }

    /// SHA-256 of the canonical JSON form, with the output directory blanked
    /// so that identical experiments in different directories hash equally.
    pub fn content_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
