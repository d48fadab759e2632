//! Annotated corpus loading, splitting, and category presence statistics.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::schema::{Category, ClinicalReport, Language, ParseMode, StructuredReport};
use crate::shuffle;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    FileUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    FileUnwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record {index} is invalid: {reason}")]
    RecordInvalid { index: usize, reason: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("split would leave the {side} side empty (n = {total}, train fraction = {fraction})")]
    DegenerateSplit {
        side: &'static str,
        total: usize,
        fraction: f64,
    },
    #[error("train fraction {0} is not strictly between 0 and 1")]
    InvalidFraction(f64),
}

/// One annotated example: a report and its gold structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub report: ClinicalReport,
    pub gold: StructuredReport,
    pub source_id: String,
}

impl CorpusSample {
    pub fn id(&self) -> &str {
        self.report.id()
    }
}

/// Ordered, immutable collection of samples with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    samples: Vec<CorpusSample>,
}

impl Corpus {
    /// Fails with `RecordInvalid` on the first repeated id.
    pub fn new(samples: Vec<CorpusSample>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(samples.len());
        for (index, sample) in samples.iter().enumerate() {
            if !seen.insert(sample.id()) {
                return Err(CorpusError::RecordInvalid {
                    index,
                    reason: format!("duplicate id {:?}", sample.id()),
                });
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[CorpusSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, CorpusSample> {
        self.samples.iter()
    }

    pub fn get(&self, id: &str) -> Option<&CorpusSample> {
        self.samples.iter().find(|s| s.id() == id)
    }

    pub fn into_samples(self) -> Vec<CorpusSample> {
        self.samples
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a CorpusSample;
    type IntoIter = std::slice::Iter<'a, CorpusSample>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    /// One record per line.
    Jsonl,
    /// A single top-level array of records.
    JsonArray,
}

impl CorpusFormat {
    /// Guesses from the extension, then from the first non-blank byte.
    pub fn detect(path: &Path, content: &str) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => CorpusFormat::Jsonl,
            _ if content.trim_start().starts_with('[') => CorpusFormat::JsonArray,
            _ => CorpusFormat::Jsonl,
        }
    }
}

/// Maps a source file's field names onto (id, text, gold, source, language).
///
/// Each role lists candidate names tried in order. When no gold field is found
/// and `inline_gold` is set, category keys at the top level of the record are
/// used as the gold object. A gold field holding a string is decoded as JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldAdapter {
    pub id: Vec<String>,
    pub text: Vec<String>,
    pub gold: Vec<String>,
    pub source: Vec<String>,
    pub language: Vec<String>,
    pub inline_gold: bool,
}

impl Default for FieldAdapter {
    fn default() -> Self {
        let names = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            id: names(&["id", "patient_uid", "uid", "sample_id"]),
            text: names(&["text", "patient", "summary", "report", "input"]),
            gold: names(&["gold", "structured", "annotation", "output", "extraction", "label"]),
            source: names(&["source_id", "PMID", "pmid", "article_id", "source"]),
            language: names(&["language", "lang"]),
            inline_gold: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub format: Option<CorpusFormat>,
    pub adapter: FieldAdapter,
    /// Records in other languages are skipped, not rejected.
    pub language: Option<Language>,
    pub default_language: Language,
    /// Abort on the first invalid record instead of collecting rejections.
    pub fail_fast: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            format: None,
            adapter: FieldAdapter::default(),
            language: Some(Language::En),
            default_language: Language::En,
            fail_fast: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub rejected: Vec<Rejection>,
    pub filtered_language: usize,
}

/// Loads unannotated reports (id, text, language); gold fields are ignored.
pub fn load_reports(path: &Path, options: &LoadOptions) -> Result<Vec<ClinicalReport>, CorpusError> {
    let content = fs::read_to_string(path).map_err(|source| CorpusError::FileUnreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let format = options
        .format
        .unwrap_or_else(|| CorpusFormat::detect(path, &content));
    let values: Vec<Value> = match format {
        CorpusFormat::Jsonl => content
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(index, line)| {
                serde_json::from_str(line).map_err(|e| CorpusError::RecordInvalid {
                    index,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?,
        CorpusFormat::JsonArray => match serde_json::from_str::<Value>(&content) {
            Ok(Value::Array(items)) => items,
            _ => {
                return Err(CorpusError::RecordInvalid {
                    index: 0,
                    reason: "file is not a JSON array".into(),
                })
            }
        },
    };
    let mut seen = HashSet::new();
    let mut reports = Vec::new();
    for (index, value) in values.iter().enumerate() {
        let report = decode_report(value, options)
            .map_err(|reason| CorpusError::RecordInvalid { index, reason })?;
        if options.language.is_some_and(|l| l != report.language()) {
            continue;
        }
        if !seen.insert(report.id().to_string()) {
            return Err(CorpusError::RecordInvalid {
                index,
                reason: format!("duplicate id {:?}", report.id()),
            });
        }
        reports.push(report);
    }
    if reports.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(reports)
}

pub fn load_corpus(path: &Path, options: &LoadOptions) -> Result<LoadedCorpus, CorpusError> {
    let content = fs::read_to_string(path).map_err(|source| CorpusError::FileUnreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let format = options
        .format
        .unwrap_or_else(|| CorpusFormat::detect(path, &content));
    parse_corpus(&content, format, options)
}

pub fn parse_corpus(
    content: &str,
    format: CorpusFormat,
    options: &LoadOptions,
) -> Result<LoadedCorpus, CorpusError> {
    let records: Vec<(usize, Result<Value, String>)> = match format {
        CorpusFormat::Jsonl => content
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| (i, serde_json::from_str(line).map_err(|e| e.to_string())))
            .collect(),
        CorpusFormat::JsonArray => match serde_json::from_str::<Value>(content) {
            Ok(Value::Array(items)) => items.into_iter().map(Ok).enumerate().collect(),
            Ok(_) => {
                return Err(CorpusError::RecordInvalid {
                    index: 0,
                    reason: "top-level value is not an array".into(),
                })
            }
            Err(e) => {
                return Err(CorpusError::RecordInvalid {
                    index: 0,
                    reason: format!("array file does not parse: {e}"),
                })
            }
        },
    };

    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    let mut filtered_language = 0;
    let mut seen = HashSet::new();
    for (index, record) in records {
        let outcome = record.and_then(|value| decode_record(&value, options));
        let reason = match outcome {
            Ok(sample) => {
                if options.language.is_some_and(|l| l != sample.report.language()) {
                    filtered_language += 1;
                    continue;
                }
                if seen.insert(sample.id().to_string()) {
                    samples.push(sample);
                    continue;
                }
                format!("duplicate id {:?}", sample.id())
            }
            Err(reason) => reason,
        };
        if options.fail_fast {
            return Err(CorpusError::RecordInvalid { index, reason });
        }
        rejected.push(Rejection { index, reason });
    }
    if samples.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(LoadedCorpus {
        corpus: Corpus { samples },
        rejected,
        filtered_language,
    })
}

fn pick<'a>(record: &'a Map<String, Value>, names: &[String]) -> Option<&'a Value> {
    names.iter().find_map(|n| record.get(n))
}

fn scalar_string(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn decode_report(value: &Value, options: &LoadOptions) -> Result<ClinicalReport, String> {
    let adapter = &options.adapter;
    let record = value.as_object().ok_or("record is not an object")?;
    let id = pick(record, &adapter.id)
        .and_then(scalar_string)
        .ok_or("missing id field")?;
    let text = pick(record, &adapter.text)
        .and_then(Value::as_str)
        .ok_or("missing text field")?;
    let language = match pick(record, &adapter.language).and_then(Value::as_str) {
        Some(tag) => tag.parse().map_err(|e| format!("{e}"))?,
        None => options.default_language,
    };
    ClinicalReport::new(id, language, text).map_err(|e| e.to_string())
}

fn decode_record(value: &Value, options: &LoadOptions) -> Result<CorpusSample, String> {
    let adapter = &options.adapter;
    let report = decode_report(value, options)?;
    let record = value.as_object().ok_or("record is not an object")?;
    let id = report.id().to_string();

    let gold = match pick(record, &adapter.gold) {
        Some(Value::Object(object)) => gold_from_object(object)?,
        Some(Value::String(encoded)) => match serde_json::from_str::<Value>(encoded) {
            Ok(Value::Object(object)) => gold_from_object(&object)?,
            _ => return Err("gold field is a string that does not hold an object".into()),
        },
        Some(_) => return Err("gold field is not an object".into()),
        None if adapter.inline_gold => {
            let inline: Map<String, Value> = record
                .iter()
                .filter(|(k, _)| k.parse::<Category>().is_ok())
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            if inline.is_empty() {
                return Err("missing gold structure".into());
            }
            gold_from_object(&inline)?
        }
        None => return Err("missing gold structure".into()),
    };
    let source_id = pick(record, &adapter.source)
        .and_then(scalar_string)
        .unwrap_or_else(|| id.clone());
    Ok(CorpusSample {
        report,
        gold,
        source_id,
    })
}

fn gold_from_object(object: &Map<String, Value>) -> Result<StructuredReport, String> {
    StructuredReport::from_object(object, ParseMode::Strict)
        .map(|(report, _)| report)
        .map_err(|e| format!("gold: {e}"))
}

/// Record layout written by [`write_corpus`]; loads back with the default adapter.
#[derive(Serialize)]
struct CanonicalRecord<'a> {
    id: &'a str,
    language: Language,
    source_id: &'a str,
    text: &'a str,
    gold: &'a StructuredReport,
}

pub fn write_corpus(corpus: &Corpus, path: &Path, format: CorpusFormat) -> Result<(), CorpusError> {
    let unwritable = |source| CorpusError::FileUnwritable {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(unwritable)?;
    let mut out = BufWriter::new(file);
    let records = corpus.iter().map(|s| CanonicalRecord {
        id: s.id(),
        language: s.report.language(),
        source_id: &s.source_id,
        text: s.report.text(),
        gold: &s.gold,
    });
    match format {
        CorpusFormat::Jsonl => {
            for record in records {
                serde_json::to_writer(&mut out, &record).map_err(std::io::Error::from).map_err(unwritable)?;
                out.write_all(b"\n").map_err(unwritable)?;
            }
        }
        CorpusFormat::JsonArray => {
            let all: Vec<_> = records.collect();
            serde_json::to_writer(&mut out, &all).map_err(std::io::Error::from).map_err(unwritable)?;
            out.write_all(b"\n").map_err(unwritable)?;
        }
    }
    out.flush().map_err(unwritable)
}

/// Fraction of the corpus assigned to training, plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self, CorpusError> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(CorpusError::InvalidFraction(train_fraction));
        }
        Ok(Self {
            train_fraction,
            seed,
        })
    }

    pub fn train_size(&self, total: usize) -> usize {
        (total as f64 * self.train_fraction).round() as usize
    }
}

/// Shuffles with the seed (see [`crate::shuffle`]) and cuts the prefix.
pub fn split_corpus(corpus: &Corpus, spec: &SplitSpec) -> Result<(Corpus, Corpus), CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let spec = SplitSpec::new(spec.train_fraction, spec.seed)?;
    let total = corpus.len();
    let train_size = spec.train_size(total);
    let degenerate = |side| CorpusError::DegenerateSplit {
        side,
        total,
        fraction: spec.train_fraction,
    };
    if train_size == 0 {
        return Err(degenerate("train"));
    }
    if train_size == total {
        return Err(degenerate("test"));
    }
    let order = shuffle::shuffled_indices(total, spec.seed);
    let pick = |idx: &[usize]| Corpus {
        samples: idx.iter().map(|&i| corpus.samples[i].clone()).collect(),
    };
    Ok((pick(&order[..train_size]), pick(&order[train_size..])))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryPresence {
    pub category: Category,
    pub present: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub sample_count: usize,
    pub categories: Vec<CategoryPresence>,
}

impl CategoryStats {
    pub fn get(&self, category: Category) -> &CategoryPresence {
        &self.categories[category.index()]
    }

    /// Presence as a percentage.
    pub fn percent(&self, category: Category) -> f64 {
        self.get(category).fraction * 100.0
    }
}

pub fn presence_stats(corpus: &Corpus) -> Result<CategoryStats, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut counts = [0usize; Category::COUNT];
    for sample in corpus {
        for category in sample.gold.categories() {
            counts[category.index()] += 1;
        }
    }
    let n = corpus.len();
    Ok(CategoryStats {
        sample_count: n,
        categories: Category::ALL
            .iter()
            .map(|&category| CategoryPresence {
                category,
                present: counts[category.index()],
                fraction: counts[category.index()] as f64 / n as f64,
            })
            .collect(),
    })
}

/// Renders presence (and optionally error rates) as a plain-text table.
pub fn render_presence_table(
    stats: &CategoryStats,
    error_rates: Option<&[(Category, f64)]>,
) -> String {
    let width = Category::ALL.iter().map(|c| c.as_str().len()).max().unwrap_or(0) + 6;
    let mut out = String::new();
    let _ = write!(out, "{:<width$} | {:>12}", "Category", "Presence (%)");
    if error_rates.is_some() {
        out.push_str(" | Error Rate (%)");
    }
    out.push('\n');
    let rule_len = width + 15 + if error_rates.is_some() { 17 } else { 0 };
    out.push_str(&"-".repeat(rule_len));
    out.push('\n');
    for (i, presence) in stats.categories.iter().enumerate() {
        let label = format!("C{}: {}", i + 1, presence.category);
        let _ = write!(out, "{label:<width$} | {:>12.2}", presence.fraction * 100.0);
        if let Some(rates) = error_rates {
            match rates.iter().find(|(c, _)| *c == presence.category) {
                Some((_, rate)) => {
                    let _ = write!(out, " | {rate:>14.2}");
                }
                None => out.push_str(&format!(" | {:>14}", "-")),
            }
        }
        out.push('\n');
    }
    let _ = writeln!(out, "samples: {}", stats.sample_count);
    out
}
