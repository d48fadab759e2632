//! Synthetic corpora, scripted chat endpoints and config builders shared by
//! the CLI test targets.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use clinex::config::{EmbedderKind, NerBackend, TokenBackend};
use clinex::ExperimentConfig;
use clinex_core::corpus::{write_corpus, Corpus, CorpusFormat, CorpusSample};
use clinex_core::inference::{ChatRequest, ChatTransport, FnTransport};
use clinex_core::prompting::Mode;
use clinex_core::schema::{serialize_report, Category, ClinicalReport, Language, StructuredReport};

// every value has at least two tokens, so bigram scores are defined when pred = gold
const DIAGNOSES: [&str; 6] = [
    "severe sepsis",
    "community acquired pneumonia",
    "heart failure",
    "ischemic stroke",
    "acute asthma",
    "pulmonary tuberculosis",
];
const DRUGS: [&str; 6] = ["aspirin", "warfarin", "metformin", "insulin", "heparin", "vancomycin"];
const SYMPTOMS: [&str; 5] = ["high fever", "dry cough", "exertional dyspnea", "chest pain", "chronic fatigue"];

/// Deterministic synthetic sample `i`. Diagnosis is always present; other
/// categories appear on fixed residues so presence varies.
pub fn synthetic_sample(i: usize) -> CorpusSample {
    let id = format!("s{i:04}");
    let diagnosis = DIAGNOSES[i % DIAGNOSES.len()];
    let drug = DRUGS[(i / 2) % DRUGS.len()];
    let symptom = SYMPTOMS[(i / 3) % SYMPTOMS.len()];
    let age = 20 + (i * 7) % 60;
    let gender = if i.is_multiple_of(2) { "female" } else { "male" };
    let mut gold = StructuredReport::new()
        .with(Category::Age, &format!("{age} years"))
        .with(Category::Gender, &format!("{gender} patient"))
        .with(Category::Diagnosis, diagnosis)
        .with(Category::SignsSymptoms, &format!("{symptom}; {}", SYMPTOMS[(i + 1) % SYMPTOMS.len()]));
    if !i.is_multiple_of(3) {
        gold = gold.with(Category::PharmacologicalTherapy, &format!("{drug} 100 mg daily"));
    }
    if i % 4 == 1 {
        gold = gold.with(Category::Comorbidities, "type 2 diabetes; arterial hypertension");
    }
    if i % 5 == 2 {
        gold = gold.with(Category::LaboratoryValues, &format!("CRP {} mg/L", 10 + i % 90));
    }
    if i % 7 == 3 {
        gold = gold.with(Category::SocialHistory, "lives alone; retired teacher");
    }
    let text = format!(
        "Case {id}: A {age}-year-old {gender} presented with {symptom}. Workup revealed {diagnosis}. \
         The patient was treated with {drug} and recovered."
    );
    CorpusSample {
        report: ClinicalReport::new(id.clone(), Language::En, text).unwrap(),
        gold,
        source_id: format!("PMC{i:06}"),
    }
}

pub fn synthetic_corpus(n: usize) -> Corpus {
    Corpus::new((0..n).map(synthetic_sample).collect()).unwrap()
}

pub fn write_synthetic(path: &Path, n: usize) -> Corpus {
    let corpus = synthetic_corpus(n);
    write_corpus(&corpus, path, CorpusFormat::Jsonl).unwrap();
    corpus
}

/// The id of the report being asked about: prompts end with the target
/// report, so the last `Case <id>:` marker wins.
pub fn target_id(request: &ChatRequest) -> String {
    let user = &request.messages.last().unwrap().content;
    let at = user.rfind("Case ").expect("prompt holds a report");
    user[at + 5..].split(':').next().unwrap().to_string()
}

/// Endpoint answering each report with `answer(gold)` serialized.
pub fn scripted<F>(corpus: &Corpus, answer: F) -> Arc<dyn ChatTransport>
where
    F: Fn(&StructuredReport) -> String + Send + Sync + 'static,
{
    let gold: HashMap<String, StructuredReport> =
        corpus.iter().map(|s| (s.id().to_string(), s.gold.clone())).collect();
    Arc::new(FnTransport(move |req: &ChatRequest| {
        let id = target_id(req);
        Ok(answer(&gold[&id]))
    }))
}

pub fn echo_gold(corpus: &Corpus) -> Arc<dyn ChatTransport> {
    scripted(corpus, |g| format!("Here is the extraction:\n```json\n{}\n```", serialize_report(g)))
}

pub fn omit_category(corpus: &Corpus, category: Category) -> Arc<dyn ChatTransport> {
    scripted(corpus, move |g| {
        let mut g = g.clone();
        g.remove(category);
        serialize_report(&g)
    })
}

/// Offline config: hashing embedders, lexicon NER, no credentials.
pub fn offline_config(corpus: &Path, output: &Path, mode: Mode) -> ExperimentConfig {
    let toml = format!(
        r#"
label = "mock-model"
corpus = {corpus:?}
output_dir = {output:?}
seed = 7
mode = "{mode}"
concurrency = 4

[endpoint]
base_url = "http://127.0.0.1:9/v1"
model = "mock-model"
base_backoff_ms = 1

[retrieval]
embedder = "hashing"
hashing_dim = 64

[evaluation]
token_embedder = "hashing"
ner = "lexicon"
"#,
        corpus = corpus.display().to_string(),
        output = output.display().to_string(),
        mode = mode.as_str(),
    );
    let config = ExperimentConfig::from_toml_str(&toml, &[]).unwrap();
    assert_eq!(config.retrieval.embedder, Some(EmbedderKind::Hashing));
    assert_eq!(config.evaluation.token_embedder, TokenBackend::Hashing);
    assert_eq!(config.evaluation.ner, NerBackend::Lexicon);
    config
}
