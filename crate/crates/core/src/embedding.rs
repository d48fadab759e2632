//! Model-service interfaces used by retrieval and evaluation, plus offline
//! implementations that need no model weights.
//!
//! The offline implementations are deterministic hashing models. They are
//! adequate for pipeline tests, smoke runs and reproducible fixtures; real
//! experiments point these traits at the sidecar service (see [`crate::sidecar`]).

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::tokenize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceError {
    #[error("service unavailable: {0}")]
    Unavailable(String),
    #[error("request rejected: {0}")]
    BadRequest(String),
    #[error("malformed service response: {0}")]
    Malformed(String),
}

/// Produces one vector per text (the retrieval encoder).
pub trait SentenceEmbedder: Send + Sync {
    fn embedder_id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed_sentence(&self, text: &str) -> Result<Vec<f32>, ServiceError>;
}

/// Per-token contextual vectors for BERTScore.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbeddings {
    pub tokens: Vec<String>,
    pub vectors: Vec<Vec<f32>>,
}

pub trait TokenEmbedder: Send + Sync {
    fn model_id(&self) -> &str;
    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, ServiceError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub text: String,
    pub label: String,
}

pub trait EntityRecognizer: Send + Sync {
    fn model_id(&self) -> &str;
    fn entities(&self, text: &str) -> Result<Vec<Entity>, ServiceError>;
}

/// Scales `v` to unit L2 norm in place. Returns `false` for a zero or
/// non-finite vector, which is left untouched.
pub fn normalize(v: &mut [f32]) -> bool {
    let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return false;
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    true
}

fn digest64(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part.as_bytes());
        hasher.update([0u8]);
    }
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// Feature-hashing sentence encoder over lowercase unigrams and bigrams.
#[derive(Debug, Clone)]
pub struct HashingSentenceEmbedder {
    dim: usize,
    id: String,
}

impl HashingSentenceEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self {
            dim,
            id: format!("hashing-sentence-v1-d{dim}"),
        }
    }
}

impl SentenceEmbedder for HashingSentenceEmbedder {
    fn embedder_id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_sentence(&self, text: &str) -> Result<Vec<f32>, ServiceError> {
        if text.trim().is_empty() {
            return Err(ServiceError::BadRequest("empty text".into()));
        }
        let tokens = tokenize(text);
        let mut v = vec![0f32; self.dim];
        let mut add = |feature: &[&str], weight: f32| {
            let h = digest64(feature);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign * weight;
        };
        for token in &tokens {
            add(&[token], 1.0);
        }
        for pair in tokens.windows(2) {
            add(&[&pair[0], &pair[1]], 0.5);
        }
        normalize(&mut v);
        Ok(v)
    }
}

/// Each distinct lowercase token maps to a fixed pseudo-random unit vector,
/// so identical tokens have cosine 1 and distinct tokens are near-orthogonal.
#[derive(Debug, Clone)]
pub struct HashingTokenEmbedder {
    dim: usize,
    id: String,
}

impl HashingTokenEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self {
            dim,
            id: format!("hashing-token-v1-d{dim}"),
        }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(digest64(&[token]));
        loop {
            let mut v: Vec<f32> = (0..self.dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            if normalize(&mut v) {
                return v;
            }
        }
    }
}

impl TokenEmbedder for HashingTokenEmbedder {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, ServiceError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(ServiceError::BadRequest("text has no tokens".into()));
        }
        let vectors = tokens.iter().map(|t| self.token_vector(t)).collect();
        Ok(TokenEmbeddings { tokens, vectors })
    }
}

/// Dictionary NER: longest-match lookup of known terms over the token stream.
#[derive(Debug, Clone)]
pub struct LexiconRecognizer {
    id: String,
    terms: Vec<(Vec<String>, String)>,
    max_len: usize,
}

const BUILTIN_LEXICON: &str = include_str!("../assets/lexicon.tsv");

impl LexiconRecognizer {
    /// `terms` yields `(surface form, label)` pairs.
    pub fn new<I, S, L>(id: impl Into<String>, terms: I) -> Self
    where
        I: IntoIterator<Item = (S, L)>,
        S: AsRef<str>,
        L: Into<String>,
    {
        let mut seen = BTreeSet::new();
        let mut list = Vec::new();
        for (surface, label) in terms {
            let tokens = tokenize(surface.as_ref());
            if !tokens.is_empty() && seen.insert(tokens.clone()) {
                list.push((tokens, label.into()));
            }
        }
        let max_len = list.iter().map(|(t, _)| t.len()).max().unwrap_or(0);
        Self {
            id: id.into(),
            terms: list,
            max_len,
        }
    }

    /// Parses `label<TAB>term` lines; `#` starts a comment.
    pub fn from_tsv(id: impl Into<String>, content: &str) -> Self {
        let terms = content
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .filter_map(|l| l.split_once('\t'))
            .map(|(label, term)| (term.trim().to_string(), label.trim().to_string()));
        Self::new(id, terms.collect::<Vec<_>>())
    }

    pub fn builtin() -> Self {
        Self::from_tsv("lexicon-builtin-v1", BUILTIN_LEXICON)
    }
}

impl EntityRecognizer for LexiconRecognizer {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn entities(&self, text: &str) -> Result<Vec<Entity>, ServiceError> {
        let tokens = tokenize(text);
        let mut found = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let longest = (1..=self.max_len.min(tokens.len() - i)).rev().find_map(|len| {
                let window = &tokens[i..i + len];
                self.terms
                    .iter()
                    .find(|(t, _)| t.as_slice() == window)
                    .map(|(_, label)| (len, label))
            });
            match longest {
                Some((len, label)) => {
                    found.push(Entity {
                        text: tokens[i..i + len].join(" "),
                        label: label.clone(),
                    });
                    i += len;
                }
                None => i += 1,
            }
        }
        Ok(found)
    }
}
