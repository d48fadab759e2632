//! Exact cosine-similarity retrieval of annotated training examples.
//!
//! # Index file layout
//!
//! All integers are little-endian.
//!
//! | field          | type                     |
//! |----------------|--------------------------|
//! | magic          | 8 bytes, `CLXEMBIX`      |
//! | format version | u32 (currently 1)        |
//! | dim            | u32                      |
//! | row count      | u64                      |
//! | embedder id    | u32 length + UTF-8 bytes |
//! | rows           | row count × (u32 id length + UTF-8 id bytes + dim × f32) |
//!
//! Rows are stored unit-normalized in insertion order, so a saved index reloads
//! bit-exactly.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concurrency::bounded_map_all;
use crate::corpus::{Corpus, CorpusSample};
use crate::embedding::{normalize, SentenceEmbedder, ServiceError};
use crate::schema::ClinicalReport;

const MAGIC: &[u8; 8] = b"CLXEMBIX";
const FORMAT_VERSION: u32 = 1;
const NORM_TOLERANCE: f64 = 1e-6;

/// Default number of in-context examples.
pub const DEFAULT_M: usize = 3;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("index is empty")]
    EmptyIndex,
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("embedding for {0:?} is degenerate (zero or non-finite)")]
    DegenerateEmbedding(String),
    #[error("embedding service: {0}")]
    EmbeddingService(#[from] ServiceError),
    #[error("query embedder {query:?} differs from index embedder {index:?}")]
    EmbedderMismatch { index: String, query: String },
    #[error("index example {0:?} is not in the training corpus")]
    UnknownExample(String),
    #[error("m must be at least 1")]
    InvalidM,
    #[error("index file: {0}")]
    Io(#[from] io::Error),
    #[error("index file is malformed: {0}")]
    Format(String),
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64, RetrievalError> {
    if u.len() != v.len() {
        return Err(RetrievalError::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0f64, 0f64, 0f64);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (f64::from(*a), f64::from(*b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub m: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { m: DEFAULT_M }
    }
}

/// Immutable set of unit-norm vectors keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    embedder_id: String,
    ids: Vec<String>,
    data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub sample_id: String,
    pub similarity: f64,
}

impl EmbeddingIndex {
    /// Normalizes every row; rejects zero rows, ragged rows and repeated ids.
    pub fn from_rows(
        embedder_id: impl Into<String>,
        dim: usize,
        rows: Vec<(String, Vec<f32>)>,
    ) -> Result<Self, RetrievalError> {
        if dim == 0 {
            return Err(RetrievalError::Format("dimension must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(rows.len());
        let mut ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, mut vector) in rows {
            if vector.len() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    found: vector.len(),
                });
            }
            if !seen.insert(id.clone()) {
                return Err(RetrievalError::DuplicateId(id));
            }
            if !normalize(&mut vector) {
                return Err(RetrievalError::DegenerateEmbedding(id));
            }
            ids.push(id);
            data.extend_from_slice(&vector);
        }
        Ok(Self {
            dim,
            embedder_id: embedder_id.into(),
            ids,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .zip(self.data.chunks_exact(self.dim))
            .map(|(id, row)| (id.as_str(), row))
    }

    pub fn write_to(&self, out: &mut impl Write) -> io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&u32::try_from(self.dim).map_err(io_invalid)?.to_le_bytes())?;
        out.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        write_str(out, &self.embedder_id)?;
        for (id, row) in self.rows() {
            write_str(out, id)?;
            for x in row {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self, RetrievalError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(RetrievalError::Format("bad magic".into()));
        }
        let version = read_u32(input)?;
        if version != FORMAT_VERSION {
            return Err(RetrievalError::Format(format!("unsupported version {version}")));
        }
        let dim = read_u32(input)? as usize;
        if dim == 0 {
            return Err(RetrievalError::Format("dimension must be positive".into()));
        }
        let count = read_u64(input)?;
        let embedder_id = read_str(input)?;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut seen = HashSet::new();
        let mut buf = vec![0u8; dim * 4];
        for _ in 0..count {
            let id = read_str(input)?;
            input.read_exact(&mut buf)?;
            let start = data.len();
            data.extend(
                buf.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))),
            );
            let norm = data[start..]
                .iter()
                .map(|x| f64::from(*x).powi(2))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(RetrievalError::Format(format!("row {id:?} has norm {norm}")));
            }
            if !seen.insert(id.clone()) {
                return Err(RetrievalError::DuplicateId(id));
            }
            ids.push(id);
        }
        let mut trailing = [0u8; 1];
        if input.read(&mut trailing)? != 0 {
            return Err(RetrievalError::Format("trailing bytes after last row".into()));
        }
        Ok(Self {
            dim,
            embedder_id,
            ids,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let mut input = BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut input)
    }
}

fn io_invalid<E: std::fmt::Display>(e: E) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e.to_string())
}

fn write_str(out: &mut impl Write, s: &str) -> io::Result<()> {
    out.write_all(&u32::try_from(s.len()).map_err(io_invalid)?.to_le_bytes())?;
    out.write_all(s.as_bytes())
}

fn read_u32(input: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(input: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(input: &mut impl Read) -> Result<String, RetrievalError> {
    let len = read_u32(input)? as usize;
    let mut bytes = vec![0u8; len];
    input.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| RetrievalError::Format(e.to_string()))
}

/// Embeds every training report, with at most `limit` embedding calls in flight.
pub fn build_index(
    train: &[CorpusSample],
    embedder: &dyn SentenceEmbedder,
    limit: usize,
) -> Result<EmbeddingIndex, RetrievalError> {
    if train.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let mut seen = HashSet::with_capacity(train.len());
    for sample in train {
        if !seen.insert(sample.id()) {
            return Err(RetrievalError::DuplicateId(sample.id().to_string()));
        }
    }
    let dim = embedder.dimension();
    let vectors = bounded_map_all(train, limit, |_, sample| {
        embedder.embed_sentence(sample.report.text())
    });
    let mut rows = Vec::with_capacity(train.len());
    for (sample, vector) in train.iter().zip(vectors) {
        rows.push((sample.id().to_string(), vector?));
    }
    EmbeddingIndex::from_rows(embedder.embedder_id(), dim, rows)
}

/// Orders by similarity descending, then sample id ascending.
fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.sample_id.cmp(&b.sample_id))
}

/// Exact top-`m` search. The query need not be unit length.
pub fn retrieve_top_m(
    index: &EmbeddingIndex,
    query: &[f32],
    m: usize,
) -> Result<Vec<Hit>, RetrievalError> {
    if m == 0 {
        return Err(RetrievalError::InvalidM);
    }
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    if query.len() != index.dim {
        return Err(RetrievalError::DimensionMismatch {
            expected: index.dim,
            found: query.len(),
        });
    }
    let q: Vec<f64> = query.iter().map(|x| f64::from(*x)).collect();
    let q_norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(q_norm.is_finite() && q_norm > 0.0) {
        return Err(RetrievalError::ZeroVector);
    }
    let mut hits: Vec<Hit> = index
        .rows()
        .map(|(id, row)| {
            let dot: f64 = row.iter().zip(&q).map(|(a, b)| f64::from(*a) * b).sum();
            Hit {
                sample_id: id.to_string(),
                similarity: (dot / q_norm).clamp(-1.0, 1.0),
            }
        })
        .collect();
    let m = m.min(hits.len());
    if m < hits.len() {
        hits.select_nth_unstable_by(m - 1, rank_order);
        hits.truncate(m);
    }
    hits.sort_by(rank_order);
    Ok(hits)
}

/// Binds an index to its embedder and the training examples it points at.
pub struct ExampleRetriever {
    index: EmbeddingIndex,
    embedder: Arc<dyn SentenceEmbedder>,
    examples: HashMap<String, CorpusSample>,
    m: usize,
}

impl ExampleRetriever {
    pub fn new(
        index: EmbeddingIndex,
        embedder: Arc<dyn SentenceEmbedder>,
        train: &Corpus,
        config: RetrievalConfig,
    ) -> Result<Self, RetrievalError> {
        if config.m == 0 {
            return Err(RetrievalError::InvalidM);
        }
        if embedder.embedder_id() != index.embedder_id() {
            return Err(RetrievalError::EmbedderMismatch {
                index: index.embedder_id().to_string(),
                query: embedder.embedder_id().to_string(),
            });
        }
        let by_id: HashMap<&str, &CorpusSample> = train.iter().map(|s| (s.id(), s)).collect();
        let mut examples = HashMap::with_capacity(index.len());
        for id in index.ids() {
            let sample = by_id
                .get(id.as_str())
                .ok_or_else(|| RetrievalError::UnknownExample(id.clone()))?;
            examples.insert(id.clone(), (*sample).clone());
        }
        Ok(Self {
            index,
            embedder,
            examples,
            m: config.m,
        })
    }

    pub fn index(&self) -> &EmbeddingIndex {
        &self.index
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn embedder_id(&self) -> &str {
        self.index.embedder_id()
    }

    /// The `m` most similar training examples, best first. An index entry
    /// sharing the query's id is never returned.
    pub fn examples_for(
        &self,
        report: &ClinicalReport,
    ) -> Result<Vec<(&CorpusSample, f64)>, RetrievalError> {
        let query = self.embedder.embed_sentence(report.text())?;
        let hits = retrieve_top_m(&self.index, &query, self.m + 1)?;
        Ok(hits
            .into_iter()
            .filter(|h| h.sample_id != report.id())
            .take(self.m)
            .map(|h| (&self.examples[&h.sample_id], h.similarity))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashingSentenceEmbedder;
    use crate::schema::{Language, StructuredReport};

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[2.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(RetrievalError::ZeroVector)));
    }

    fn index3() -> EmbeddingIndex {
        EmbeddingIndex::from_rows(
            "test",
            2,
            vec![
                ("a".into(), vec![1.0, 0.0]),
                ("b".into(), vec![0.0, 3.0]),
                ("c".into(), vec![1.0, 1.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn rows_are_unit_norm() {
        let index = index3();
        assert_eq!(index.len(), 3);
        for (_, row) in index.rows() {
            let n: f64 = row.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn construction_errors() {
        let dup = EmbeddingIndex::from_rows("t", 1, vec![("a".into(), vec![1.0]), ("a".into(), vec![2.0])]);
        assert!(matches!(dup, Err(RetrievalError::DuplicateId(_))));
        let zero = EmbeddingIndex::from_rows("t", 2, vec![("a".into(), vec![0.0, 0.0])]);
        assert!(matches!(zero, Err(RetrievalError::DegenerateEmbedding(_))));
    }

    #[test]
    fn query_equal_to_row_ranks_first() {
        let index = index3();
        let hits = retrieve_top_m(&index, index.row(1), 1).unwrap();
        assert_eq!(hits[0].sample_id, "b");
        assert!((hits[0].similarity - 1.0).abs() < 1e-9);
        let all = retrieve_top_m(&index, &[1.0, 0.0], 10).unwrap();
        let order: Vec<_> = all.iter().map(|h| h.sample_id.as_str()).collect();
        assert_eq!(order, ["a", "c", "b"]);
    }

    #[test]
    fn ties_break_by_id() {
        let index = EmbeddingIndex::from_rows(
            "t",
            2,
            vec![("z".into(), vec![1.0, 0.0]), ("m".into(), vec![1.0, 0.0]), ("a".into(), vec![0.0, 1.0])],
        )
        .unwrap();
        let hits = retrieve_top_m(&index, &[1.0, 0.0], 2).unwrap();
        assert_eq!(hits[0].sample_id, "m");
        assert_eq!(hits[1].sample_id, "z");
    }

    #[test]
    fn search_errors() {
        let index = index3();
        assert!(matches!(retrieve_top_m(&index, &[1.0], 1), Err(RetrievalError::DimensionMismatch { .. })));
        assert!(matches!(retrieve_top_m(&index, &[1.0, 0.0], 0), Err(RetrievalError::InvalidM)));
        let empty = EmbeddingIndex::from_rows("t", 2, vec![]).unwrap();
        assert!(matches!(retrieve_top_m(&empty, &[1.0, 0.0], 1), Err(RetrievalError::EmptyIndex)));
    }

    #[test]
    fn persistence_round_trip() {
        let index = index3();
        let mut bytes = Vec::new();
        index.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], b"CLXEMBIX");
        let back = EmbeddingIndex::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, index);
        let mut truncated = &bytes[..bytes.len() - 1];
        assert!(EmbeddingIndex::read_from(&mut truncated).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(EmbeddingIndex::read_from(&mut extra.as_slice()).is_err());
    }

    fn sample(id: &str, text: &str) -> CorpusSample {
        CorpusSample {
            report: ClinicalReport::new(id, Language::En, text).unwrap(),
            gold: StructuredReport::new().with(crate::schema::Category::Age, "40"),
            source_id: id.into(),
        }
    }

    #[test]
    fn build_and_retrieve_examples() {
        let train = Corpus::new(vec![
            sample("t1", "woman with sepsis and pneumonia"),
            sample("t2", "man with a broken leg after a fall"),
            sample("t3", "child with fever and cough"),
        ])
        .unwrap();
        let embedder = Arc::new(HashingSentenceEmbedder::new(64));
        let index = build_index(train.samples(), embedder.as_ref(), 2).unwrap();
        assert_eq!(index.len(), 3);
        assert_eq!(index.dim(), 64);
        let retriever =
            ExampleRetriever::new(index, embedder, &train, RetrievalConfig { m: 2 }).unwrap();
        let query = ClinicalReport::new("q", Language::En, "elderly woman with sepsis").unwrap();
        let examples = retriever.examples_for(&query).unwrap();
        assert_eq!(examples.len(), 2);
        assert_eq!(examples[0].0.id(), "t1");
        let own = ClinicalReport::new("t1", Language::En, "woman with sepsis and pneumonia").unwrap();
        assert!(retriever.examples_for(&own).unwrap().iter().all(|(s, _)| s.id() != "t1"));
    }

    #[test]
    fn duplicate_training_ids_rejected() {
        let train = vec![sample("t1", "a"), sample("t1", "b")];
        let embedder = HashingSentenceEmbedder::new(8);
        assert!(matches!(build_index(&train, &embedder, 1), Err(RetrievalError::DuplicateId(_))));
    }

    #[test]
    fn embedder_mismatch_is_an_error() {
        let train = Corpus::new(vec![sample("t1", "fever")]).unwrap();
        let index = build_index(train.samples(), &HashingSentenceEmbedder::new(8), 1).unwrap();
        let other = Arc::new(HashingSentenceEmbedder::new(16));
        assert!(matches!(
            ExampleRetriever::new(index, other, &train, RetrievalConfig::default()),
            Err(RetrievalError::EmbedderMismatch { .. })
        ));
    }
}
