//! Retrieval-based verification: embed a generated report, find the most
//! similar reference report, and substitute it when the similarity clears
//! the threshold.
//!
//! Embedding store ("EMB1", little-endian):
//!
//! ```text
//! magic "EMB1" | u16 version = 1 | u32 dim | u64 n
//! n x (u32 id_len | id bytes (UTF-8) | dim x f32)
//! u32 crc32 of everything above
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::evaluation::{cosine, EvalError};
use crate::hash::fnv1a64;
use crate::text::normalize;

pub const DEFAULT_TAU: f64 = 0.85;
pub const DEFAULT_EMBED_DIM: usize = 384;

const EMB_MAGIC: &[u8; 4] = b"EMB1";
const EMB_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum VerificationError {
    #[error("text has no tokens to embed")]
    EmptyText,
    #[error("embedding is the zero vector")]
    ZeroVector,
    #[error("embedding dim {found}, expected {expected}")]
    Dim { expected: usize, found: usize },
    #[error("reference corpus is empty")]
    EmptyCorpus,
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("no embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl VerificationError {
    pub fn is_io(&self) -> bool {
        matches!(self, VerificationError::Io { .. })
    }
}

fn from_eval(e: EvalError) -> VerificationError {
    match e {
        EvalError::DimMismatch(expected, found) => VerificationError::Dim { expected, found },
        EvalError::ZeroVector => VerificationError::ZeroVector,
        EvalError::Embedding(e) => e,
        EvalError::Io { path, source } => VerificationError::Io { path, source },
    }
}

pub trait EmbeddingProvider: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>, VerificationError>;
}

/// Signed feature hashing of normalized tokens into `dim` buckets, scaled to
/// unit length.
pub fn mock_embed(text: &str, dim: usize) -> Result<Vec<f32>, VerificationError> {
    if dim == 0 {
        return Err(VerificationError::Invalid("embedding dim must be positive".into()));
    }
    let tokens = normalize(text);
    if tokens.is_empty() {
        return Err(VerificationError::EmptyText);
    }
    let mut acc = vec![0.0f64; dim];
    for t in &tokens {
        let h = fnv1a64(t.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        acc[(h % dim as u64) as usize] += sign;
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(VerificationError::ZeroVector);
    }
    Ok(acc.iter().map(|v| (v / norm) as f32).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockEmbedder {
    pub dim: usize,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_EMBED_DIM }
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, VerificationError> {
        mock_embed(text, self.dim)
    }
}

/// Id-keyed vectors. As a provider it looks texts up verbatim as ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, ids: Vec::new(), vectors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<(), VerificationError> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(VerificationError::Dim { expected: self.dim, found: vector.len() });
        }
        if self.index.contains_key(&id) {
            return Err(VerificationError::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.vectors.push(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().map(String::as_str).zip(self.vectors.iter().map(Vec::as_slice))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(EMB_MAGIC);
        w.u16(EMB_VERSION);
        w.u32(self.dim as u32);
        w.u64(self.ids.len() as u64);
        for (id, v) in self.iter() {
            w.u32(id.len() as u32);
            w.bytes(id.as_bytes());
            for &x in v {
                w.f32(x);
            }
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, VerificationError> {
        let mut r = Reader::new(buf);
        r.expect_magic(EMB_MAGIC)?;
        let version = r.u16()?;
        if version != EMB_VERSION {
            return Err(CodecError::Version(version).into());
        }
        let dim = r.u32()? as usize;
        let n = r.u64()?;
        // Each record needs at least its length prefix and vector.
        let min = (n as u128) * (4 + 4 * dim as u128) + 22;
        if min > buf.len() as u128 {
            return Err(CodecError::Truncated { needed: min.min(usize::MAX as u128) as usize, have: buf.len() }.into());
        }
        let mut store = Self::new(dim);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|e| CodecError::Malformed(format!("id is not UTF-8: {e}")))?
                .to_string();
            let v = r.f32_vec(dim)?;
            store.insert(id, v)?;
        }
        r.finish()?;
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<(), VerificationError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| VerificationError::Io { path: path.to_path_buf(), source })
    }

    pub fn read(path: &Path) -> Result<Self, VerificationError> {
        let buf = std::fs::read(path).map_err(|source| VerificationError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&buf)
    }
}

impl EmbeddingProvider for EmbeddingStore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, VerificationError> {
        self.get(text).map(<[f32]>::to_vec).ok_or_else(|| VerificationError::MissingEmbedding(text.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub id: String,
    pub text: String,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCorpus {
    dim: usize,
    entries: Vec<CorpusEntry>,
}

impl ReferenceCorpus {
    pub fn new(dim: usize, entries: Vec<CorpusEntry>) -> Result<Self, VerificationError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(VerificationError::DuplicateId(e.id.clone()));
            }
            if e.embedding.len() != dim {
                return Err(VerificationError::Dim { expected: dim, found: e.embedding.len() });
            }
        }
        Ok(Self { dim, entries })
    }

    /// Embeds `(id, text)` reports with `provider`.
    pub fn embed(reports: Vec<(String, String)>, provider: &dyn EmbeddingProvider) -> Result<Self, VerificationError> {
        let entries = reports
            .into_par_iter()
            .map(|(id, text)| provider.embed(&text).map(|embedding| CorpusEntry { id, text, embedding }))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(provider.dim(), entries)
    }

    /// Pairs `(id, text)` reports with the store's vector of the same id.
    pub fn with_store(reports: Vec<(String, String)>, store: &EmbeddingStore) -> Result<Self, VerificationError> {
        let entries = reports
            .into_iter()
            .map(|(id, text)| match store.get(&id) {
                Some(v) => Ok(CorpusEntry { embedding: v.to_vec(), id, text }),
                None => Err(VerificationError::MissingEmbedding(id)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(store.dim(), entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Parses `id \t report` lines; blank lines are skipped.
pub fn parse_corpus_tsv(text: &str) -> Result<Vec<(String, String)>, VerificationError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let (id, report) = line
            .split_once('\t')
            .ok_or(VerificationError::Parse { line: i + 1, message: "expected id<TAB>report".into() })?;
        out.push((id.to_string(), report.to_string()));
    }
    Ok(out)
}

/// Index and cosine similarity of the most similar entry; the earliest
/// entry wins ties.
pub fn nearest(query: &[f32], corpus: &ReferenceCorpus) -> Result<(usize, f64), VerificationError> {
    if corpus.is_empty() {
        return Err(VerificationError::EmptyCorpus);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in corpus.entries.iter().enumerate() {
        let s = cosine(query, &e.embedding).map_err(from_eval)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    Ok(best.expect("corpus is non-empty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Replaced,
    Retained,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Replaced => "replaced",
            Action::Retained => "retained",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationResult {
    pub final_text: String,
    pub action: Action,
    pub best_id: String,
    pub best_similarity: f64,
}

/// Decision for an already-embedded report: replace iff similarity > `tau`.
pub fn verify_embedding(
    generated: &str,
    query: &[f32],
    corpus: &ReferenceCorpus,
    tau: f64,
) -> Result<VerificationResult, VerificationError> {
    let (i, sim) = nearest(query, corpus)?;
    let entry = &corpus.entries[i];
    let (final_text, action) =
        if sim > tau { (entry.text.clone(), Action::Replaced) } else { (generated.to_string(), Action::Retained) };
    Ok(VerificationResult { final_text, action, best_id: entry.id.clone(), best_similarity: sim })
}

pub fn verify_or_replace(
    generated: &str,
    corpus: &ReferenceCorpus,
    provider: &dyn EmbeddingProvider,
    tau: f64,
) -> Result<VerificationResult, VerificationError> {
    let query = provider.embed(generated)?;
    verify_embedding(generated, &query, corpus, tau)
}
