//! Report-quality metrics: BLEU-4, ROUGE-L, keyword Jaccard, embedding
//! cosine, and their weighted composite.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::text::normalize;
use crate::verification::{EmbeddingProvider, VerificationError};

pub const ROUGE_WEIGHT: f64 = 0.15;
pub const BLEU_WEIGHT: f64 = 0.15;
pub const KEYWORD_WEIGHT: f64 = 0.4;
pub const EMBEDDING_WEIGHT: f64 = 0.3;

/// Variant names written next to scores.
pub const METRIC_VARIANTS: &str = "rouge=ROUGE-L-F1 bleu=BLEU-4-add1 keyword=jaccard embedding=cosine";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("embedding dims differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error(transparent)]
    Embedding(#[from] VerificationError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreBreakdown {
    pub rouge: f64,
    pub bleu: f64,
    pub keyword: f64,
    pub embedding: f64,
    pub composite: f64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// BLEU-4 with add-one smoothing on zero higher-order matches.
pub fn bleu(gen: &[String], reference: &[String]) -> f64 {
    if gen.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let total = gen.len().saturating_sub(n - 1);
        let ref_counts = ngram_counts(reference, n);
        let matched: usize = ngram_counts(gen, n)
            .iter()
            .map(|(g, c)| (*c).min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            if n == 1 {
                return 0.0;
            }
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let bp = (1.0 - reference.len() as f64 / gen.len() as f64).min(0.0).exp();
    bp * (log_sum / 4.0).exp()
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1.
pub fn rouge(gen: &[String], reference: &[String]) -> f64 {
    if gen.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(gen, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / gen.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeywordLexicon {
    pub terms: BTreeSet<String>,
    pub stopwords: BTreeSet<String>,
}

const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "is", "it", "no", "not", "of", "on", "or",
    "that", "the", "this", "to", "was", "were", "with", "there", "these", "which",
];

impl KeywordLexicon {
    /// Empty term list with a small built-in English stopword list.
    pub fn with_default_stopwords() -> Self {
        Self { terms: BTreeSet::new(), stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect() }
    }

    /// Lowercased, trimmed, non-empty lines. Terms also listed as stopwords
    /// are dropped from the stopword set.
    pub fn from_lists(terms: &str, stopwords: &str) -> Self {
        let parse = |s: &str| -> BTreeSet<String> {
            s.lines().map(|l| l.trim().to_lowercase()).filter(|l| !l.is_empty()).collect()
        };
        let terms = parse(terms);
        let stopwords = parse(stopwords).difference(&terms).cloned().collect();
        Self { terms, stopwords }
    }

    pub fn from_files(terms: Option<&Path>, stopwords: Option<&Path>) -> Result<Self, EvalError> {
        let read = |p: Option<&Path>| -> Result<Option<String>, EvalError> {
            p.map(|p| std::fs::read_to_string(p).map_err(|source| EvalError::Io { path: p.to_path_buf(), source }))
                .transpose()
        };
        let t = read(terms)?.unwrap_or_default();
        match read(stopwords)? {
            Some(s) => Ok(Self::from_lists(&t, &s)),
            None => {
                let mut lex = Self::with_default_stopwords();
                lex.terms = Self::from_lists(&t, "").terms;
                lex.stopwords = lex.stopwords.difference(&lex.terms).cloned().collect();
                Ok(lex)
            }
        }
    }
}

pub fn extract_keywords(text: &str, lex: &KeywordLexicon) -> BTreeSet<String> {
    normalize(text)
        .into_iter()
        .filter(|t| {
            if lex.terms.is_empty() {
                t.chars().count() >= 2 && !lex.stopwords.contains(t)
            } else {
                lex.terms.contains(t)
            }
        })
        .collect()
}

/// Jaccard similarity; two empty sets score 1.
pub fn keyword_score(gen: &BTreeSet<String>, reference: &BTreeSet<String>) -> f64 {
    let union = gen.union(reference).count();
    if union == 0 {
        return 1.0;
    }
    gen.intersection(reference).count() as f64 / union as f64
}

/// Cosine similarity, computed in f64.
pub fn cosine<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::DimMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y): (f64, f64) = (x.into(), y.into());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok(dot / (na * nb).sqrt())
}

pub fn embedding_score(gen: &[f32], reference: &[f32]) -> Result<f64, EvalError> {
    cosine(gen, reference)
}

pub fn composite(rouge: f64, bleu: f64, keyword: f64, embedding: f64) -> ScoreBreakdown {
    ScoreBreakdown {
        rouge,
        bleu,
        keyword,
        embedding,
        composite: ROUGE_WEIGHT * rouge + BLEU_WEIGHT * bleu + KEYWORD_WEIGHT * keyword + EMBEDDING_WEIGHT * embedding,
    }
}

/// Scores one generated report against its reference. An empty text on
/// either side has no embedding; its embedding component is 0.
pub fn score_pair(
    generated: &str,
    reference: &str,
    lex: &KeywordLexicon,
    embedder: &dyn EmbeddingProvider,
) -> Result<ScoreBreakdown, EvalError> {
    let (g, r) = (normalize(generated), normalize(reference));
    let key = keyword_score(&extract_keywords(generated, lex), &extract_keywords(reference, lex));
    let emb = if g.is_empty() || r.is_empty() {
        0.0
    } else {
        embedding_score(&embedder.embed(generated)?, &embedder.embed(reference)?)?
    };
    Ok(composite(rouge(&g, &r), bleu(&g, &r), key, emb))
}

/// Scores `(id, generated, reference)` triples in parallel, preserving order.
pub fn score_pairs(
    pairs: &[(String, String, String)],
    lex: &KeywordLexicon,
    embedder: &dyn EmbeddingProvider,
) -> Result<Vec<ScoreBreakdown>, EvalError> {
    pairs.par_iter().map(|(_, g, r)| score_pair(g, r, lex, embedder)).collect()
}

/// `#` line naming weights and metric variants.
pub fn metadata_line() -> String {
    format!(
        "# weights rouge={ROUGE_WEIGHT} bleu={BLEU_WEIGHT} keyword={KEYWORD_WEIGHT} embedding={EMBEDDING_WEIGHT}; {METRIC_VARIANTS}"
    )
}

pub const SCORE_HEADER: &str = "id\trouge\tbleu\tkeyword\tembedding\tcomposite";

pub fn format_score_row(id: &str, s: &ScoreBreakdown) -> String {
    format!("{id}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", s.rouge, s.bleu, s.keyword, s.embedding, s.composite)
}
