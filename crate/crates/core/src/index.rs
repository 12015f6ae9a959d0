//! Exact cosine retrieval over demographic-summary embeddings and
//! rerank-based top-k selection.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{embed_batch, rerank, BackendError, Embedder, RerankRequest, Reranker};
use crate::summarize::SummaryStore;

pub const INDEX_MAGIC: &[u8; 4] = b"VRIX";
pub const INDEX_VERSION: u32 = 1;
pub const DEFAULT_TOP_N: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("summary store is empty")]
    EmptyStore,
    #[error("respondent `{0}` has an empty demographic summary")]
    EmptySummary(String),
    #[error("duplicate respondent id `{0}`")]
    DuplicateId(String),
    #[error("candidate `{0}` is not in the summary store")]
    MissingCandidate(String),
    #[error("candidate `{0}` has no values summary")]
    MissingValues(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no candidates to rerank")]
    NoCandidates,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("index file {path}: {reason}")]
    File { path: String, reason: String },
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, IndexError> {
    if a.len() != b.len() {
        return Err(IndexError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

fn normalized(row: &[f32]) -> Option<Vec<f32>> {
    let norm = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| row.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// Row-normalized embedding matrix keyed by respondent id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    backend_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub respondent_id: String,
    pub similarity: f64,
}

fn by_similarity(a: &Candidate, b: &Candidate) -> Ordering {
    b.similarity
        .partial_cmp(&a.similarity)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.respondent_id.cmp(&b.respondent_id))
}

impl EmbeddingIndex {
    /// Normalize and store `rows`, one per id.
    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<f32>>, backend_id: impl Into<String>) -> Result<Self, IndexError> {
        if ids.is_empty() {
            return Err(IndexError::EmptyStore);
        }
        if ids.len() != rows.len() {
            return Err(IndexError::DimensionMismatch { expected: ids.len(), got: rows.len() });
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(IndexError::DuplicateId(dup.clone()));
        }
        let dim = rows[0].len();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(IndexError::DimensionMismatch { expected: dim, got: row.len() });
            }
            data.extend(normalized(row).ok_or(IndexError::ZeroVector)?);
        }
        Ok(Self { ids, dim, data, backend_id: backend_id.into() })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
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

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.data.len() * 4 + self.ids.iter().map(|s| s.len() + 4).sum::<usize>());
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for s in std::iter::once(&self.backend_id).chain(&self.ids) {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut r = ByteReader(bytes);
        if r.take(4)? != INDEX_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let n = r.u64()? as usize;
        let dim = r.u32()? as usize;
        let backend_id = r.string()?;
        let ids = (0..n).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
        let data = r.take(n * dim * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if !r.0.is_empty() {
            return Err("trailing bytes".into());
        }
        Ok(Self { ids, dim, data, backend_id })
    }

    pub fn write(&self, path: &Path) -> Result<(), IndexError> {
        let err = |e: std::io::Error| IndexError::File { path: path.display().to_string(), reason: e.to_string() };
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(err)?;
        fs::rename(&tmp, path).map_err(err)
    }

    pub fn read(path: &Path) -> Result<Self, IndexError> {
        let file_err = |reason: String| IndexError::File { path: path.display().to_string(), reason };
        let bytes = fs::read(path).map_err(|e| file_err(e.to_string()))?;
        Self::from_bytes(&bytes).map_err(file_err)
    }
}

struct ByteReader<'a>(&'a [u8]);

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.0.len() < n {
            return Err("truncated".into());
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| e.to_string())
    }
}

/// Embed every demographic summary in `store`, in store order.
pub fn build_index(store: &SummaryStore, embedder: &dyn Embedder, batch: usize) -> Result<EmbeddingIndex, IndexError> {
    if store.is_empty() {
        return Err(IndexError::EmptyStore);
    }
    if let Some(r) = store.records().iter().find(|r| r.demographic_summary.trim().is_empty()) {
        return Err(IndexError::EmptySummary(r.respondent_id.clone()));
    }
    let ids: Vec<String> = store.records().iter().map(|r| r.respondent_id.clone()).collect();
    let texts: Vec<String> = store.records().iter().map(|r| r.demographic_summary.clone()).collect();
    let mut rows = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(batch.max(1)) {
        let part = embed_batch(chunk, embedder)?;
        if let (Some(first), Some(next)) = (rows.first().map(Vec::len), part.first().map(Vec::len)) {
            if first != next {
                return Err(IndexError::DimensionMismatch { expected: first, got: next });
            }
        }
        rows.extend(part);
    }
    EmbeddingIndex::from_rows(ids, rows, embedder.backend_id())
}

/// Exact top-`n` by cosine similarity, descending, ties by ascending id.
/// `exclude` drops one id (the query respondent itself).
pub fn retrieve_top_n(
    index: &EmbeddingIndex,
    query: &[f32],
    n: usize,
    exclude: Option<&str>,
) -> Result<Vec<Candidate>, IndexError> {
    if query.len() != index.dim {
        return Err(IndexError::DimensionMismatch { expected: index.dim, got: query.len() });
    }
    let q = normalized(query).ok_or(IndexError::ZeroVector)?;
    let mut all: Vec<Candidate> = (0..index.len())
        .filter(|&i| exclude != Some(index.ids[i].as_str()))
        .map(|i| {
            let dot: f64 = index.row(i).iter().zip(&q).map(|(&a, &b)| a as f64 * b as f64).sum();
            Candidate { respondent_id: index.ids[i].clone(), similarity: dot.clamp(-1.0, 1.0) }
        })
        .collect();
    if n < all.len() {
        all.select_nth_unstable_by(n, by_similarity);
        all.truncate(n);
    }
    all.sort_by(by_similarity);
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankedEntry {
    pub respondent_id: String,
    pub rerank_score: f64,
    pub demographic_summary: String,
    pub values_summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankedSet {
    pub k: usize,
    pub entries: Vec<RerankedEntry>,
}

/// Score every candidate by the reranker over (query, candidate demographic
/// summary) text pairs and keep the best `k`, carrying values summaries.
pub fn rerank_top_k(
    query_demo_summary: &str,
    candidates: &[Candidate],
    store: &SummaryStore,
    reranker: &dyn Reranker,
    k: usize,
) -> Result<RerankedSet, IndexError> {
    if k == 0 {
        return Err(IndexError::ZeroK);
    }
    if candidates.is_empty() {
        return Err(IndexError::NoCandidates);
    }
    let records = candidates
        .iter()
        .map(|c| store.get(&c.respondent_id).ok_or_else(|| IndexError::MissingCandidate(c.respondent_id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let req = RerankRequest {
        query_text: query_demo_summary.to_string(),
        candidates: records.iter().map(|r| (r.respondent_id.clone(), r.demographic_summary.clone())).collect(),
    };
    let scores = rerank(&req, reranker)?;
    let mut scored: Vec<(usize, f64)> = scores.iter().enumerate().map(|(i, (_, s))| (i, *s)).collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| records[a.0].respondent_id.cmp(&records[b.0].respondent_id))
    });
    let entries = scored
        .into_iter()
        .take(k)
        .map(|(i, score)| {
            let r = records[i];
            let values = r.values_summary.clone().ok_or_else(|| IndexError::MissingValues(r.respondent_id.clone()))?;
            Ok(RerankedEntry {
                respondent_id: r.respondent_id.clone(),
                rerank_score: score,
                demographic_summary: r.demographic_summary.clone(),
                values_summary: values,
            })
        })
        .collect::<Result<Vec<_>, IndexError>>()?;
    Ok(RerankedSet { k, entries })
}
