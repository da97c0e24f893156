//! Embedding-based scoring and top-k retrieval.
//!
//! `Score(q, d)` is the cosine similarity of the query and document
//! embeddings. Backends are pluggable: a deterministic offline embedder for
//! tests and scripted campaigns, and an HTTP client speaking the common
//! embeddings-endpoint shape for live runs. Ranked lists sort by score
//! descending with ties broken by ascending document id, so replays are
//! deterministic regardless of insertion order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, KnowledgeBase, PoisonedView, Query};
use crate::error::{Error, Result};

/// A fixed-length real vector produced by an embedder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("embedding vector must have dim > 0"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("embedding vector contains non-finite entries"));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// Cosine similarity of two vectors, in [-1, 1].
///
/// Both vectors must have the same dimension and be nonzero; cosine is
/// undefined on the zero vector.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.is_zero() || b.is_zero() {
        return Err(Error::validation("cosine undefined on the zero vector"));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.values.iter().zip(&b.values) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// A text embedding backend. Implementations must be deterministic for a
/// fixed backend id and input text.
pub trait Embedder: Send + Sync {
    /// Stable identifier, recorded in caches and library files.
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector>;
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Deterministic offline embedder: hashed bag of words.
///
/// Tokenization lowercases the text and splits on non-alphanumeric runs.
/// Each token adds 1.0 to the bucket `fnv1a64(token) mod dim`. Texts with
/// disjoint vocabularies (and no bucket collisions) therefore embed to
/// orthogonal vectors.
#[derive(Debug, Clone)]
pub struct HashedBowEmbedder {
    id: String,
    dim: usize,
}

impl HashedBowEmbedder {
    pub fn new(dim: usize) -> Self {
        HashedBowEmbedder {
            id: format!("hashed_bow/{dim}"),
            dim,
        }
    }

    pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
    }

    /// Bucket index for a token, exposed so tests can verify the formula.
    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dim as u64) as usize
    }
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        HashedBowEmbedder::new(256)
    }
}

impl Embedder for HashedBowEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::validation("cannot embed empty text"));
        }
        let mut values = vec![0.0; self.dim];
        for token in Self::tokenize(text) {
            values[self.bucket(&token)] += 1.0;
        }
        EmbeddingVector::new(values)
    }
}

/// HTTP embedder speaking the common embeddings-endpoint shape:
/// request `{model, input: [text]}`, response `{data: [{embedding: [...]}]}`.
pub struct HttpEmbedder {
    id: String,
    client: reqwest::blocking::Client,
    base_url: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, dim: usize, api_key: Option<String>) -> Self {
        let base_url = base_url.into();
        let model = model.into();
        HttpEmbedder {
            id: format!("http/{model}"),
            client: reqwest::blocking::Client::new(),
            base_url,
            model,
            api_key,
            dim,
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingsDatum>,
}

#[derive(Deserialize)]
struct EmbeddingsDatum {
    embedding: Vec<f64>,
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::validation("cannot embed empty text"));
        }
        let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
        let body = serde_json::json!({ "model": self.model, "input": [text] });
        let mut req = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        if !resp.status().is_success() {
            return Err(Error::Backend(format!(
                "embeddings endpoint returned {}: {}",
                resp.status(),
                resp.text().unwrap_or_default()
            )));
        }
        let parsed: EmbeddingsResponse = resp
            .json()
            .map_err(|e| Error::Backend(format!("malformed embeddings response: {e}")))?;
        let datum = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| Error::Backend("embeddings response carried no vectors".into()))?;
        EmbeddingVector::new(datum.embedding)
    }
}

/// One scored retrieval hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHit {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    backend: String,
    text_hash: String,
    vector: Vec<f64>,
}

fn text_hash(text: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Concurrent embedding cache keyed by (backend id, text hash).
///
/// All writers for a key produce identical values, so last-write-wins is
/// safe.
#[derive(Default)]
pub struct EmbeddingCache {
    map: Mutex<HashMap<(String, String), EmbeddingVector>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, backend: &str, text: &str) -> Option<EmbeddingVector> {
        self.map
            .lock()
            .unwrap()
            .get(&(backend.to_string(), text_hash(text)))
            .cloned()
    }

    pub fn put(&self, backend: &str, text: &str, vector: EmbeddingVector) {
        self.map
            .lock()
            .unwrap()
            .insert((backend.to_string(), text_hash(text)), vector);
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Persist as line-delimited `{backend, text_hash, vector}` records,
    /// sorted by key for stable output.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let map = self.map.lock().unwrap();
        let mut keys: Vec<_> = map.keys().cloned().collect();
        keys.sort();
        let mut out = String::new();
        for key in keys {
            let record = CacheRecord {
                backend: key.0.clone(),
                text_hash: key.1.clone(),
                vector: map[&key].values().to_vec(),
            };
            writeln!(out, "{}", serde_json::to_string(&record).unwrap()).unwrap();
        }
        let mut file = File::create(path)?;
        file.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)?;
        let cache = EmbeddingCache::new();
        {
            let mut map = cache.map.lock().unwrap();
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: CacheRecord = serde_json::from_str(&line).map_err(|e| {
                    Error::parse(path.display().to_string(), idx + 1, e.to_string())
                })?;
                map.insert(
                    (record.backend, record.text_hash),
                    EmbeddingVector::new(record.vector)?,
                );
            }
        }
        Ok(cache)
    }
}

/// An embedder plus cache: the retrieval side of a RAG system.
pub struct Retriever {
    embedder: Arc<dyn Embedder>,
    cache: EmbeddingCache,
}

impl Retriever {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        Retriever {
            embedder,
            cache: EmbeddingCache::new(),
        }
    }

    pub fn embedder_id(&self) -> &str {
        self.embedder.id()
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }

    /// Embed through the cache.
    pub fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if let Some(hit) = self.cache.get(self.embedder.id(), text) {
            return Ok(hit);
        }
        let vector = self.embedder.embed(text)?;
        if vector.dim() != self.embedder.dim() {
            return Err(Error::validation(format!(
                "backend '{}' produced dim {} (declared {})",
                self.embedder.id(),
                vector.dim(),
                self.embedder.dim()
            )));
        }
        self.cache.put(self.embedder.id(), text, vector.clone());
        Ok(vector)
    }

    /// Score(q, d): cosine similarity of the two texts' embeddings.
    pub fn score_texts(&self, query_text: &str, doc_text: &str) -> Result<f64> {
        cosine(&self.embed(query_text)?, &self.embed(doc_text)?)
    }

    fn rank<'a, I>(&self, query: &Query, docs: I, k: usize) -> Result<Vec<RankedHit>>
    where
        I: IntoIterator<Item = &'a Document>,
    {
        if k == 0 {
            return Err(Error::validation("k must be >= 1"));
        }
        let q_vec = self.embed(&query.text)?;
        let mut hits = Vec::new();
        for doc in docs {
            let d_vec = self.embed(&doc.text)?;
            hits.push(RankedHit {
                doc_id: doc.id.clone(),
                score: cosine(&q_vec, &d_vec)?,
            });
        }
        sort_hits(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    /// Top-k retrieval over a knowledge base: min(k, |kb|) hits sorted by
    /// score descending, ties by ascending doc id. Equivalent to a
    /// brute-force full scan.
    pub fn retrieve_topk(&self, query: &Query, kb: &KnowledgeBase, k: usize) -> Result<Vec<RankedHit>> {
        self.rank(query, kb.documents(), k)
    }

    /// Top-k retrieval over a poisoned view.
    pub fn retrieve_topk_poisoned(
        &self,
        query: &Query,
        view: &PoisonedView<'_>,
        k: usize,
    ) -> Result<Vec<RankedHit>> {
        self.rank(query, view.documents(), k)
    }

    /// Top-k retrieval over an explicit document slice.
    pub fn retrieve_topk_docs(&self, query: &Query, docs: &[Document], k: usize) -> Result<Vec<RankedHit>> {
        self.rank(query, docs.iter(), k)
    }

    /// Number of context documents scoring strictly higher than `candidate`.
    /// Equality does not count as superior.
    pub fn count_superior(
        &self,
        query: &Query,
        candidate: &Document,
        context: &[Document],
    ) -> Result<usize> {
        let refs: Vec<&Document> = context.iter().collect();
        self.count_superior_refs(query, candidate, &refs)
    }

    /// Borrowing variant of [`count_superior`](Self::count_superior).
    pub fn count_superior_refs(
        &self,
        query: &Query,
        candidate: &Document,
        context: &[&Document],
    ) -> Result<usize> {
        if context.is_empty() {
            return Err(Error::validation("count_superior requires a non-empty context"));
        }
        let q_vec = self.embed(&query.text)?;
        let cand_score = cosine(&q_vec, &self.embed(&candidate.text)?)?;
        let mut count = 0;
        for doc in context {
            if doc.id == candidate.id {
                continue;
            }
            if cosine(&q_vec, &self.embed(&doc.text)?)? > cand_score {
                count += 1;
            }
        }
        Ok(count)
    }
}

/// Sort by score descending, ties by ascending doc id. Scores are finite by
/// construction.
pub fn sort_hits(hits: &mut [RankedHit]) {
    hits.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
}
