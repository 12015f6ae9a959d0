//! Capability contracts for text generation, embedding and reranking.
//!
//! Three traits describe what the pipeline needs from models. Each has a
//! JSON-over-HTTP adapter and a deterministic in-process mock. Generation
//! goes through [`GenerationService`], which adds the content-addressed
//! response cache whose keys double as provenance hashes.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::{debug, warn};

use crate::util::{digest_parts, substream, tokens};

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("malformed backend response: {0}")]
    Decode(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("reranker returned no score for candidate `{0}`")]
    MissingScore(String),
    #[error("response cache: {0}")]
    Cache(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Provenance label, e.g. `summary/topic/r17/Religious Values`.
    pub tag: String,
}

impl GenerationRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>, tag: impl Into<String>) -> Self {
        Self {
            system_prompt: system.into(),
            user_prompt: user.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            tag: tag.into(),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    fn validate(&self) -> Result<(), BackendError> {
        if self.system_prompt.trim().is_empty() || self.user_prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("prompts must be non-empty".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!("temperature {} < 0", self.temperature)));
        }
        Ok(())
    }

    /// Cache key and provenance hash.
    pub fn request_hash(&self, backend_id: &str) -> String {
        digest_parts([
            "generation/v1",
            self.system_prompt.as_str(),
            self.user_prompt.as_str(),
            &format!("{:?}", self.temperature),
            backend_id,
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRequest {
    pub query_text: String,
    pub candidates: Vec<(String, String)>,
}

pub trait Generator: Send + Sync {
    /// Stable identifier folded into cache keys. Must never contain secrets.
    fn backend_id(&self) -> String;
    fn complete(&self, req: &GenerationRequest) -> Result<String, BackendError>;
}

pub trait Embedder: Send + Sync {
    fn backend_id(&self) -> String;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError>;
}

pub trait Reranker: Send + Sync {
    fn backend_id(&self) -> String;
    /// One `(candidate id, score)` per candidate, any order.
    fn score(&self, req: &RerankRequest) -> Result<Vec<(String, f64)>, BackendError>;
}

/// Embed `texts`, checking order alignment and a shared dimension.
pub fn embed_batch(texts: &[String], backend: &dyn Embedder) -> Result<Vec<Vec<f32>>, BackendError> {
    if texts.is_empty() {
        return Err(BackendError::InvalidRequest("empty embedding batch".into()));
    }
    let vectors = backend.embed(texts)?;
    if vectors.len() != texts.len() {
        return Err(BackendError::Decode(format!(
            "{} embeddings returned for {} texts",
            vectors.len(),
            texts.len()
        )));
    }
    let dim = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(BackendError::DimensionMismatch { expected: dim, got: v.len() });
    }
    Ok(vectors)
}

/// Score every candidate; the result follows the request's candidate order.
pub fn rerank(req: &RerankRequest, backend: &dyn Reranker) -> Result<Vec<(String, f64)>, BackendError> {
    if req.candidates.is_empty() {
        return Err(BackendError::InvalidRequest("no rerank candidates".into()));
    }
    let mut ids = HashSet::with_capacity(req.candidates.len());
    if let Some((id, _)) = req.candidates.iter().find(|(id, _)| !ids.insert(id.as_str())) {
        return Err(BackendError::InvalidRequest(format!("duplicate candidate id `{id}`")));
    }
    let scored = backend.score(req)?;
    let by_id: std::collections::HashMap<&str, f64> = scored.iter().map(|(id, s)| (id.as_str(), *s)).collect();
    req.candidates
        .iter()
        .map(|(id, _)| match by_id.get(id.as_str()) {
            Some(s) if s.is_finite() => Ok((id.clone(), *s)),
            _ => Err(BackendError::MissingScore(id.clone())),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Response cache

/// One cached generation, stored as `<dir>/<hash[..2]>/<hash>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub request_hash: String,
    pub backend_id: String,
    pub tag: String,
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub response: String,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| BackendError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(&hash[..2]).join(format!("{hash}.json"))
    }

    pub fn get(&self, hash: &str) -> Result<Option<CacheRecord>, BackendError> {
        match fs::read(self.path(hash)) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| BackendError::Cache(format!("corrupt record {hash}: {e}"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(BackendError::Cache(e.to_string())),
        }
    }

    /// Atomic write through a uniquely named temp file and rename, so
    /// concurrent writers of one key never expose a partial record.
    pub fn put(&self, record: &CacheRecord) -> Result<(), BackendError> {
        let path = self.path(&record.request_hash);
        let parent = path.parent().expect("cache path has a parent");
        fs::create_dir_all(parent).map_err(|e| BackendError::Cache(e.to_string()))?;
        let mut tmp = tempfile_in(parent).map_err(|e| BackendError::Cache(e.to_string()))?;
        let bytes = serde_json::to_vec(record).expect("cache record serializes");
        tmp.1.write_all(&bytes).map_err(|e| BackendError::Cache(e.to_string()))?;
        drop(tmp.1);
        fs::rename(&tmp.0, &path).map_err(|e| BackendError::Cache(e.to_string()))
    }

    /// Every record in the cache, ordered by hash.
    pub fn records(&self) -> Result<Vec<CacheRecord>, BackendError> {
        let mut paths = Vec::new();
        for shard in fs::read_dir(&self.dir).map_err(|e| BackendError::Cache(e.to_string()))? {
            let shard = shard.map_err(|e| BackendError::Cache(e.to_string()))?.path();
            if !shard.is_dir() {
                continue;
            }
            for entry in fs::read_dir(&shard).map_err(|e| BackendError::Cache(e.to_string()))? {
                let p = entry.map_err(|e| BackendError::Cache(e.to_string()))?.path();
                if p.extension().is_some_and(|e| e == "json") {
                    paths.push(p);
                }
            }
        }
        paths.sort();
        paths
            .iter()
            .map(|p| {
                let bytes = fs::read(p).map_err(|e| BackendError::Cache(e.to_string()))?;
                serde_json::from_slice(&bytes).map_err(|e| BackendError::Cache(format!("{}: {e}", p.display())))
            })
            .collect()
    }
}

fn tempfile_in(dir: &Path) -> std::io::Result<(PathBuf, fs::File)> {
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    loop {
        let n = COUNTER.fetch_add(1, Ordering::Relaxed);
        let p = dir.join(format!(".tmp-{}-{n}", std::process::id()));
        match fs::OpenOptions::new().write(true).create_new(true).open(&p) {
            Ok(f) => return Ok((p, f)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub request_hash: String,
    pub cached: bool,
}

/// A generator plus optional response cache.
#[derive(Clone)]
pub struct GenerationService {
    backend: Arc<dyn Generator>,
    cache: Option<ResponseCache>,
}

impl GenerationService {
    pub fn new(backend: Arc<dyn Generator>, cache: Option<ResponseCache>) -> Self {
        Self { backend, cache }
    }

    pub fn backend_id(&self) -> String {
        self.backend.backend_id()
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<Generation, BackendError> {
        req.validate()?;
        let backend_id = self.backend.backend_id();
        let request_hash = req.request_hash(&backend_id);
        if let Some(cache) = &self.cache {
            if let Some(rec) = cache.get(&request_hash)? {
                return Ok(Generation { text: rec.response, request_hash, cached: true });
            }
        }
        let text = self.backend.complete(req)?;
        if text.trim().is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        if let Some(cache) = &self.cache {
            cache.put(&CacheRecord {
                request_hash: request_hash.clone(),
                backend_id,
                tag: req.tag.clone(),
                system_prompt: req.system_prompt.clone(),
                user_prompt: req.user_prompt.clone(),
                temperature: req.temperature,
                max_tokens: req.max_tokens,
                response: text.clone(),
            })?;
        }
        Ok(Generation { text, request_hash, cached: false })
    }
}

// ---------------------------------------------------------------------------
// Mocks

/// Echoes the user prompt under a fixed heading. Counts calls.
#[derive(Debug, Default)]
pub struct EchoGenerator {
    calls: AtomicUsize,
}

impl EchoGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Generator for EchoGenerator {
    fn backend_id(&self) -> String {
        "mock-echo".into()
    }

    fn complete(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(format!("Summary:\n{}", req.user_prompt.trim()))
    }
}

/// Picks one of the options listed in the prompt by hashing the prompt, and
/// answers in the canonical JSON form.
#[derive(Debug, Default)]
pub struct HashAnswerer {
    calls: AtomicUsize,
}

impl HashAnswerer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Option codes listed in the last `Options:` block of a prompt.
pub fn listed_option_codes(prompt: &str) -> Vec<i64> {
    let Some(start) = prompt.rfind("Options:\n") else {
        return Vec::new();
    };
    prompt[start + "Options:\n".len()..]
        .lines()
        .map_while(|line| line.split_once(". ").and_then(|(code, _)| code.trim().parse().ok()))
        .collect()
}

impl Generator for HashAnswerer {
    fn backend_id(&self) -> String {
        "mock-hash-answerer".into()
    }

    fn complete(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let codes = listed_option_codes(&req.user_prompt);
        if codes.is_empty() {
            return Ok("I cannot tell which options are available.".into());
        }
        let h = digest_parts([req.system_prompt.as_str(), req.user_prompt.as_str()]);
        let pick = u64::from_str_radix(&h[..15], 16).expect("hex digest") as usize % codes.len();
        Ok(format!("{{\"answer\": {}}}", codes[pick]))
    }
}

/// Feature-hashing embedder: every token maps to a fixed pseudo-random
/// vector and a text embeds as the sum over its tokens.
#[derive(Debug)]
pub struct HashEmbedder {
    dim: usize,
    calls: AtomicUsize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn token_vector(&self, token: &str, out: &mut [f32]) {
        let mut rng = substream(0, &["hash-embedder", token]);
        for x in out.iter_mut() {
            *x += rng.random_range(-1.0f32..1.0);
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0f32; self.dim];
        let mut any = false;
        for t in tokens(text) {
            self.token_vector(&t, &mut v);
            any = true;
        }
        if !any {
            // token-free text still gets a nonzero, text-specific vector
            self.token_vector(&format!("\u{0}raw:{text}"), &mut v);
        }
        v
    }
}

impl Embedder for HashEmbedder {
    fn backend_id(&self) -> String {
        format!("mock-hash-embedder/{}", self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Token-set Jaccard overlap: `|Q ∩ C| / |Q ∪ C|`.
pub fn token_overlap(query: &str, candidate: &str) -> f64 {
    let q: HashSet<String> = tokens(query).collect();
    let c: HashSet<String> = tokens(candidate).collect();
    let union = q.union(&c).count();
    if union == 0 {
        return 0.0;
    }
    q.intersection(&c).count() as f64 / union as f64
}

#[derive(Debug, Default)]
pub struct OverlapReranker {
    calls: AtomicUsize,
}

impl OverlapReranker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Reranker for OverlapReranker {
    fn backend_id(&self) -> String {
        "mock-overlap-reranker".into()
    }

    fn score(&self, req: &RerankRequest) -> Result<Vec<(String, f64)>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(req
            .candidates
            .iter()
            .map(|(id, text)| (id.clone(), token_overlap(&req.query_text, text)))
            .collect())
    }
}

// ---------------------------------------------------------------------------
// HTTP adapter

fn default_retries() -> u32 {
    3
}

fn default_backoff() -> Vec<u64> {
    vec![500, 1000, 2000, 4000]
}

fn default_concurrency() -> usize {
    4
}

fn default_timeout() -> u64 {
    120
}

/// Connection settings for a JSON-over-HTTP backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub endpoint: String,
    #[serde(default)]
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Sleep before retry `i` is `backoff_ms[min(i, len - 1)]`.
    #[serde(default = "default_backoff")]
    pub backoff_ms: Vec<u64>,
    #[serde(default = "default_concurrency")]
    pub concurrency_limit: usize,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl BackendConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: String::new(),
            auth_env: None,
            retries: default_retries(),
            backoff_ms: default_backoff(),
            concurrency_limit: default_concurrency(),
            cache_dir: None,
            timeout_secs: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.concurrency_limit == 0 {
            return Err(BackendError::Config("concurrency_limit must be at least 1".into()));
        }
        if self.endpoint.is_empty() {
            return Err(BackendError::Config("endpoint is empty".into()));
        }
        Ok(())
    }

    fn backoff(&self, attempt: usize) -> Duration {
        let ms = self.backoff_ms.get(attempt).or(self.backoff_ms.last()).copied().unwrap_or(0);
        Duration::from_millis(ms)
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> GatePass<'_> {
        let mut free = self.free.lock().expect("gate poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate poisoned");
        }
        *free -= 1;
        GatePass(self)
    }
}

struct GatePass<'a>(&'a Gate);

impl Drop for GatePass<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct HttpClient {
    config: BackendConfig,
    agent: ureq::Agent,
    gate: Gate,
    requests: AtomicUsize,
}

impl HttpClient {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let gate = Gate::new(config.concurrency_limit);
        Ok(Self { config, agent, gate, requests: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Total HTTP requests sent, retries included.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn token(&self) -> Result<Option<String>, BackendError> {
        match &self.config.auth_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| BackendError::Config(format!("environment variable `{var}` is not set"))),
        }
    }

    /// POST `body`, retrying transport failures, 429 and 5xx responses.
    pub fn post_json(&self, body: &Value) -> Result<Value, BackendError> {
        let token = self.token()?;
        let mut attempt = 0usize;
        loop {
            let outcome = {
                let _pass = self.gate.acquire();
                self.requests.fetch_add(1, Ordering::SeqCst);
                let mut req = self.agent.post(&self.config.endpoint);
                if let Some(t) = &token {
                    req = req.header("Authorization", &format!("Bearer {t}"));
                }
                match req.send_json(body) {
                    Ok(mut resp) => {
                        let status = resp.status().as_u16();
                        if (200..300).contains(&status) {
                            return resp
                                .body_mut()
                                .read_json::<Value>()
                                .map_err(|e| BackendError::Decode(e.to_string()));
                        }
                        let text = resp.body_mut().read_to_string().unwrap_or_default();
                        BackendError::Status { status, body: text }
                    }
                    Err(e) => BackendError::Transport(e.to_string()),
                }
            };
            let retryable = match &outcome {
                BackendError::Transport(_) => true,
                BackendError::Status { status, .. } => *status == 429 || *status >= 500,
                _ => false,
            };
            if !retryable || attempt >= self.config.retries as usize {
                return Err(outcome);
            }
            let wait = self.config.backoff(attempt);
            warn!(attempt, ?wait, error = %outcome, "retrying backend request");
            std::thread::sleep(wait);
            attempt += 1;
        }
    }
}

/// Chat-completions style generation endpoint.
#[derive(Debug)]
pub struct HttpGenerator {
    client: HttpClient,
}

impl HttpGenerator {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        Ok(Self { client: HttpClient::new(config)? })
    }

    pub fn client(&self) -> &HttpClient {
        &self.client
    }
}

impl Generator for HttpGenerator {
    fn backend_id(&self) -> String {
        format!("http-generate:{}@{}", self.client.config.model, self.client.config.endpoint)
    }

    fn complete(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        let body = json!({
            "model": self.client.config.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        debug!(tag = %req.tag, "generation request");
        let resp = self.client.post_json(&body)?;
        let text = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Decode("missing choices[0].message.content".into()))?;
        if text.trim().is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        Ok(text.to_string())
    }
}

#[derive(Debug)]
pub struct HttpEmbedder {
    client: HttpClient,
}

impl HttpEmbedder {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        Ok(Self { client: HttpClient::new(config)? })
    }
}

fn as_f32_vec(v: &Value) -> Option<Vec<f32>> {
    v.as_array()?.iter().map(|x| x.as_f64().map(|f| f as f32)).collect()
}

impl Embedder for HttpEmbedder {
    fn backend_id(&self) -> String {
        format!("http-embed:{}@{}", self.client.config.model, self.client.config.endpoint)
    }

    /// Accepts `{"data": [{"embedding": [..]}, ..]}` or `{"embeddings": [[..], ..]}`.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        let mut body = json!({ "input": texts });
        if !self.client.config.model.is_empty() {
            body["model"] = json!(self.client.config.model);
        }
        let resp = self.client.post_json(&body)?;
        let rows: Option<Vec<Vec<f32>>> = if let Some(data) = resp.get("data").and_then(Value::as_array) {
            data.iter().map(|d| d.get("embedding").and_then(as_f32_vec)).collect()
        } else {
            resp.get("embeddings").and_then(Value::as_array).and_then(|a| a.iter().map(as_f32_vec).collect())
        };
        rows.ok_or_else(|| BackendError::Decode("no embeddings in response".into()))
    }
}

#[derive(Debug)]
pub struct HttpReranker {
    client: HttpClient,
}

impl HttpReranker {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        Ok(Self { client: HttpClient::new(config)? })
    }
}

impl Reranker for HttpReranker {
    fn backend_id(&self) -> String {
        format!("http-rerank:{}@{}", self.client.config.model, self.client.config.endpoint)
    }

    /// Accepts `{"results": [{"index": i, "relevance_score": s}, ..]}` or
    /// `{"scores": [..]}` aligned with the documents.
    fn score(&self, req: &RerankRequest) -> Result<Vec<(String, f64)>, BackendError> {
        let docs: Vec<&str> = req.candidates.iter().map(|(_, t)| t.as_str()).collect();
        let mut body = json!({ "query": req.query_text, "documents": docs });
        if !self.client.config.model.is_empty() {
            body["model"] = json!(self.client.config.model);
        }
        let resp = self.client.post_json(&body)?;
        let mut out = Vec::with_capacity(docs.len());
        if let Some(results) = resp.get("results").and_then(Value::as_array) {
            for r in results {
                let idx = r.get("index").and_then(Value::as_u64);
                let score = r.get("relevance_score").or_else(|| r.get("score")).and_then(Value::as_f64);
                match (idx, score) {
                    (Some(i), Some(s)) if (i as usize) < docs.len() => {
                        out.push((req.candidates[i as usize].0.clone(), s))
                    }
                    _ => return Err(BackendError::Decode(format!("bad rerank result {r}"))),
                }
            }
        } else if let Some(scores) = resp.get("scores").and_then(Value::as_array) {
            for (c, s) in req.candidates.iter().zip(scores) {
                let s = s.as_f64().ok_or_else(|| BackendError::Decode(format!("bad score {s}")))?;
                out.push((c.0.clone(), s));
            }
        } else {
            return Err(BackendError::Decode("no rerank scores in response".into()));
        }
        Ok(out)
    }
}
