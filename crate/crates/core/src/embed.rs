//! Embedding function behind a provider abstraction: a remote wire-protocol
//! client, a deterministic local feature-hashing embedder, and a
//! content-addressed append-only cache.

use crate::scalar::Real;
use crate::util::{fnv1a64, sha256_hex};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;
use thiserror::Error;

/// Fixed-dimension real vector with provider/model provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<S> {
    pub values: Vec<S>,
    pub provider_id: String,
    pub model_id: String,
}

impl<S: Real> Embedding<S> {
    pub fn new(values: Vec<S>, provider_id: &str, model_id: &str) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Embedding {
            values,
            provider_id: provider_id.to_string(),
            model_id: model_id.to_string(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn l2_norm(&self) -> S {
        self.values
            .iter()
            .fold(S::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    /// Scales to unit L2 norm; the all-zero vector maps to e0.
    pub fn normalized(mut self) -> Self {
        let norm = self.l2_norm();
        if norm == S::zero() {
            for v in self.values.iter_mut() {
                *v = S::zero();
            }
            if let Some(first) = self.values.first_mut() {
                *first = S::one();
            }
        } else {
            for v in self.values.iter_mut() {
                *v = *v / norm;
            }
        }
        self
    }
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding API error (status {status}): {body}")]
    Api { status: u16, body: String },
    #[error("network error after retries: {0}")]
    Network(String),
    #[error("dimension mismatch within batch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite component in embedding")]
    NonFinite,
    #[error("empty text cannot be embedded remotely")]
    EmptyText,
    #[error("batch exceeds maximum size {max}")]
    BatchTooLarge { max: usize },
    #[error("cache corruption at line {line}")]
    CacheCorruption { line: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Source of embeddings. One vector per input text, in order; all vectors of
/// a batch share the same dimension.
pub trait EmbeddingProvider<S: Real>: Send + Sync {
    fn provider_id(&self) -> &str;
    fn model_id(&self) -> &str;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding<S>>, EmbedError>;

    fn embed_one(&self, text: &str) -> Result<Embedding<S>, EmbedError> {
        let mut out = self.embed_batch(&[text.to_string()])?;
        Ok(out.remove(0))
    }
}

// ---------------------------------------------------------------------------
// Local deterministic embedder
// ---------------------------------------------------------------------------

/// Deterministic signed feature-hashing embedder.
///
/// Tokenization: lowercase, split on non-alphanumeric runs. Each token is
/// FNV-1a-64 hashed over its UTF-8 bytes; bucket = hash mod dim; sign = +1 if
/// bit 32 of the hash is 0, else -1; signs accumulate per occurrence. The
/// accumulated vector is L2-normalized, with the all-zero vector mapping to
/// e0. Bit-exact across platforms for a fixed scalar type.
#[derive(Debug, Clone)]
pub struct LocalEmbedder<S> {
    dim: usize,
    model_id: String,
    _marker: PhantomData<S>,
}

impl<S: Real> LocalEmbedder<S> {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 8, "local embedder requires dim >= 8");
        LocalEmbedder {
            dim,
            model_id: format!("fnv1a-sign-{dim}"),
            _marker: PhantomData,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Embedding<S> {
        let lower = text.to_lowercase();
        let mut acc = vec![0i64; self.dim];
        for token in lower.split(|c: char| !c.is_alphanumeric()) {
            if token.is_empty() {
                continue;
            }
            let h = fnv1a64(token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 32) & 1 == 0 { 1 } else { -1 };
            acc[bucket] += sign;
        }
        let values: Vec<S> = acc
            .into_iter()
            .map(|c| S::from_i64(c).expect("small count fits scalar"))
            .collect();
        Embedding {
            values,
            provider_id: "local".into(),
            model_id: self.model_id.clone(),
        }
        .normalized()
    }
}

impl<S: Real> EmbeddingProvider<S> for LocalEmbedder<S> {
    fn provider_id(&self) -> &str {
        "local"
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding<S>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

/// Convenience wrapper matching the operation-level contract.
pub fn embed_local<S: Real>(texts: &[String], dim: usize) -> Vec<Embedding<S>> {
    let embedder = LocalEmbedder::<S>::new(dim);
    texts.iter().map(|t| embedder.embed_text(t)).collect()
}

// ---------------------------------------------------------------------------
// Remote embedding client
// ---------------------------------------------------------------------------

/// Retry schedule for remote calls: `attempts` tries with exponential backoff
/// starting at `base`.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.base * 2u32.saturating_pow(attempt)
    }
}

pub const DEFAULT_MAX_BATCH: usize = 64;

/// Client for the embedding wire protocol:
/// `POST {"model", "input": [texts]}` -> `{"data": [{"index", "embedding"}]}`.
///
/// Vectors are L2-normalized on receipt so similarity is cosine regardless of
/// provider scaling.
pub struct RemoteEmbedder<S> {
    endpoint: String,
    model_id: String,
    token: Option<String>,
    retry: RetryPolicy,
    max_batch: usize,
    client: reqwest::blocking::Client,
    _marker: PhantomData<S>,
}

#[derive(Serialize)]
struct EmbedWireRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedWireResponse {
    data: Vec<EmbedWireItem>,
}

#[derive(Deserialize)]
struct EmbedWireItem {
    index: usize,
    embedding: Vec<f64>,
}

impl<S: Real> RemoteEmbedder<S> {
    pub fn new(endpoint: &str, model_id: &str, token: Option<String>) -> Self {
        RemoteEmbedder {
            endpoint: endpoint.to_string(),
            model_id: model_id.to_string(),
            token,
            retry: RetryPolicy::default(),
            max_batch: DEFAULT_MAX_BATCH,
            client: reqwest::blocking::Client::new(),
            _marker: PhantomData,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = max_batch;
        self
    }

    /// Builds from `RATATOOL_EMBED_URL`, `RATATOOL_EMBED_MODEL`, and
    /// `RATATOOL_EMBED_TOKEN`.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var("RATATOOL_EMBED_URL").ok()?;
        let model = std::env::var("RATATOOL_EMBED_MODEL").ok()?;
        let token = std::env::var("RATATOOL_EMBED_TOKEN").ok();
        Some(Self::new(&url, &model, token))
    }

    fn post_once(&self, texts: &[String]) -> Result<EmbedWireResponse, EmbedError> {
        let req = EmbedWireRequest {
            model: &self.model_id,
            input: texts,
        };
        let mut builder = self.client.post(&self.endpoint).json(&req);
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let resp = builder.send().map_err(|e| EmbedError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.text().unwrap_or_default();
            let excerpt: String = body.chars().take(200).collect();
            return Err(EmbedError::Api {
                status,
                body: excerpt,
            });
        }
        resp.json::<EmbedWireResponse>()
            .map_err(|e| EmbedError::Network(e.to_string()))
    }
}

impl<S: Real> EmbeddingProvider<S> for RemoteEmbedder<S> {
    fn provider_id(&self) -> &str {
        "remote"
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding<S>>, EmbedError> {
        if texts.len() > self.max_batch {
            return Err(EmbedError::BatchTooLarge {
                max: self.max_batch,
            });
        }
        if texts.iter().any(|t| t.is_empty()) {
            return Err(EmbedError::EmptyText);
        }
        let mut last_err = None;
        let mut resp = None;
        for attempt in 0..self.retry.attempts {
            match self.post_once(texts) {
                Ok(r) => {
                    resp = Some(r);
                    break;
                }
                Err(e @ EmbedError::Network(_)) | Err(e @ EmbedError::Api { .. }) => {
                    last_err = Some(e);
                    if attempt + 1 < self.retry.attempts {
                        std::thread::sleep(self.retry.backoff(attempt));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let resp = match resp {
            Some(r) => r,
            None => return Err(last_err.unwrap_or(EmbedError::Network("no attempts".into()))),
        };

        let mut items = resp.data;
        items.sort_by_key(|i| i.index);
        if items.len() != texts.len() {
            return Err(EmbedError::Network(format!(
                "expected {} vectors, got {}",
                texts.len(),
                items.len()
            )));
        }
        let expected = items.first().map(|i| i.embedding.len()).unwrap_or(0);
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            if item.embedding.len() != expected {
                return Err(EmbedError::DimensionMismatch {
                    expected,
                    got: item.embedding.len(),
                });
            }
            let values: Vec<S> = item
                .embedding
                .iter()
                .map(|&v| S::from_f64_lossy(v))
                .collect();
            out.push(Embedding::new(values, "remote", &self.model_id)?.normalized());
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Content-addressed cache
// ---------------------------------------------------------------------------

/// Cache key: SHA-256 over `provider_id 0x1F model_id 0x1F canonical_text`.
pub fn cache_key(provider_id: &str, model_id: &str, text: &str) -> String {
    let mut bytes = Vec::with_capacity(provider_id.len() + model_id.len() + text.len() + 2);
    bytes.extend_from_slice(provider_id.as_bytes());
    bytes.push(0x1f);
    bytes.extend_from_slice(model_id.as_bytes());
    bytes.push(0x1f);
    bytes.extend_from_slice(text.as_bytes());
    sha256_hex(&bytes)
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    dim: usize,
    values: Vec<f64>,
    provider_id: String,
    model_id: String,
}

#[derive(Debug)]
struct CacheState {
    map: HashMap<String, Vec<f64>>,
    path: PathBuf,
}

/// Append-only JSONL embedding cache. Hits never touch the provider.
#[derive(Debug)]
pub struct EmbeddingCache {
    state: Mutex<CacheState>,
}

impl EmbeddingCache {
    /// Loads the cache file (if present) into an in-memory snapshot.
    pub fn open(path: &Path) -> Result<Self, EmbedError> {
        let mut map = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(std::fs::File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: CacheLine = serde_json::from_str(&line)
                    .map_err(|_| EmbedError::CacheCorruption { line: i + 1 })?;
                if parsed.values.len() != parsed.dim {
                    return Err(EmbedError::CacheCorruption { line: i + 1 });
                }
                map.insert(parsed.key, parsed.values);
            }
        }
        Ok(EmbeddingCache {
            state: Mutex::new(CacheState {
                map,
                path: path.to_path_buf(),
            }),
        })
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns the cached vector for `text` or embeds and appends it.
    pub fn get_or_embed<S: Real>(
        &self,
        text: &str,
        provider: &dyn EmbeddingProvider<S>,
    ) -> Result<Embedding<S>, EmbedError> {
        let key = cache_key(provider.provider_id(), provider.model_id(), text);
        {
            let state = self.state.lock().unwrap();
            if let Some(values) = state.map.get(&key) {
                let values: Vec<S> = values.iter().map(|&v| S::from_f64_lossy(v)).collect();
                return Embedding::new(values, provider.provider_id(), provider.model_id());
            }
        }
        let embedding = provider.embed_one(text)?;
        let stored: Vec<f64> = embedding
            .values
            .iter()
            .map(|v| v.to_f64().expect("scalar converts to f64"))
            .collect();
        let mut state = self.state.lock().unwrap();
        // Another thread may have raced us; the append stays harmless since
        // load keeps the last occurrence of a key.
        let line = CacheLine {
            key: key.clone(),
            dim: stored.len(),
            values: stored.clone(),
            provider_id: provider.provider_id().to_string(),
            model_id: provider.model_id().to_string(),
        };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&state.path)?;
        serde_json::to_writer(&mut file, &line).map_err(std::io::Error::from)?;
        file.write_all(b"\n")?;
        state.map.insert(key, stored);
        Ok(embedding)
    }
}

/// Provider wrapper routing every lookup through an [`EmbeddingCache`].
pub struct CachedProvider<'a, S: Real> {
    inner: &'a dyn EmbeddingProvider<S>,
    cache: &'a EmbeddingCache,
}

impl<'a, S: Real> CachedProvider<'a, S> {
    pub fn new(inner: &'a dyn EmbeddingProvider<S>, cache: &'a EmbeddingCache) -> Self {
        CachedProvider { inner, cache }
    }
}

impl<'a, S: Real> EmbeddingProvider<S> for CachedProvider<'a, S> {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding<S>>, EmbedError> {
        texts
            .iter()
            .map(|t| self.cache.get_or_embed(t, self.inner))
            .collect()
    }
}
