//! Embedding vectors and the caching, retrying batch client.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::par::par_map;
use crate::provider::{with_retries, Embedder, ProviderError, RetryPolicy};

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("nothing to embed")]
    EmptyBatch,
    #[error("text {index} is blank")]
    BlankText { index: usize },
    #[error("embedding provider failed after {attempts} attempt(s): {source}")]
    Provider {
        attempts: usize,
        #[source]
        source: ProviderError,
    },
    #[error("embedding integrity: {0}")]
    Integrity(String),
    #[error("cache {path}: {message}")]
    Cache { path: String, message: String },
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            EmbedError::Provider {
                source: ProviderError::Exhausted { .. } | ProviderError::Transport { .. },
                ..
            }
        )
    }
}

/// A nonzero, finite vector as returned by a provider (not re-normalised).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::Integrity("empty vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::Integrity("non-finite component".into()));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(EmbedError::Integrity("zero vector".into()));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt()
    }

    /// Cosine similarity in f64, clamped to [-1, 1]. Panics on dim mismatch.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "cosine of vectors with different dims");
        cosine_with_norms(&self.0, self.norm(), &other.0, other.norm())
    }
}

pub(crate) fn cosine_with_norms(a: &[f32], na: f64, b: &[f32], nb: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = EmbedError;
    fn try_from(v: Vec<f32>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// Outcome of one [`EmbedClient::embed_batch`] call.
#[derive(Debug, Clone)]
pub struct EmbedBatch {
    pub vectors: Vec<EmbeddingVector>,
    /// Provider requests issued, counting retries.
    pub attempts: usize,
    pub cache_hits: usize,
}

type CacheKey = [u8; 32];

/// Wraps an [`Embedder`] with retries, batching, bounded parallelism and a
/// cache keyed by (provider tag, content hash).
pub struct EmbedClient {
    provider: Arc<dyn Embedder>,
    tag: String,
    retry: RetryPolicy,
    batch_size: usize,
    parallelism: usize,
    memory: Mutex<HashMap<CacheKey, EmbeddingVector>>,
    disk: Option<PathBuf>,
    dim: OnceLock<usize>,
    provider_requests: AtomicUsize,
}

impl EmbedClient {
    pub fn new(provider: Arc<dyn Embedder>) -> Self {
        let tag = provider.tag();
        let dim = OnceLock::new();
        if let Some(d) = provider.dim() {
            let _ = dim.set(d);
        }
        Self {
            provider,
            tag,
            retry: RetryPolicy::default(),
            batch_size: 64,
            parallelism: 1,
            memory: Mutex::new(HashMap::new()),
            disk: None,
            dim,
            provider_requests: AtomicUsize::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_batch_size(mut self, n: usize) -> Self {
        self.batch_size = n.max(1);
        self
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    /// Persists vectors under `dir/<tag hash>/` so reruns skip the provider.
    pub fn with_disk_cache(mut self, dir: PathBuf) -> Self {
        let tag_hash = hex::encode(&Sha256::digest(self.tag.as_bytes())[..8]);
        self.disk = Some(dir.join(tag_hash));
        self
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim.get().copied()
    }

    /// Total provider requests issued by this client, counting retries.
    pub fn provider_requests(&self) -> usize {
        self.provider_requests.load(Ordering::SeqCst)
    }

    fn key(&self, text: &str) -> CacheKey {
        let mut h = Sha256::new();
        h.update(self.tag.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        h.finalize().into()
    }

    fn disk_path(&self, key: &CacheKey) -> Option<PathBuf> {
        self.disk.as_ref().map(|d| d.join(format!("{}.f32", hex::encode(key))))
    }

    fn disk_get(&self, key: &CacheKey) -> Option<EmbeddingVector> {
        let bytes = std::fs::read(self.disk_path(key)?).ok()?;
        if bytes.len() % 4 != 0 {
            return None;
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        EmbeddingVector::new(values).ok()
    }

    fn disk_put(&self, key: &CacheKey, v: &EmbeddingVector) -> Result<(), EmbedError> {
        let Some(path) = self.disk_path(key) else {
            return Ok(());
        };
        let io = |e: std::io::Error| EmbedError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(path.parent().unwrap()).map_err(io)?;
        let bytes: Vec<u8> = v.values().iter().flat_map(|x| x.to_le_bytes()).collect();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(io)?;
        std::fs::rename(&tmp, &path).map_err(io)
    }

    fn check_dim(&self, got: usize) -> Result<(), EmbedError> {
        let want = *self.dim.get_or_init(|| got);
        if want != got {
            return Err(EmbedError::Integrity(format!(
                "provider {} returned dim {got}, expected {want}",
                self.tag
            )));
        }
        Ok(())
    }

    /// Embeds `texts`, one vector per input in input order.
    pub fn embed_batch(&self, texts: &[String]) -> Result<EmbedBatch, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EmbedError::BlankText { index });
        }

        let keys: Vec<CacheKey> = texts.iter().map(|t| self.key(t)).collect();
        let mut found: HashMap<CacheKey, EmbeddingVector> = HashMap::new();
        let mut cache_hits = 0;
        let mut missing: Vec<(CacheKey, &String)> = Vec::new();
        let mut queued: HashSet<CacheKey> = HashSet::new();
        {
            let memory = self.memory.lock().unwrap();
            for (key, text) in keys.iter().zip(texts) {
                if found.contains_key(key) || !queued.insert(*key) {
                    continue;
                }
                if let Some(v) = memory.get(key) {
                    found.insert(*key, v.clone());
                    cache_hits += 1;
                } else {
                    missing.push((*key, text));
                }
            }
        }
        let mut still_missing = Vec::new();
        for (key, text) in missing {
            match self.disk_get(&key) {
                Some(v) => {
                    self.check_dim(v.dim())?;
                    found.insert(key, v);
                    cache_hits += 1;
                }
                None => still_missing.push((key, text)),
            }
        }

        let batches: Vec<&[(CacheKey, &String)]> = still_missing.chunks(self.batch_size).collect();
        let results = par_map(&batches, self.parallelism, |_, batch| {
            let inputs: Vec<String> = batch.iter().map(|(_, t)| (*t).clone()).collect();
            let mut attempts = 0;
            let out = with_retries(&self.retry, || {
                attempts += 1;
                self.provider_requests.fetch_add(1, Ordering::SeqCst);
                self.provider.embed(&inputs)
            });
            (out, attempts)
        });

        let mut total_attempts = 0;
        let mut fresh = Vec::new();
        for (batch, (out, attempts)) in batches.iter().zip(results) {
            total_attempts += attempts;
            let (vectors, _) = out.map_err(|source| EmbedError::Provider { attempts, source })?;
            if vectors.len() != batch.len() {
                return Err(EmbedError::Integrity(format!(
                    "asked for {} vectors, got {}",
                    batch.len(),
                    vectors.len()
                )));
            }
            for ((key, _), raw) in batch.iter().zip(vectors) {
                self.check_dim(raw.len())?;
                let v = EmbeddingVector::new(raw)?;
                fresh.push((*key, v));
            }
        }
        {
            let mut memory = self.memory.lock().unwrap();
            for (key, v) in &fresh {
                memory.insert(*key, v.clone());
            }
        }
        for (key, v) in fresh {
            self.disk_put(&key, &v)?;
            found.insert(key, v);
        }

        Ok(EmbedBatch {
            vectors: keys.iter().map(|k| found[k].clone()).collect(),
            attempts: total_attempts,
            cache_hits,
        })
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(self
            .embed_batch(std::slice::from_ref(&text.to_string()))?
            .vectors
            .remove(0))
    }
}
