//! Sentence embedders.
//!
//! [`HashEmbedder`] is a deterministic character-bigram feature hasher used
//! for offline runs and tests. [`RemoteEmbedder`] talks to an embedding
//! service over HTTP (`{"input": [...], "model": ...}` in, `{"data": [...]}`
//! out).

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::transport::{HttpClient, RetryPolicy, TransportError};

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding dimension must be at least 1")]
    ZeroDimension,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("embedding contains a non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("no endpoint configured for remote embedder")]
    MissingEndpoint,
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("embedding service returned {got} vectors for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding service returned dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed embedding response: {0}")]
    MalformedResponse(String),
}

/// A dense embedding. Every component is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::ZeroDimension);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// Scales to unit length in place; the zero vector is left alone.
    pub fn normalize(&mut self) {
        let norm = self.norm();
        if norm > 0.0 {
            for v in &mut self.0 {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub normalize: bool,
    /// Full URL of the embedding service. `None` selects the hashing embedder.
    pub endpoint: Option<String>,
    pub model: String,
    pub batch_size: usize,
    pub timeout_s: u64,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    /// Maximum number of batch requests in flight at once.
    pub max_concurrency: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            normalize: true,
            endpoint: None,
            model: "multilingual-e5-large".to_string(),
            batch_size: 32,
            timeout_s: 60,
            max_retries: 3,
            initial_backoff_ms: 500,
            max_concurrency: 4,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim == 0 {
            return Err(EmbedError::ZeroDimension);
        }
        if self.batch_size == 0 {
            return Err(EmbedError::ZeroBatchSize);
        }
        Ok(())
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Identifies the backend and settings that produced a set of keys.
    fn tag(&self) -> String;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Builds the backend selected by `config.endpoint`.
pub fn embedder_from_config(config: &EmbedderConfig) -> Result<Box<dyn Embedder>, EmbedError> {
    config.validate()?;
    Ok(match config.endpoint {
        Some(_) => Box::new(RemoteEmbedder::new(config.clone())?),
        None => Box::new(HashEmbedder::with_normalize(config.dim, config.normalize)?),
    })
}

/// Embeds one text with the backend described by `config`.
pub fn embed(text: &str, config: &EmbedderConfig) -> Result<EmbeddingVector, EmbedError> {
    embedder_from_config(config)?.embed(text)
}

pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |hash, &b| {
        (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

fn accumulate_bigrams(text: &str, buckets: &mut [f32]) {
    let dim = buckets.len() as u64;
    let mut chars = text.chars();
    let Some(mut prev) = chars.next() else {
        return;
    };
    let mut buf = [0u8; 8];
    for cur in chars {
        let n = prev.encode_utf8(&mut buf).len();
        let m = cur.encode_utf8(&mut buf[n..]).len();
        let hash = fnv1a_64(&buf[..n + m]);
        let bucket = (hash % dim) as usize;
        if hash >> 63 == 0 {
            buckets[bucket] += 1.0;
        } else {
            buckets[bucket] -= 1.0;
        }
        prev = cur;
    }
}

/// Signed feature hashing of overlapping character bigrams, L2-normalized
/// unless no bigram exists. Panics if `dim` is zero.
pub fn hash_embed(text: &str, dim: usize) -> EmbeddingVector {
    let mut v = hash_embed_raw(text, dim);
    v.normalize();
    v
}

fn hash_embed_raw(text: &str, dim: usize) -> EmbeddingVector {
    assert!(dim >= 1, "hash_embed requires dim >= 1");
    let mut buckets = vec![0.0f32; dim];
    accumulate_bigrams(text, &mut buckets);
    EmbeddingVector(buckets)
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    normalize: bool,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self, EmbedError> {
        Self::with_normalize(dim, true)
    }

    pub fn with_normalize(dim: usize, normalize: bool) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::ZeroDimension);
        }
        Ok(Self { dim, normalize })
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn tag(&self) -> String {
        format!(
            "hash-bigram-fnv1a/dim={}/normalize={}",
            self.dim, self.normalize
        )
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut v = hash_embed_raw(text, self.dim);
        if self.normalize {
            v.normalize();
        }
        Ok(v)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    config: EmbedderConfig,
    url: String,
    client: HttpClient,
}

impl RemoteEmbedder {
    pub fn new(config: EmbedderConfig) -> Result<Self, EmbedError> {
        config.validate()?;
        let url = config.endpoint.clone().ok_or(EmbedError::MissingEndpoint)?;
        let policy = RetryPolicy {
            max_retries: config.max_retries,
            initial_backoff: Duration::from_millis(config.initial_backoff_ms),
            ..RetryPolicy::default()
        };
        let client = HttpClient::new(Duration::from_secs(config.timeout_s), policy);
        Ok(Self {
            config,
            url,
            client,
        })
    }

    fn request_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let body = json!({ "input": texts, "model": self.config.model });
        let response = self.client.post_json(&self.url, &body)?;
        self.parse_response(&response, texts.len())
    }

    fn parse_response(
        &self,
        response: &Value,
        expected: usize,
    ) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let data = response
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::MalformedResponse("missing \"data\" array".into()))?;
        if data.len() != expected {
            return Err(EmbedError::CountMismatch {
                expected,
                got: data.len(),
            });
        }
        let mut slots: Vec<Option<EmbeddingVector>> = vec![None; expected];
        for (pos, entry) in data.iter().enumerate() {
            let index = match entry.get("index") {
                Some(v) => v.as_u64().ok_or_else(|| {
                    EmbedError::MalformedResponse(format!("entry {pos}: bad \"index\""))
                })? as usize,
                None => pos,
            };
            let values = entry
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| {
                    EmbedError::MalformedResponse(format!("entry {pos}: missing \"embedding\""))
                })?
                .iter()
                .map(|x| x.as_f64().map(|f| f as f32))
                .collect::<Option<Vec<f32>>>()
                .ok_or_else(|| {
                    EmbedError::MalformedResponse(format!("entry {pos}: non-numeric embedding"))
                })?;
            if values.len() != self.config.dim {
                return Err(EmbedError::DimensionMismatch {
                    expected: self.config.dim,
                    got: values.len(),
                });
            }
            let slot = slots.get_mut(index).ok_or_else(|| {
                EmbedError::MalformedResponse(format!("index {index} out of range"))
            })?;
            if slot.is_some() {
                return Err(EmbedError::MalformedResponse(format!(
                    "duplicate index {index}"
                )));
            }
            let mut v = EmbeddingVector::new(values)?;
            if self.config.normalize {
                v.normalize();
            }
            *slot = Some(v);
        }
        // Every slot is filled: `expected` distinct in-range indices were seen.
        Ok(slots.into_iter().flatten().collect())
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn tag(&self) -> String {
        format!(
            "remote/{}/dim={}/normalize={}",
            self.config.model, self.config.dim, self.config.normalize
        )
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut out = self.request_batch(std::slice::from_ref(&text.to_string()))?;
        Ok(out.remove(0))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let batches: Vec<&[String]> = texts.chunks(self.config.batch_size).collect();
        let mut out = Vec::with_capacity(texts.len());
        for wave in batches.chunks(self.config.max_concurrency.max(1)) {
            let results: Vec<Result<Vec<EmbeddingVector>, EmbedError>> = if wave.len() == 1 {
                vec![self.request_batch(wave[0])]
            } else {
                std::thread::scope(|s| {
                    let handles: Vec<_> = wave
                        .iter()
                        .map(|batch| s.spawn(move || self.request_batch(batch)))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("embedding worker panicked"))
                        .collect()
                })
            };
            for r in results {
                out.extend(r?);
            }
        }
        Ok(out)
    }
}
