use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{EmbeddingError, Vector};
use crate::text::tokenize;
use crate::transport::{Request, RetryPolicy, Secret, Transport};

pub trait EmbeddingProvider: Send + Sync {
    /// Identifies provider, model and version; part of the index cache key.
    fn fingerprint(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbeddingError>;
}

/// Embeds one string, checking it is non-blank and that the provider kept
/// its advertised dimension.
pub fn embed_text(provider: &dyn EmbeddingProvider, text: &str) -> Result<Vector, EmbeddingError> {
    if text.trim().is_empty() {
        return Err(EmbeddingError::EmptyText);
    }
    let mut out = provider.embed_batch(&[text])?;
    let vector = out
        .pop()
        .ok_or_else(|| EmbeddingError::BadResponse("no embedding returned".into()))?;
    if vector.dim() != provider.dim() {
        return Err(EmbeddingError::DimMismatch {
            expected: provider.dim(),
            actual: vector.dim(),
            context: None,
        });
    }
    Ok(vector)
}

/// Signed feature hashing of a lowercase bag of words, L2-normalized.
///
/// Each token hashes (SHA-256) to one bucket and a sign, so the output is a
/// pure function of the input string on every platform.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self { dim }
    }

    pub fn embed_one(&self, text: &str) -> Result<Vector, EmbeddingError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let mut components = vec![0.0; self.dim];
        for token in &tokens {
            let digest = Sha256::digest(token.as_bytes());
            let mut bucket = [0u8; 8];
            bucket.copy_from_slice(&digest[..8]);
            let idx = (u64::from_le_bytes(bucket) % self.dim as u64) as usize;
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            components[idx] += sign;
        }
        let norm = components.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 {
            // every token cancelled out; fall back to an unsigned count
            for token in &tokens {
                let digest = Sha256::digest(token.as_bytes());
                let mut bucket = [0u8; 8];
                bucket.copy_from_slice(&digest[..8]);
                components[(u64::from_le_bytes(bucket) % self.dim as u64) as usize] += 1.0;
            }
        }
        let norm = components.iter().map(|c| c * c).sum::<f64>().sqrt();
        Vector::new(components.into_iter().map(|c| c / norm).collect())
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn fingerprint(&self) -> String {
        format!("hash-bow-v1/dim{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbeddingError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEmbedderConfig {
    pub base_url: String,
    pub model: String,
    pub dim: usize,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub api_key: Option<Secret>,
}

/// Client for an embeddings endpoint: `POST {base_url}/embeddings` with
/// `{"model", "input": [..]}`, answered by `{"data": [{"index", "embedding"}]}`.
pub struct RemoteEmbedder {
    config: RemoteEmbedderConfig,
    transport: Arc<dyn Transport>,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig, transport: Arc<dyn Transport>) -> Self {
        Self { config, transport }
    }

    fn parse(&self, body: &Value, expected: usize) -> Result<Vec<Vector>, EmbeddingError> {
        let data = body
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbeddingError::BadResponse("missing data array".into()))?;
        let mut slots: Vec<Option<Vector>> = vec![None; expected];
        for (pos, entry) in data.iter().enumerate() {
            let index = entry
                .get("index")
                .and_then(Value::as_u64)
                .map(|i| i as usize)
                .unwrap_or(pos);
            let components = entry
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| EmbeddingError::BadResponse("missing embedding".into()))?
                .iter()
                .map(|c| {
                    c.as_f64()
                        .ok_or_else(|| EmbeddingError::BadResponse("non-numeric component".into()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let slot = slots
                .get_mut(index)
                .ok_or_else(|| EmbeddingError::BadResponse(format!("index {index} out of range")))?;
            *slot = Some(Vector::new(components)?);
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| EmbeddingError::BadResponse(format!("missing index {i}"))))
            .collect()
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn fingerprint(&self) -> String {
        format!("remote/{}@{}/dim{}", self.config.model, self.config.base_url, self.config.dim)
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbeddingError> {
        let request = Request {
            url: format!("{}/embeddings", self.config.base_url.trim_end_matches('/')),
            bearer: self.config.api_key.clone(),
            body: json!({ "model": self.config.model, "input": texts }),
            timeout: self.config.timeout,
        };
        let outcome = self
            .config
            .retry
            .run("embeddings", || self.transport.post_json(&request))
            .map_err(|(source, retries)| EmbeddingError::ProviderUnavailable { retries, source })?;
        tracing::debug!(inputs = texts.len(), retries = outcome.retries, "embedded batch");
        self.parse(&outcome.value, texts.len())
    }
}
