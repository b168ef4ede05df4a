//! Text embeddings and exact cosine retrieval.
//!
//! Providers are pluggable behind [`EmbeddingProvider`]. The deterministic
//! [`HashEmbedder`] needs no network and is what tests and CI run on; the
//! [`RemoteEmbedder`] speaks the common `{"model", "input"}` embeddings schema.

mod index;
mod provider;

pub use index::{build_index, index_fingerprint, user_embedding, BuildStats, IndexCache, VectorIndex};
pub use provider::{embed_text, EmbeddingProvider, HashEmbedder, RemoteEmbedder, RemoteEmbedderConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transport::TransportError;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("text is empty")]
    EmptyText,
    #[error("embedding provider unavailable after {retries} retries: {source}")]
    ProviderUnavailable {
        retries: u32,
        #[source]
        source: TransportError,
    },
    #[error("dimension mismatch: expected {expected}, got {actual}{}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    DimMismatch {
        expected: usize,
        actual: usize,
        context: Option<String>,
    },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("non-finite component in vector")]
    NonFinite,
    #[error("user history is empty")]
    EmptyHistory,
    #[error("no vector for item {0}")]
    MissingItemVector(String),
    #[error("provider response malformed: {0}")]
    BadResponse(String),
    #[error("index cache io: {0}")]
    Cache(String),
    #[error("embedding item {item_id}: {source}")]
    ForItem {
        item_id: String,
        #[source]
        source: Box<EmbeddingError>,
    },
}

/// A dense embedding with finite components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(components: Vec<f64>) -> Result<Self, EmbeddingError> {
        if components.iter().any(|c| !c.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(Self(components))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Vector {
        Vector(self.0.iter().map(|c| c * factor).collect())
    }
}

/// `dot(a, b) / (|a| |b|)`.
pub fn cosine(a: &Vector, b: &Vector) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
            context: None,
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(a.dot(b) / (na * nb))
}
