use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{cosine, EmbeddingError, EmbeddingProvider, Vector};
use crate::catalog::{Catalog, InteractionHistory};
use crate::ranking::{sort_scored, ScoredItem};

const TEXT_RECIPE: &str = "text=title.category.description";
const BATCH: usize = 32;

/// Item vectors for one catalog under one provider. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    provider_fingerprint: String,
    entries: BTreeMap<String, Vector>,
}

impl VectorIndex {
    pub fn from_entries(
        dim: usize,
        provider_fingerprint: impl Into<String>,
        entries: BTreeMap<String, Vector>,
    ) -> Result<Self, EmbeddingError> {
        if let Some((id, v)) = entries.iter().find(|(_, v)| v.dim() != dim) {
            return Err(EmbeddingError::DimMismatch {
                expected: dim,
                actual: v.dim(),
                context: Some(format!("item {id}")),
            });
        }
        Ok(Self {
            dim,
            provider_fingerprint: provider_fingerprint.into(),
            entries,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provider_fingerprint(&self) -> &str {
        &self.provider_fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, item_id: &str) -> Option<&Vector> {
        self.entries.get(item_id)
    }

    pub fn entries(&self) -> &BTreeMap<String, Vector> {
        &self.entries
    }

    fn check_dim(&self, v: &Vector) -> Result<(), EmbeddingError> {
        if v.dim() != self.dim {
            return Err(EmbeddingError::DimMismatch {
                expected: self.dim,
                actual: v.dim(),
                context: Some("query vector".into()),
            });
        }
        Ok(())
    }

    /// Cosine of `query` against one indexed item.
    pub fn similarity(&self, query: &Vector, item_id: &str) -> Result<f64, EmbeddingError> {
        self.check_dim(query)?;
        let v = self
            .get(item_id)
            .ok_or_else(|| EmbeddingError::MissingItemVector(item_id.to_string()))?;
        cosine(query, v)
    }

    /// Exhaustive top-k by cosine, skipping `exclude`. Descending score,
    /// ties by ascending item id.
    pub fn top_k(
        &self,
        query: &Vector,
        k: usize,
        exclude: &BTreeSet<String>,
    ) -> Result<Vec<ScoredItem>, EmbeddingError> {
        self.check_dim(query)?;
        if query.norm() == 0.0 {
            return Err(EmbeddingError::ZeroVector);
        }
        let mut scored = self.score_all(query, |id| !exclude.contains(id));
        sort_scored(&mut scored);
        scored.truncate(k);
        Ok(scored)
    }

    /// Cosine against every item accepted by `keep`; zero vectors are skipped.
    pub fn score_all(&self, query: &Vector, keep: impl Fn(&str) -> bool) -> Vec<ScoredItem> {
        self.entries
            .iter()
            .filter(|(id, _)| keep(id))
            .filter_map(|(id, v)| cosine(query, v).ok().map(|s| ScoredItem::new(id.clone(), s)))
            .collect()
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        let header = CacheHeader {
            dim: self.dim,
            provider_fingerprint: self.provider_fingerprint.clone(),
            count: self.entries.len(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for (item_id, vector) in &self.entries {
            serde_json::to_writer(
                &mut out,
                &CacheEntry {
                    item_id: item_id.clone(),
                    vector: vector.clone(),
                },
            )?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn read_from(reader: impl std::io::Read) -> Result<Self, EmbeddingError> {
        let bad = |e: &dyn std::fmt::Display| EmbeddingError::Cache(e.to_string());
        let mut lines = BufReader::new(reader).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| EmbeddingError::Cache("empty cache file".into()))?
            .map_err(|e| bad(&e))?;
        let header: CacheHeader = serde_json::from_str(&header_line).map_err(|e| bad(&e))?;
        let mut entries = BTreeMap::new();
        for line in lines {
            let line = line.map_err(|e| bad(&e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CacheEntry = serde_json::from_str(&line).map_err(|e| bad(&e))?;
            let vector = Vector::new(entry.vector.0)?;
            entries.insert(entry.item_id, vector);
        }
        if entries.len() != header.count {
            return Err(EmbeddingError::Cache(format!(
                "header promises {} vectors, found {}",
                header.count,
                entries.len()
            )));
        }
        Self::from_entries(header.dim, header.provider_fingerprint, entries)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    dim: usize,
    provider_fingerprint: String,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    item_id: String,
    vector: Vector,
}

/// Location of the on-disk index cache.
#[derive(Debug, Clone)]
pub struct IndexCache {
    path: PathBuf,
}

impl IndexCache {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn load(&self) -> Result<Option<VectorIndex>, EmbeddingError> {
        if !self.path.exists() {
            return Ok(None);
        }
        let file = File::open(&self.path).map_err(|e| EmbeddingError::Cache(e.to_string()))?;
        VectorIndex::read_from(file).map(Some)
    }

    pub fn store(&self, index: &VectorIndex) -> Result<(), EmbeddingError> {
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| EmbeddingError::Cache(e.to_string()))?;
        }
        let tmp = self.path.with_extension("tmp");
        let file = File::create(&tmp).map_err(|e| EmbeddingError::Cache(e.to_string()))?;
        index
            .write_to(BufWriter::new(file))
            .map_err(|e| EmbeddingError::Cache(e.to_string()))?;
        std::fs::rename(&tmp, &self.path).map_err(|e| EmbeddingError::Cache(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub provider_calls: usize,
    pub from_cache: bool,
}

/// Fingerprint of provider + text recipe + the exact item texts embedded,
/// so any change to one of them invalidates a cached index.
pub fn index_fingerprint(catalog: &Catalog, provider: &dyn EmbeddingProvider) -> String {
    let mut hasher = Sha256::new();
    for item in catalog.items().values() {
        hasher.update(item.item_id.as_bytes());
        hasher.update([0u8]);
        hasher.update(item.embedding_text().as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    let corpus: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("{}|{TEXT_RECIPE}|corpus={corpus}", provider.fingerprint())
}

/// Embeds every catalog item (in batches) or reloads a matching cache.
pub fn build_index(
    catalog: &Catalog,
    provider: &dyn EmbeddingProvider,
    cache: Option<&IndexCache>,
) -> Result<(VectorIndex, BuildStats), EmbeddingError> {
    let fingerprint = index_fingerprint(catalog, provider);
    if let Some(cache) = cache {
        match cache.load() {
            Ok(Some(index))
                if index.provider_fingerprint() == fingerprint
                    && index.dim() == provider.dim()
                    && index.entries().keys().eq(catalog.items().keys()) =>
            {
                return Ok((
                    index,
                    BuildStats {
                        provider_calls: 0,
                        from_cache: true,
                    },
                ));
            }
            Ok(_) => {}
            Err(err) => tracing::warn!(error = %err, "ignoring unreadable index cache"),
        }
    }

    let items: Vec<_> = catalog.items().values().collect();
    let mut entries = BTreeMap::new();
    let mut calls = 0;
    for chunk in items.chunks(BATCH) {
        let texts: Vec<String> = chunk.iter().map(|i| i.embedding_text()).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        calls += 1;
        let vectors = provider.embed_batch(&refs).map_err(|source| EmbeddingError::ForItem {
            item_id: chunk[0].item_id.clone(),
            source: Box::new(source),
        })?;
        if vectors.len() != chunk.len() {
            return Err(EmbeddingError::BadResponse(format!(
                "asked for {} vectors, got {}",
                chunk.len(),
                vectors.len()
            )));
        }
        for (item, vector) in chunk.iter().zip(vectors) {
            if vector.dim() != provider.dim() {
                return Err(EmbeddingError::DimMismatch {
                    expected: provider.dim(),
                    actual: vector.dim(),
                    context: Some(format!("item {}", item.item_id)),
                });
            }
            entries.insert(item.item_id.clone(), vector);
        }
    }
    let index = VectorIndex::from_entries(provider.dim(), fingerprint, entries)?;
    if let Some(cache) = cache {
        cache.store(&index)?;
    }
    Ok((
        index,
        BuildStats {
            provider_calls: calls,
            from_cache: false,
        },
    ))
}

/// Mean of the item vectors over the user's history events.
pub fn user_embedding(history: &InteractionHistory, index: &VectorIndex) -> Result<Vector, EmbeddingError> {
    if history.is_empty() {
        return Err(EmbeddingError::EmptyHistory);
    }
    let mut sum = vec![0.0; index.dim()];
    for event in &history.events {
        let v = index
            .get(&event.item_id)
            .ok_or_else(|| EmbeddingError::MissingItemVector(event.item_id.clone()))?;
        for (acc, c) in sum.iter_mut().zip(v.components()) {
            *acc += c;
        }
    }
    let n = history.len() as f64;
    Vector::new(sum.into_iter().map(|s| s / n).collect())
}
