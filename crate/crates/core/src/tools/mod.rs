//! The retrieval utilities every agent can call, plus the BM25 baseline.
//!
//! [`Retrieval`] holds the immutable shared state (catalog, item index,
//! pooled user vectors, BM25 index). A [`ToolSet`] wraps it for one session
//! and keeps that session's append-only call log.

mod bm25;

pub use bm25::{Bm25Index, DEFAULT_B, DEFAULT_K1};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::embedding::{cosine, embed_text, user_embedding, EmbeddingError, EmbeddingProvider, Vector, VectorIndex};
use crate::ranking::{by_score_then_id, sort_scored, ScoredItem};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ToolError {
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("user {0} has an empty history")]
    EmptyHistory(String),
    #[error("text is empty")]
    EmptyText,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

impl ToolError {
    fn from_embedding(err: EmbeddingError) -> Self {
        match err {
            EmbeddingError::EmptyText => ToolError::EmptyText,
            other => ToolError::Embedding(other),
        }
    }
}

/// Lower and upper bound applied to `n`/`k` overrides coming from agents.
pub const MIN_BOUND: usize = 1;
pub const MAX_BOUND: usize = 100;

pub fn clamp_bound(value: usize) -> usize {
    value.clamp(MIN_BOUND, MAX_BOUND)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDefaults {
    pub n: usize,
    pub k: usize,
}

impl Default for ToolDefaults {
    fn default() -> Self {
        Self { n: 5, k: 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub user_id: String,
    pub score: f64,
}

/// Most similar other users, best first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub neighbors: Vec<Neighbor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevantItem {
    pub item_id: String,
    pub score: f64,
    /// Most recent interaction with the item in the owner's history.
    pub last_timestamp: i64,
}

/// Query-relevant subset of one user's history, best first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelevantHistory {
    pub items: Vec<RelevantItem>,
}

/// Shared, read-only retrieval state.
pub struct Retrieval {
    catalog: Arc<Catalog>,
    index: Arc<VectorIndex>,
    provider: Arc<dyn EmbeddingProvider>,
    bm25: Bm25Index,
    user_vectors: BTreeMap<String, Vector>,
    query_cache: Mutex<HashMap<String, Vector>>,
}

impl std::fmt::Debug for Retrieval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Retrieval")
            .field("items", &self.catalog.num_items())
            .field("users", &self.catalog.num_users())
            .field("provider", &self.provider.fingerprint())
            .finish()
    }
}

impl Retrieval {
    /// Pools a vector for every user with a non-empty history and builds the
    /// BM25 index over item text.
    pub fn new(
        catalog: Arc<Catalog>,
        index: Arc<VectorIndex>,
        provider: Arc<dyn EmbeddingProvider>,
    ) -> Result<Self, ToolError> {
        let mut user_vectors = BTreeMap::new();
        for (user_id, history) in catalog.users() {
            if history.is_empty() {
                continue;
            }
            user_vectors.insert(user_id.clone(), user_embedding(history, &index)?);
        }
        let bm25 = Bm25Index::new(
            catalog
                .items()
                .values()
                .map(|item| (item.item_id.as_str(), item.embedding_text())),
        );
        Ok(Self {
            catalog,
            index,
            provider,
            bm25,
            user_vectors,
            query_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn index(&self) -> &Arc<VectorIndex> {
        &self.index
    }

    pub fn provider(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.provider
    }

    pub fn user_vector(&self, user_id: &str) -> Option<&Vector> {
        self.user_vectors.get(user_id)
    }

    /// Embeds query text, memoized across sessions.
    pub fn embed_query(&self, text: &str) -> Result<Vector, ToolError> {
        if text.trim().is_empty() {
            return Err(ToolError::EmptyText);
        }
        if let Some(v) = self.query_cache.lock().unwrap().get(text) {
            return Ok(v.clone());
        }
        let v = embed_text(self.provider.as_ref(), text).map_err(ToolError::from_embedding)?;
        self.query_cache
            .lock()
            .unwrap()
            .insert(text.to_string(), v.clone());
        Ok(v)
    }

    /// Cosine between a query vector and an item; missing or zero vectors
    /// count as 0.
    pub fn relevance(&self, query: &Vector, item_id: &str) -> f64 {
        self.index.similarity(query, item_id).unwrap_or(0.0)
    }

    pub fn get_similar_users(&self, user_id: &str, n: usize) -> Result<NeighborSet, ToolError> {
        let history = self
            .catalog
            .get_history(user_id)
            .map_err(|_| ToolError::UnknownUser(user_id.to_string()))?;
        if history.is_empty() {
            return Err(ToolError::EmptyHistory(user_id.to_string()));
        }
        if n == 0 {
            return Ok(NeighborSet::default());
        }
        let Some(target) = self.user_vectors.get(user_id) else {
            return Ok(NeighborSet::default());
        };
        let mut neighbors: Vec<Neighbor> = self
            .user_vectors
            .iter()
            .filter(|(other, _)| other.as_str() != user_id)
            .filter_map(|(other, v)| {
                cosine(target, v).ok().map(|score| Neighbor {
                    user_id: other.clone(),
                    score,
                })
            })
            .collect();
        neighbors.sort_by(|a, b| by_score_then_id(a.score, &a.user_id, b.score, &b.user_id));
        neighbors.truncate(n);
        Ok(NeighborSet { neighbors })
    }

    pub fn get_relevant_items(&self, user_id: &str, query: &str, n: usize) -> Result<RelevantHistory, ToolError> {
        let history = self
            .catalog
            .get_history(user_id)
            .map_err(|_| ToolError::UnknownUser(user_id.to_string()))?;
        let q = self.embed_query(query)?;
        let mut items: Vec<RelevantItem> = history
            .distinct_items()
            .into_iter()
            .filter_map(|item_id| {
                let score = self.index.similarity(&q, item_id).ok()?;
                Some(RelevantItem {
                    item_id: item_id.to_string(),
                    score,
                    last_timestamp: history.last_timestamp(item_id).unwrap_or_default(),
                })
            })
            .collect();
        items.sort_by(|a, b| by_score_then_id(a.score, &a.item_id, b.score, &b.item_id));
        items.truncate(n);
        Ok(RelevantHistory { items })
    }

    pub fn retrieve_by_query(
        &self,
        query: &str,
        k: usize,
        exclude: &BTreeSet<String>,
    ) -> Result<Vec<ScoredItem>, ToolError> {
        let q = self.embed_query(query)?;
        Ok(self.index.top_k(&q, k, exclude)?)
    }

    /// Nearest items to an anchor; the anchor itself never appears.
    pub fn retrieve_by_item(
        &self,
        item_id: &str,
        k: usize,
        exclude: &BTreeSet<String>,
    ) -> Result<Vec<ScoredItem>, ToolError> {
        let anchor = self
            .index
            .get(item_id)
            .ok_or_else(|| ToolError::UnknownItem(item_id.to_string()))?;
        let mut scored = self
            .index
            .score_all(anchor, |id| id != item_id && !exclude.contains(id));
        sort_scored(&mut scored);
        scored.truncate(k);
        Ok(scored)
    }

    pub fn bm25_search(&self, query: &str, k: usize) -> Result<Vec<ScoredItem>, ToolError> {
        if query.trim().is_empty() {
            return Err(ToolError::EmptyText);
        }
        Ok(self.bm25.search(query, k))
    }
}

/// One tool invocation, as agents, the orchestrator, and the HTTP tool
/// endpoints issue it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tool", content = "args", rename_all = "snake_case")]
pub enum ToolRequest {
    GetSimilarUsers {
        user_id: String,
        n: usize,
    },
    GetRelevantItems {
        user_id: String,
        query: String,
        n: usize,
    },
    RetrieveByQuery {
        query: String,
        k: usize,
        #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
        exclude: BTreeSet<String>,
    },
    RetrieveByItem {
        item_id: String,
        k: usize,
        #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
        exclude: BTreeSet<String>,
    },
    Bm25Search {
        query: String,
        k: usize,
    },
}

impl ToolRequest {
    pub fn name(&self) -> &'static str {
        match self {
            ToolRequest::GetSimilarUsers { .. } => "get_similar_users",
            ToolRequest::GetRelevantItems { .. } => "get_relevant_items",
            ToolRequest::RetrieveByQuery { .. } => "retrieve_by_query",
            ToolRequest::RetrieveByItem { .. } => "retrieve_by_item",
            ToolRequest::Bm25Search { .. } => "bm25_search",
        }
    }

    /// Same request with `n`/`k` clamped to the agent-override range.
    pub fn clamped(mut self) -> Self {
        match &mut self {
            ToolRequest::GetSimilarUsers { n, .. } | ToolRequest::GetRelevantItems { n, .. } => {
                *n = clamp_bound(*n)
            }
            ToolRequest::RetrieveByQuery { k, .. }
            | ToolRequest::RetrieveByItem { k, .. }
            | ToolRequest::Bm25Search { k, .. } => *k = clamp_bound(*k),
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ToolResponse {
    Neighbors(NeighborSet),
    History(RelevantHistory),
    Items(Vec<ScoredItem>),
}

impl ToolResponse {
    pub fn len(&self) -> usize {
        match self {
            ToolResponse::Neighbors(n) => n.neighbors.len(),
            ToolResponse::History(h) => h.items.len(),
            ToolResponse::Items(items) => items.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Item hits, for responses that carry items.
    pub fn scored_items(&self) -> Vec<ScoredItem> {
        match self {
            ToolResponse::Neighbors(_) => Vec::new(),
            ToolResponse::History(h) => h
                .items
                .iter()
                .map(|i| ScoredItem::new(i.item_id.clone(), i.score))
                .collect(),
            ToolResponse::Items(items) => items.clone(),
        }
    }
}

/// One line of the call log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: String,
    pub args: serde_json::Value,
    pub caller: String,
    pub round: usize,
    pub result_count: usize,
    pub elapsed_ms: f64,
}

/// Session-scoped view over [`Retrieval`] with an append-only call log.
pub struct ToolSet {
    retrieval: Arc<Retrieval>,
    defaults: ToolDefaults,
    log: Mutex<Vec<ToolCall>>,
}

impl ToolSet {
    pub fn new(retrieval: Arc<Retrieval>, defaults: ToolDefaults) -> Self {
        Self {
            retrieval,
            defaults,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn retrieval(&self) -> &Arc<Retrieval> {
        &self.retrieval
    }

    pub fn defaults(&self) -> ToolDefaults {
        self.defaults
    }

    /// Runs a request without logging it; returns the record to log.
    pub fn execute(
        &self,
        request: &ToolRequest,
        caller: &str,
        round: usize,
    ) -> (Result<ToolResponse, ToolError>, ToolCall) {
        let started = Instant::now();
        let r = &self.retrieval;
        let result = match request {
            ToolRequest::GetSimilarUsers { user_id, n } => {
                r.get_similar_users(user_id, *n).map(ToolResponse::Neighbors)
            }
            ToolRequest::GetRelevantItems { user_id, query, n } => {
                r.get_relevant_items(user_id, query, *n).map(ToolResponse::History)
            }
            ToolRequest::RetrieveByQuery { query, k, exclude } => {
                r.retrieve_by_query(query, *k, exclude).map(ToolResponse::Items)
            }
            ToolRequest::RetrieveByItem { item_id, k, exclude } => {
                r.retrieve_by_item(item_id, *k, exclude).map(ToolResponse::Items)
            }
            ToolRequest::Bm25Search { query, k } => r.bm25_search(query, *k).map(ToolResponse::Items),
        };
        let args = serde_json::to_value(request)
            .ok()
            .and_then(|mut v| v.get_mut("args").map(serde_json::Value::take))
            .unwrap_or(serde_json::Value::Null);
        let record = ToolCall {
            tool: request.name().to_string(),
            args,
            caller: caller.to_string(),
            round,
            result_count: result.as_ref().map(ToolResponse::len).unwrap_or(0),
            elapsed_ms: started.elapsed().as_secs_f64() * 1000.0,
        };
        (result, record)
    }

    /// Executes and logs.
    pub fn call(&self, request: &ToolRequest, caller: &str, round: usize) -> Result<ToolResponse, ToolError> {
        let (result, record) = self.execute(request, caller, round);
        self.log.lock().unwrap().push(record);
        result
    }

    /// Appends records produced elsewhere (agent-scoped handles), in order.
    pub fn record(&self, calls: impl IntoIterator<Item = ToolCall>) {
        self.log.lock().unwrap().extend(calls);
    }

    pub fn call_log(&self) -> Vec<ToolCall> {
        self.log.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn get_similar_users(&self, caller: &str, round: usize, user_id: &str, n: usize) -> Result<NeighborSet, ToolError> {
        let req = ToolRequest::GetSimilarUsers {
            user_id: user_id.to_string(),
            n,
        };
        match self.call(&req, caller, round)? {
            ToolResponse::Neighbors(n) => Ok(n),
            _ => unreachable!("similar-users request answers with neighbors"),
        }
    }

    pub fn get_relevant_items(
        &self,
        caller: &str,
        round: usize,
        user_id: &str,
        query: &str,
        n: usize,
    ) -> Result<RelevantHistory, ToolError> {
        let req = ToolRequest::GetRelevantItems {
            user_id: user_id.to_string(),
            query: query.to_string(),
            n,
        };
        match self.call(&req, caller, round)? {
            ToolResponse::History(h) => Ok(h),
            _ => unreachable!("relevant-items request answers with history"),
        }
    }

    pub fn retrieve_by_query(
        &self,
        caller: &str,
        round: usize,
        query: &str,
        k: usize,
        exclude: &BTreeSet<String>,
    ) -> Result<Vec<ScoredItem>, ToolError> {
        let req = ToolRequest::RetrieveByQuery {
            query: query.to_string(),
            k,
            exclude: exclude.clone(),
        };
        self.call(&req, caller, round).map(|r| r.scored_items())
    }

    pub fn retrieve_by_item(
        &self,
        caller: &str,
        round: usize,
        item_id: &str,
        k: usize,
    ) -> Result<Vec<ScoredItem>, ToolError> {
        let req = ToolRequest::RetrieveByItem {
            item_id: item_id.to_string(),
            k,
            exclude: BTreeSet::new(),
        };
        self.call(&req, caller, round).map(|r| r.scored_items())
    }

    pub fn bm25_search(&self, caller: &str, round: usize, query: &str, k: usize) -> Result<Vec<ScoredItem>, ToolError> {
        let req = ToolRequest::Bm25Search {
            query: query.to_string(),
            k,
        };
        self.call(&req, caller, round).map(|r| r.scored_items())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Interaction, InteractionHistory, Item};
    use crate::embedding::{build_index, HashEmbedder};

    fn item(id: &str, title: &str, category: &str) -> Item {
        Item {
            item_id: id.into(),
            title: title.into(),
            category: category.into(),
            attributes: Default::default(),
            description: String::new(),
        }
    }

    fn history(user: &str, items: &[&str]) -> InteractionHistory {
        InteractionHistory {
            user_id: user.into(),
            events: items
                .iter()
                .enumerate()
                .map(|(t, id)| Interaction { item_id: id.to_string(), timestamp: t as i64, rating: None })
                .collect(),
        }
    }

    fn tools() -> ToolSet {
        let catalog = Catalog::new(
            [
                item("a", "wool coat", "outerwear"),
                item("b", "rain jacket", "outerwear"),
                item("c", "trail shoe", "footwear"),
                item("d", "road shoe", "footwear"),
                item("e", "silk scarf", "accessories"),
            ],
            [
                history("u1", &["a", "b"]),
                history("u2", &["a", "b"]),
                history("u3", &["c", "d", "c"]),
                history("u4", &[]),
            ],
        )
        .unwrap();
        let provider: Arc<dyn EmbeddingProvider> = Arc::new(HashEmbedder::default());
        let (index, _) = build_index(&catalog, provider.as_ref(), None).unwrap();
        let r = Retrieval::new(Arc::new(catalog), Arc::new(index), provider).unwrap();
        ToolSet::new(Arc::new(r), ToolDefaults::default())
    }

    #[test]
    fn identical_histories_are_top_neighbors() {
        let t = tools();
        let n = t.get_similar_users("test", 0, "u1", 5).unwrap();
        assert_eq!(n.neighbors[0].user_id, "u2");
        assert!((n.neighbors[0].score - 1.0).abs() < 1e-9);
        assert!(n.neighbors.iter().all(|x| x.user_id != "u1" && x.user_id != "u4"));
    }

    #[test]
    fn zero_neighbors_and_errors() {
        let t = tools();
        assert!(t.get_similar_users("t", 0, "u1", 0).unwrap().neighbors.is_empty());
        assert_eq!(
            t.get_similar_users("t", 0, "u4", 3),
            Err(ToolError::EmptyHistory("u4".into()))
        );
        assert_eq!(
            t.get_similar_users("t", 0, "ghost", 3),
            Err(ToolError::UnknownUser("ghost".into()))
        );
    }

    #[test]
    fn relevant_items_subset_of_history() {
        let t = tools();
        let h = t.get_relevant_items("t", 0, "u3", "shoe for trails", 5).unwrap();
        assert_eq!(h.items.len(), 2, "duplicate history entries collapse");
        assert_eq!(h.items[0].item_id, "c");
        assert_eq!(h.items[0].last_timestamp, 2);
        assert!(t.get_relevant_items("t", 0, "u4", "shoe", 5).unwrap().items.is_empty());
        assert_eq!(t.get_relevant_items("t", 0, "u3", " ", 5), Err(ToolError::EmptyText));
    }

    #[test]
    fn query_matching_item_text_ranks_it_first() {
        let t = tools();
        let out = t
            .retrieve_by_query("t", 0, "silk scarf. accessories.", 3, &BTreeSet::new())
            .unwrap();
        assert_eq!(out[0].item_id, "e");
        let all: BTreeSet<String> = ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect();
        assert!(t.retrieve_by_query("t", 0, "coat", 3, &all).unwrap().is_empty());
    }

    #[test]
    fn anchor_is_excluded() {
        let t = tools();
        let out = t.retrieve_by_item("t", 0, "a", 10).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|s| s.item_id != "a"));
        assert_eq!(t.retrieve_by_item("t", 0, "zz", 3), Err(ToolError::UnknownItem("zz".into())));
    }

    #[test]
    fn every_call_is_logged_once() {
        let t = tools();
        let _ = t.get_similar_users("agent-1", 2, "u1", 2);
        let _ = t.retrieve_by_item("agent-1", 2, "zz", 3);
        let _ = t.bm25_search("agent-2", 3, "shoe", 3);
        let log = t.call_log();
        assert_eq!(log.len(), 3);
        assert_eq!(log[0].tool, "get_similar_users");
        assert_eq!(log[0].args["n"], 2);
        assert_eq!(log[1].result_count, 0);
        assert_eq!(log[2].caller, "agent-2");
        assert_eq!(log[2].round, 3);
    }

    #[test]
    fn overrides_are_clamped() {
        let req = ToolRequest::RetrieveByQuery { query: "x".into(), k: 5000, exclude: BTreeSet::new() }.clamped();
        assert!(matches!(req, ToolRequest::RetrieveByQuery { k: 100, .. }));
        let req = ToolRequest::GetSimilarUsers { user_id: "u".into(), n: 0 }.clamped();
        assert!(matches!(req, ToolRequest::GetSimilarUsers { n: 1, .. }));
    }

    #[test]
    fn request_wire_shape() {
        let req = ToolRequest::GetRelevantItems { user_id: "u1".into(), query: "q".into(), n: 5 };
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(v["tool"], "get_relevant_items");
        assert_eq!(v["args"]["user_id"], "u1");
        let back: ToolRequest = serde_json::from_value(v).unwrap();
        assert_eq!(back, req);
    }
}
