//! Non-agentic comparators: ItemCF and UserCF on binary implicit feedback,
//! both reranked by query similarity, plus thin BM25 and dense wrappers.
//!
//! Co-occurrence statistics leave the target user's own row out, so a
//! target's history never counts as evidence for itself.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::ranking::{sort_scored, RankedEntry, RankedList, Rationale, ScoredItem};
use crate::tools::{Retrieval, ToolError};

pub const DEFAULT_RERANK_POOL: usize = 50;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BaselineError {
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("user {0} has an empty history")]
    EmptyHistory(String),
    #[error("text is empty")]
    EmptyText,
    #[error("no vector for item {0}")]
    MissingItemVector(String),
    #[error("unknown baseline method {0}")]
    UnknownMethod(String),
    #[error(transparent)]
    Tool(#[from] ToolError),
}

/// Item popularity and unordered pair co-occurrence over distinct
/// per-user item sets.
#[derive(Debug, Clone, Default)]
pub struct CoocMatrix {
    item_counts: BTreeMap<String, u32>,
    pair_counts: BTreeMap<(String, String), u32>,
    adjacency: BTreeMap<String, BTreeMap<String, u32>>,
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl CoocMatrix {
    pub fn build(catalog: &Catalog) -> Self {
        let mut m = Self::default();
        for history in catalog.users().values() {
            let items: Vec<String> = history.item_set().into_iter().collect();
            for (i, a) in items.iter().enumerate() {
                *m.item_counts.entry(a.clone()).or_default() += 1;
                for b in &items[i + 1..] {
                    *m.pair_counts.entry(ordered(a, b)).or_default() += 1;
                    *m.adjacency.entry(a.clone()).or_default().entry(b.clone()).or_default() += 1;
                    *m.adjacency.entry(b.clone()).or_default().entry(a.clone()).or_default() += 1;
                }
            }
        }
        m
    }

    pub fn item_count(&self, item_id: &str) -> u32 {
        self.item_counts.get(item_id).copied().unwrap_or(0)
    }

    pub fn pair_count(&self, a: &str, b: &str) -> u32 {
        self.pair_counts.get(&ordered(a, b)).copied().unwrap_or(0)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&(String, String), &u32)> {
        self.pair_counts.iter()
    }

    /// Cosine-normalized co-occurrence over the full population.
    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        let pair = self.pair_count(a, b);
        if pair == 0 {
            return 0.0;
        }
        pair as f64 / ((self.item_count(a) as f64) * (self.item_count(b) as f64)).sqrt()
    }
}

/// Collaborative-filtering scorer over one catalog.
#[derive(Debug, Clone)]
pub struct CfScorer {
    catalog: Arc<Catalog>,
    cooc: CoocMatrix,
}

impl CfScorer {
    pub fn new(catalog: Arc<Catalog>) -> Self {
        let cooc = CoocMatrix::build(&catalog);
        Self { catalog, cooc }
    }

    pub fn cooc(&self) -> &CoocMatrix {
        &self.cooc
    }

    fn target_items(&self, user_id: &str) -> Result<BTreeSet<String>, BaselineError> {
        let history = self
            .catalog
            .get_history(user_id)
            .map_err(|_| BaselineError::UnknownUser(user_id.to_string()))?;
        if history.is_empty() {
            return Err(BaselineError::EmptyHistory(user_id.to_string()));
        }
        Ok(history.item_set())
    }

    /// `score(c) = sum_j pair(j, c) / sqrt(count(j) * count(c))` over the
    /// target's items `j`, with the target's row removed from the counts.
    pub fn item_cf_scores(&self, user_id: &str) -> Result<Vec<ScoredItem>, BaselineError> {
        let owned = self.target_items(user_id)?;
        let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
        for j in &owned {
            let count_j = self.cooc.item_count(j).saturating_sub(1);
            if count_j == 0 {
                continue;
            }
            let Some(adjacent) = self.cooc.adjacency.get(j) else {
                continue;
            };
            for (c, &pair) in adjacent {
                if owned.contains(c) {
                    continue;
                }
                let count_c = self.cooc.item_count(c);
                *scores.entry(c.as_str()).or_default() +=
                    pair as f64 / ((count_j as f64) * (count_c as f64)).sqrt();
            }
        }
        Ok(finish(scores))
    }

    /// `w(v) = |H_u ∩ H_v| / sqrt(|H_u| |H_v|)`; `score(c) = sum of w(v)` over
    /// other users `v` holding `c`.
    pub fn user_cf_scores(&self, user_id: &str) -> Result<Vec<ScoredItem>, BaselineError> {
        let owned = self.target_items(user_id)?;
        let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
        for (other, history) in self.catalog.users() {
            if other == user_id || history.is_empty() {
                continue;
            }
            let theirs = history.item_set();
            let overlap = owned.intersection(&theirs).count();
            if overlap == 0 {
                continue;
            }
            let w = overlap as f64 / ((owned.len() as f64) * (theirs.len() as f64)).sqrt();
            for c in self.catalog.get_history(other).expect("iterating known users").item_set() {
                if owned.contains(&c) {
                    continue;
                }
                let key = self.catalog.items().get_key_value(&c).expect("validated catalog").0;
                *scores.entry(key.as_str()).or_default() += w;
            }
        }
        Ok(finish(scores))
    }
}

fn finish(scores: BTreeMap<&str, f64>) -> Vec<ScoredItem> {
    let mut out: Vec<ScoredItem> = scores
        .into_iter()
        .filter(|(_, s)| *s > 0.0)
        .map(|(id, s)| ScoredItem::new(id, s))
        .collect();
    sort_scored(&mut out);
    out
}

/// Keeps the best `pool` CF candidates and reorders them by cosine to the
/// query embedding, returning the top `list_size`.
pub fn rerank_by_query(
    scores: &[ScoredItem],
    query: &str,
    retrieval: &Retrieval,
    list_size: usize,
    pool: usize,
) -> Result<RankedList, BaselineError> {
    let q = retrieval.embed_query(query).map_err(|e| match e {
        ToolError::EmptyText => BaselineError::EmptyText,
        other => BaselineError::Tool(other),
    })?;
    let mut candidates: Vec<ScoredItem> = scores.to_vec();
    sort_scored(&mut candidates);
    candidates.truncate(pool);
    let mut rescored = Vec::with_capacity(candidates.len());
    let mut entries = Vec::with_capacity(candidates.len());
    for cand in &candidates {
        let score = retrieval
            .index()
            .similarity(&q, &cand.item_id)
            .map_err(|_| BaselineError::MissingItemVector(cand.item_id.clone()))?;
        rescored.push(ScoredItem::new(cand.item_id.clone(), score));
        entries.push(RankedEntry {
            item_id: cand.item_id.clone(),
            score,
            rationales: vec![Rationale {
                agent_id: "cf".into(),
                text: format!("cf score {:.4}", cand.score),
            }],
        });
    }
    Ok(RankedList::from_entries(entries, list_size))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    ItemCf,
    UserCf,
    Bm25,
    Dense,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 4] = [Self::ItemCf, Self::UserCf, Self::Bm25, Self::Dense];

    pub fn name(self) -> &'static str {
        match self {
            Self::ItemCf => "itemcf",
            Self::UserCf => "usercf",
            Self::Bm25 => "bm25",
            Self::Dense => "dense",
        }
    }
}

impl FromStr for BaselineMethod {
    type Err = BaselineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| BaselineError::UnknownMethod(s.to_string()))
    }
}

/// Runs one baseline for `(user, query)`. Items the user already has are
/// never returned.
pub fn run_baseline(
    method: BaselineMethod,
    retrieval: &Retrieval,
    cf: &CfScorer,
    user_id: &str,
    query: &str,
    list_size: usize,
    rerank_pool: usize,
) -> Result<RankedList, BaselineError> {
    let history = retrieval
        .catalog()
        .get_history(user_id)
        .map_err(|_| BaselineError::UnknownUser(user_id.to_string()))?
        .item_set();
    match method {
        BaselineMethod::ItemCf => rerank_by_query(&cf.item_cf_scores(user_id)?, query, retrieval, list_size, rerank_pool),
        BaselineMethod::UserCf => rerank_by_query(&cf.user_cf_scores(user_id)?, query, retrieval, list_size, rerank_pool),
        BaselineMethod::Bm25 => {
            let hits = retrieval.bm25_search(query, list_size + history.len())?;
            let kept: Vec<_> = hits.into_iter().filter(|s| !history.contains(&s.item_id)).collect();
            Ok(RankedList::from_scored(&kept, list_size))
        }
        BaselineMethod::Dense => {
            let hits = retrieval.retrieve_by_query(query, list_size, &history)?;
            Ok(RankedList::from_scored(&hits, list_size))
        }
    }
}
