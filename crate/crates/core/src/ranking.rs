//! Scored results and ranked lists shared by every retrieval and ranking path.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// One retrieval hit. `score` is a cosine similarity unless the producing
/// operation says otherwise (BM25, CF aggregates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item_id: String,
    pub score: f64,
}

impl ScoredItem {
    pub fn new(item_id: impl Into<String>, score: f64) -> Self {
        Self {
            item_id: item_id.into(),
            score,
        }
    }
}

/// Descending by score, ascending by id on ties. Every ranked output in the
/// crate is ordered with this comparator.
pub fn by_score_then_id(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

pub fn sort_scored(items: &mut [ScoredItem]) {
    items.sort_by(|a, b| by_score_then_id(a.score, &a.item_id, b.score, &b.item_id));
}

/// A rationale attached to a ranked entry, attributed to the agent that gave it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    pub agent_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub item_id: String,
    pub score: f64,
    #[serde(default)]
    pub rationales: Vec<Rationale>,
}

/// Ordered, deduplicated top-K list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    /// Builds a list from arbitrary entries: duplicates keep their best score,
    /// the result is sorted with the crate-wide comparator and cut to `limit`.
    pub fn from_entries(entries: impl IntoIterator<Item = RankedEntry>, limit: usize) -> Self {
        let mut best: std::collections::BTreeMap<String, RankedEntry> = Default::default();
        for entry in entries {
            match best.get_mut(&entry.item_id) {
                Some(existing) if existing.score >= entry.score => {}
                _ => {
                    best.insert(entry.item_id.clone(), entry);
                }
            }
        }
        let mut entries: Vec<RankedEntry> = best.into_values().collect();
        entries.sort_by(|a, b| by_score_then_id(a.score, &a.item_id, b.score, &b.item_id));
        entries.truncate(limit);
        Self { entries }
    }

    pub fn from_scored(items: &[ScoredItem], limit: usize) -> Self {
        Self::from_entries(
            items.iter().map(|s| RankedEntry {
                item_id: s.item_id.clone(),
                score: s.score,
                rationales: Vec::new(),
            }),
            limit,
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn item_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.item_id.clone()).collect()
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.entries.iter().any(|e| e.item_id == item_id)
    }

    /// Unique ids, non-increasing scores and length within `limit`.
    pub fn is_valid(&self, limit: usize) -> bool {
        let mut seen = std::collections::BTreeSet::new();
        self.entries.len() <= limit
            && self.entries.iter().all(|e| seen.insert(e.item_id.as_str()))
            && self.entries.windows(2).all(|w| w[0].score >= w[1].score)
    }
}
