//! Users, items and interaction histories.
//!
//! All three input files are line-delimited JSON. A [`Catalog`] is validated
//! once at load time and is immutable afterwards; every other module borrows
//! it (usually through an `Arc`) for concurrent reads.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{source_name}:{line}: malformed record: {reason}")]
    MalformedRecord {
        source_name: String,
        line: usize,
        reason: String,
    },
    #[error("interaction of user {user_id} references unknown item {item_id}")]
    DanglingReference { user_id: String, item_id: String },
    #[error("duplicate item id {0}")]
    DuplicateItemId(String),
    #[error("duplicate interaction ({user_id}, {item_id}, {timestamp})")]
    DuplicateInteraction {
        user_id: String,
        item_id: String,
        timestamp: i64,
    },
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("query case references unknown relevant item {0}")]
    UnknownRelevantItem(String),
}

/// Scalar attribute value: the items file allows strings and numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Number(serde_json::Number),
    Text(String),
}

impl std::fmt::Display for AttrValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttrValue::Number(n) => write!(f, "{n}"),
            AttrValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    pub category: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, AttrValue>,
    #[serde(default)]
    pub description: String,
}

impl Item {
    /// Text fed to the embedding provider and the BM25 index:
    /// `"title. category. description"`. Attributes are left out.
    pub fn embedding_text(&self) -> String {
        format!("{}. {}. {}", self.title, self.category, self.description)
            .trim_end()
            .to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub item_id: String,
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
}

/// A user's interactions, sorted non-decreasing by timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionHistory {
    pub user_id: String,
    pub events: Vec<Interaction>,
}

impl InteractionHistory {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Distinct item ids, in first-occurrence order.
    pub fn distinct_items(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.events
            .iter()
            .filter(|e| seen.insert(e.item_id.as_str()))
            .map(|e| e.item_id.as_str())
            .collect()
    }

    pub fn item_set(&self) -> BTreeSet<String> {
        self.events.iter().map(|e| e.item_id.clone()).collect()
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.events.iter().any(|e| e.item_id == item_id)
    }

    /// Timestamp of the most recent interaction with `item_id`.
    pub fn last_timestamp(&self, item_id: &str) -> Option<i64> {
        self.events
            .iter()
            .rev()
            .find(|e| e.item_id == item_id)
            .map(|e| e.timestamp)
    }

    /// The most recent `window` events (all of them when `None`).
    pub fn recent(&self, window: Option<usize>) -> &[Interaction] {
        match window {
            Some(w) if w < self.events.len() => &self.events[self.events.len() - w..],
            _ => &self.events,
        }
    }
}

/// Counters from one load.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub items_read: usize,
    pub interactions_read: usize,
    pub blank_lines_skipped: usize,
    pub unknown_fields: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Catalog {
    items: BTreeMap<String, Item>,
    users: BTreeMap<String, InteractionHistory>,
}

impl Catalog {
    /// Validates and assembles a catalog. Histories are stably sorted by
    /// timestamp, so equal timestamps keep their input order.
    pub fn new(
        items: impl IntoIterator<Item = Item>,
        histories: impl IntoIterator<Item = InteractionHistory>,
    ) -> Result<Self, CatalogError> {
        let mut item_map = BTreeMap::new();
        for item in items {
            if item.item_id.is_empty() {
                return Err(CatalogError::MalformedRecord {
                    source_name: "items".into(),
                    line: item_map.len() + 1,
                    reason: "empty item_id".into(),
                });
            }
            if item_map.contains_key(&item.item_id) {
                return Err(CatalogError::DuplicateItemId(item.item_id));
            }
            item_map.insert(item.item_id.clone(), item);
        }

        let mut users: BTreeMap<String, InteractionHistory> = BTreeMap::new();
        for history in histories {
            let entry = users
                .entry(history.user_id.clone())
                .or_insert_with(|| InteractionHistory {
                    user_id: history.user_id.clone(),
                    events: Vec::new(),
                });
            entry.events.extend(history.events);
        }
        for history in users.values_mut() {
            let mut triples = BTreeSet::new();
            for event in &history.events {
                if !item_map.contains_key(&event.item_id) {
                    return Err(CatalogError::DanglingReference {
                        user_id: history.user_id.clone(),
                        item_id: event.item_id.clone(),
                    });
                }
                if !triples.insert((event.item_id.as_str(), event.timestamp)) {
                    return Err(CatalogError::DuplicateInteraction {
                        user_id: history.user_id.clone(),
                        item_id: event.item_id.clone(),
                        timestamp: event.timestamp,
                    });
                }
            }
            history.events.sort_by_key(|e| e.timestamp);
        }

        Ok(Self {
            items: item_map,
            users,
        })
    }

    pub fn items(&self) -> &BTreeMap<String, Item> {
        &self.items
    }

    pub fn users(&self) -> &BTreeMap<String, InteractionHistory> {
        &self.users
    }

    pub fn item(&self, item_id: &str) -> Option<&Item> {
        self.items.get(item_id)
    }

    pub fn contains_item(&self, item_id: &str) -> bool {
        self.items.contains_key(item_id)
    }

    pub fn contains_user(&self, user_id: &str) -> bool {
        self.users.contains_key(user_id)
    }

    pub fn get_history(&self, user_id: &str) -> Result<&InteractionHistory, CatalogError> {
        self.users
            .get(user_id)
            .ok_or_else(|| CatalogError::UnknownUser(user_id.to_string()))
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Writes the two line-delimited files `load_catalog` reads.
    pub fn write_jsonl(
        &self,
        mut items_out: impl Write,
        mut interactions_out: impl Write,
    ) -> std::io::Result<()> {
        for item in self.items.values() {
            serde_json::to_writer(&mut items_out, item)?;
            items_out.write_all(b"\n")?;
        }
        for history in self.users.values() {
            for event in &history.events {
                let record = InteractionRecord {
                    user_id: history.user_id.clone(),
                    item_id: event.item_id.clone(),
                    timestamp: event.timestamp,
                    rating: event.rating,
                };
                serde_json::to_writer(&mut interactions_out, &record)?;
                interactions_out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn save(&self, items_path: &Path, interactions_path: &Path) -> Result<(), CatalogError> {
        let items = create(items_path)?;
        let interactions = create(interactions_path)?;
        self.write_jsonl(
            std::io::BufWriter::new(items),
            std::io::BufWriter::new(interactions),
        )
        .map_err(|source| CatalogError::Io {
            path: items_path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InteractionRecord {
    user_id: String,
    item_id: String,
    timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rating: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
struct QueryCaseRecord {
    #[serde(default)]
    case_id: Option<String>,
    user_id: String,
    query: String,
    relevant_item_ids: Vec<String>,
}

const ITEM_FIELDS: &[&str] = &["item_id", "title", "category", "attributes", "description"];
const INTERACTION_FIELDS: &[&str] = &["user_id", "item_id", "timestamp", "rating"];
const CASE_FIELDS: &[&str] = &["case_id", "user_id", "query", "relevant_item_ids"];

/// Ground truth for one evaluation query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCase {
    pub case_id: String,
    pub user_id: String,
    pub query: String,
    pub relevant_item_ids: BTreeSet<String>,
}

fn create(path: &Path) -> Result<File, CatalogError> {
    File::create(path).map_err(|source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn open(path: &Path) -> Result<File, CatalogError> {
    File::open(path).map_err(|source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads non-blank lines as JSON objects, counting unknown top-level keys.
fn read_records<T: serde::de::DeserializeOwned>(
    reader: impl Read,
    source_name: &str,
    known: &[&str],
    report: &mut LoadReport,
) -> Result<Vec<(usize, T)>, CatalogError> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CatalogError::Io {
            path: source_name.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            report.blank_lines_skipped += 1;
            continue;
        }
        let malformed = |reason: String| CatalogError::MalformedRecord {
            source_name: source_name.to_string(),
            line: line_no,
            reason,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| malformed("expected a JSON object".into()))?;
        let unknown = obj.keys().filter(|k| !known.contains(&k.as_str())).count();
        if unknown > 0 {
            tracing::warn!(source = source_name, line = line_no, unknown, "ignoring unknown fields");
            report.unknown_fields += unknown;
        }
        let record = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        out.push((line_no, record));
    }
    Ok(out)
}

/// Loads a catalog from in-memory readers; `load_catalog` wraps this for files.
pub fn load_catalog_from_readers(
    items: impl Read,
    interactions: impl Read,
) -> Result<(Catalog, LoadReport), CatalogError> {
    let mut report = LoadReport::default();
    let item_records: Vec<(usize, Item)> = read_records(items, "items", ITEM_FIELDS, &mut report)?;
    let mut seen = BTreeSet::new();
    for (line, item) in &item_records {
        if item.item_id.is_empty() {
            return Err(CatalogError::MalformedRecord {
                source_name: "items".into(),
                line: *line,
                reason: "empty item_id".into(),
            });
        }
        if !seen.insert(item.item_id.clone()) {
            return Err(CatalogError::DuplicateItemId(item.item_id.clone()));
        }
    }
    report.items_read = item_records.len();

    let interaction_records: Vec<(usize, InteractionRecord)> =
        read_records(interactions, "interactions", INTERACTION_FIELDS, &mut report)?;
    report.interactions_read = interaction_records.len();

    let mut histories: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
    for (line, rec) in interaction_records {
        if rec.user_id.is_empty() {
            return Err(CatalogError::MalformedRecord {
                source_name: "interactions".into(),
                line,
                reason: "empty user_id".into(),
            });
        }
        if let Some(r) = rec.rating {
            if !(1.0..=5.0).contains(&r) {
                return Err(CatalogError::MalformedRecord {
                    source_name: "interactions".into(),
                    line,
                    reason: format!("rating {r} outside [1, 5]"),
                });
            }
        }
        histories.entry(rec.user_id).or_default().push(Interaction {
            item_id: rec.item_id,
            timestamp: rec.timestamp,
            rating: rec.rating,
        });
    }

    let catalog = Catalog::new(
        item_records.into_iter().map(|(_, item)| item),
        histories
            .into_iter()
            .map(|(user_id, events)| InteractionHistory { user_id, events }),
    )?;
    Ok((catalog, report))
}

pub fn load_catalog(
    items_path: &Path,
    interactions_path: &Path,
) -> Result<(Catalog, LoadReport), CatalogError> {
    load_catalog_from_readers(open(items_path)?, open(interactions_path)?)
}

pub fn load_query_cases_from_reader(
    reader: impl Read,
    catalog: &Catalog,
) -> Result<Vec<QueryCase>, CatalogError> {
    let mut report = LoadReport::default();
    let records: Vec<(usize, QueryCaseRecord)> =
        read_records(reader, "cases", CASE_FIELDS, &mut report)?;
    let mut cases = Vec::with_capacity(records.len());
    for (line, rec) in records {
        let malformed = |reason: &str| CatalogError::MalformedRecord {
            source_name: "cases".into(),
            line,
            reason: reason.to_string(),
        };
        if rec.relevant_item_ids.is_empty() {
            return Err(malformed("empty relevance set"));
        }
        if rec.query.trim().is_empty() {
            return Err(malformed("empty query"));
        }
        if !catalog.contains_user(&rec.user_id) {
            return Err(CatalogError::UnknownUser(rec.user_id));
        }
        if let Some(missing) = rec
            .relevant_item_ids
            .iter()
            .find(|id| !catalog.contains_item(id))
        {
            return Err(CatalogError::UnknownRelevantItem(missing.clone()));
        }
        cases.push(QueryCase {
            case_id: rec.case_id.unwrap_or_else(|| format!("case-{line}")),
            user_id: rec.user_id,
            query: rec.query,
            relevant_item_ids: rec.relevant_item_ids.into_iter().collect(),
        });
    }
    Ok(cases)
}

pub fn load_query_cases(path: &Path, catalog: &Catalog) -> Result<Vec<QueryCase>, CatalogError> {
    load_query_cases_from_reader(open(path)?, catalog)
}

pub fn write_query_cases(cases: &[QueryCase], mut out: impl Write) -> std::io::Result<()> {
    for case in cases {
        serde_json::to_writer(&mut out, case)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
