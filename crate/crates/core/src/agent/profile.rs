use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::catalog::Catalog;
use crate::text::truncate_chars;

pub const PROFILE_BUDGET: usize = 1200;

const TOP_CATEGORIES: usize = 3;
const RECENT_TITLES: usize = 5;
const FIELD_CAP: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    UserAgent,
    ItemAgent,
    Orchestrator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCount {
    pub category: String,
    pub count: usize,
}

/// Structured digest behind a profile's text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    User {
        similarity: f64,
        top_categories: Vec<CategoryCount>,
        /// Most recent distinct items, newest first.
        recent_items: Vec<String>,
        recent_titles: Vec<String>,
    },
    Item {
        relevance: f64,
        title: String,
        category: String,
        attributes: Vec<(String, String)>,
        last_timestamp: i64,
        target_user: String,
    },
    Orchestrator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: String,
    pub role: Role,
    pub subject_id: String,
    pub profile_text: String,
    pub evidence: Evidence,
}

impl AgentProfile {
    /// Neighbor similarity for user agents, query relevance for item agents.
    pub fn score(&self) -> f64 {
        match &self.evidence {
            Evidence::User { similarity, .. } => *similarity,
            Evidence::Item { relevance, .. } => *relevance,
            Evidence::Orchestrator => 0.0,
        }
    }

    pub fn top_category_names(&self) -> Vec<&str> {
        match &self.evidence {
            Evidence::User { top_categories, .. } => top_categories.iter().map(|c| c.category.as_str()).collect(),
            Evidence::Item { category, .. } => vec![category.as_str()],
            Evidence::Orchestrator => Vec::new(),
        }
    }
}

pub fn user_agent_id(user_id: &str) -> String {
    format!("user:{user_id}")
}

pub fn item_agent_id(item_id: &str) -> String {
    format!("item:{item_id}")
}

pub const ORCHESTRATOR_ID: &str = "orchestrator";

/// Category frequencies over interaction events, highest first, ties by
/// name.
pub fn top_categories(catalog: &Catalog, item_ids: impl IntoIterator<Item = impl AsRef<str>>, n: usize) -> Vec<CategoryCount> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for id in item_ids {
        if let Some(item) = catalog.item(id.as_ref()) {
            *counts.entry(item.category.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<CategoryCount> = counts
        .into_iter()
        .map(|(category, count)| CategoryCount { category: category.to_string(), count })
        .collect();
    ranked.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.category.cmp(&b.category)));
    ranked.truncate(n);
    ranked
}

/// Profile for a neighbor of `target_user`. `history_window` limits the
/// digest to the neighbor's most recent events.
pub fn build_user_agent_profile(
    catalog: &Catalog,
    neighbor_id: &str,
    similarity: f64,
    target_user: &str,
    history_window: Option<usize>,
) -> Result<AgentProfile, AgentError> {
    catalog
        .get_history(target_user)
        .map_err(|_| AgentError::UnknownUser(target_user.to_string()))?;
    let history = catalog
        .get_history(neighbor_id)
        .map_err(|_| AgentError::UnknownUser(neighbor_id.to_string()))?;
    if history.is_empty() {
        return Err(AgentError::EmptyHistory(neighbor_id.to_string()));
    }
    let events = history.recent(history_window);
    let categories = top_categories(catalog, events.iter().map(|e| &e.item_id), TOP_CATEGORIES);

    let mut recent_items: Vec<String> = Vec::new();
    for event in events.iter().rev() {
        if recent_items.len() == RECENT_TITLES {
            break;
        }
        if !recent_items.contains(&event.item_id) {
            recent_items.push(event.item_id.clone());
        }
    }
    let recent_titles: Vec<String> = recent_items
        .iter()
        .map(|id| catalog.item(id).map(|i| i.title.clone()).unwrap_or_default())
        .collect();

    let category_text = categories
        .iter()
        .map(|c| format!("{} ({})", truncate_chars(&c.category, FIELD_CAP / 2), c.count))
        .collect::<Vec<_>>()
        .join(", ");
    let mut text = format!(
        "Neighbor {} of target user {} with similarity {:.4}. Top categories: {}. Recent items:",
        truncate_chars(neighbor_id, FIELD_CAP / 2),
        truncate_chars(target_user, FIELD_CAP / 2),
        similarity,
        category_text
    );
    // newest titles first so truncation keeps the most recent ones
    for title in &recent_titles {
        let piece = format!(" {};", truncate_chars(title, FIELD_CAP));
        if text.chars().count() + piece.chars().count() > PROFILE_BUDGET {
            break;
        }
        text.push_str(&piece);
    }
    Ok(AgentProfile {
        agent_id: user_agent_id(neighbor_id),
        role: Role::UserAgent,
        subject_id: neighbor_id.to_string(),
        profile_text: truncate_chars(&text, PROFILE_BUDGET),
        evidence: Evidence::User {
            similarity,
            top_categories: categories,
            recent_items,
            recent_titles,
        },
    })
}

/// Profile for an anchor item drawn from the target user's own history.
pub fn build_item_agent_profile(
    catalog: &Catalog,
    anchor_id: &str,
    relevance: f64,
    target_user: &str,
    query: &str,
) -> Result<AgentProfile, AgentError> {
    let item = catalog
        .item(anchor_id)
        .ok_or_else(|| AgentError::UnknownItem(anchor_id.to_string()))?;
    let history = catalog
        .get_history(target_user)
        .map_err(|_| AgentError::UnknownUser(target_user.to_string()))?;
    let last_timestamp = history
        .last_timestamp(anchor_id)
        .ok_or_else(|| AgentError::ItemNotInHistory {
            item_id: anchor_id.to_string(),
            user_id: target_user.to_string(),
        })?;
    let attributes: Vec<(String, String)> = item
        .attributes
        .iter()
        .map(|(k, v)| (k.clone(), v.to_string()))
        .collect();

    let mut text = format!(
        "Anchor item {} from the history of {}, last interaction at {}, relevance {:.4} to query \"{}\". Title: {}. Category: {}.",
        truncate_chars(anchor_id, FIELD_CAP / 2),
        truncate_chars(target_user, FIELD_CAP / 2),
        last_timestamp,
        relevance,
        truncate_chars(query, FIELD_CAP),
        truncate_chars(&item.title, FIELD_CAP),
        truncate_chars(&item.category, FIELD_CAP / 2),
    );
    if !attributes.is_empty() {
        let pairs = attributes
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", ");
        text.push_str(&format!(" Attributes: {pairs}."));
    }
    if !item.description.trim().is_empty() {
        text.push_str(&format!(" Description: {}", item.description.trim()));
    }
    Ok(AgentProfile {
        agent_id: item_agent_id(anchor_id),
        role: Role::ItemAgent,
        subject_id: anchor_id.to_string(),
        profile_text: truncate_chars(&text, PROFILE_BUDGET),
        evidence: Evidence::Item {
            relevance,
            title: item.title.clone(),
            category: item.category.clone(),
            attributes,
            last_timestamp,
            target_user: target_user.to_string(),
        },
    })
}
