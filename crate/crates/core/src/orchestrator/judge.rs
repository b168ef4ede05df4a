//! Who drafts and who decides: the scripted rules, or a chat model
//! prompted with the pool.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::Deserialize;

use super::draft::{Decision, Violation};
use super::{DiscussionState, OrchestratorConfig};
use crate::agent::chat::{complete_structured, ChatBackend, ChatError, ChatMessage, ChatParams};
use crate::ranking::{RankedEntry, RankedList};

pub trait Judge: Send + Sync {
    fn name(&self) -> &str;

    /// Final say on the draft. `scripted` is the rule-based draft.
    fn draft(
        &self,
        state: &DiscussionState,
        scripted: RankedList,
        config: &OrchestratorConfig,
    ) -> Result<RankedList, ChatError>;

    /// Final say on sufficiency. `scripted` is the rule-based decision.
    fn decide(&self, state: &DiscussionState, draft: &RankedList, scripted: Decision) -> Decision;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedJudge;

impl Judge for ScriptedJudge {
    fn name(&self) -> &str {
        "scripted"
    }

    fn draft(&self, _: &DiscussionState, scripted: RankedList, _: &OrchestratorConfig) -> Result<RankedList, ChatError> {
        Ok(scripted)
    }

    fn decide(&self, _: &DiscussionState, _: &RankedList, scripted: Decision) -> Decision {
        scripted
    }
}

const DRAFT_SCHEMA: &str = r#"{"entries": [{"item_id": str, "score": num}]}"#;
const DECISION_SCHEMA: &str = r#"{"sufficient": bool, "reasons": [str]}"#;

#[derive(Deserialize)]
struct DraftReply {
    entries: Vec<DraftReplyEntry>,
}

#[derive(Deserialize)]
struct DraftReplyEntry {
    item_id: String,
}

#[derive(Deserialize)]
struct DecisionReply {
    sufficient: bool,
    #[serde(default)]
    reasons: Vec<String>,
}

pub struct ChatJudge {
    backend: Arc<dyn ChatBackend>,
    params: ChatParams,
}

impl ChatJudge {
    pub fn new(backend: Arc<dyn ChatBackend>, params: ChatParams) -> Self {
        Self { backend, params }
    }

    fn pool_digest(state: &DiscussionState, scripted: &RankedList) -> String {
        let mut lines = Vec::new();
        for (item, suggestions) in &state.pool {
            let rationale: Vec<String> = suggestions
                .iter()
                .map(|s| format!("{} ({:.2}): {}", s.proposer, s.confidence, s.rationale))
                .collect();
            let critiques: Vec<String> = state
                .critiques
                .iter()
                .filter(|c| &c.item_id == item)
                .map(|c| format!("{} {:?} r{}: {}", c.agent_id, c.stance, c.round, c.reason))
                .collect();
            lines.push(format!("- {item}: {} | {}", rationale.join("; "), critiques.join("; ")));
        }
        lines.push(format!("Rule-based draft: {}", scripted.item_ids().join(", ")));
        lines.join("\n")
    }

    /// Checks a model draft; entries must be unique pool items, at most K.
    fn validate(state: &DiscussionState, reply: DraftReply, list_size: usize) -> Result<RankedList, String> {
        if reply.entries.len() > list_size {
            return Err(format!("{} entries exceed K={list_size}", reply.entries.len()));
        }
        let mut seen = BTreeSet::new();
        let n = reply.entries.len();
        let mut entries = Vec::with_capacity(n);
        for (pos, e) in reply.entries.into_iter().enumerate() {
            if !state.pool.contains_key(&e.item_id) || state.history.contains(&e.item_id) {
                return Err(format!("{} is not an eligible pool item", e.item_id));
            }
            if !seen.insert(e.item_id.clone()) {
                return Err(format!("{} listed twice", e.item_id));
            }
            let rationales = state.pool[&e.item_id]
                .iter()
                .map(|s| crate::ranking::Rationale { agent_id: s.proposer.clone(), text: s.rationale.clone() })
                .collect();
            // the model's order wins; scores are rewritten to be strictly decreasing
            entries.push(RankedEntry { item_id: e.item_id, score: (n - pos) as f64, rationales });
        }
        Ok(RankedList { entries })
    }
}

impl Judge for ChatJudge {
    fn name(&self) -> &str {
        "chat"
    }

    fn draft(
        &self,
        state: &DiscussionState,
        scripted: RankedList,
        config: &OrchestratorConfig,
    ) -> Result<RankedList, ChatError> {
        let mut messages = vec![
            ChatMessage::system(format!(
                "You coordinate a recommendation discussion. Rank at most {} candidate items for the query. Answer with only JSON of the form {DRAFT_SCHEMA}.",
                config.list_size
            )),
            ChatMessage::user(format!("Query: {}\nCandidates:\n{}", state.query, Self::pool_digest(state, &scripted))),
        ];
        let mut last_error = String::new();
        for attempt in 0..2 {
            let reply: DraftReply = complete_structured(self.backend.as_ref(), messages.clone(), &self.params, DRAFT_SCHEMA)?;
            match Self::validate(state, reply, config.list_size) {
                Ok(list) => return Ok(list),
                Err(e) if attempt == 0 => {
                    messages.push(ChatMessage::user(format!(
                        "That list is invalid: {e}. Use only listed candidates, each once, at most {} entries.",
                        config.list_size
                    )));
                    last_error = e;
                }
                Err(e) => last_error = e,
            }
        }
        Err(ChatError::UnparseableTurn { excerpt: String::new(), error: last_error })
    }

    fn decide(&self, state: &DiscussionState, draft: &RankedList, scripted: Decision) -> Decision {
        let messages = vec![
            ChatMessage::system(format!(
                "Decide whether the draft is final: it needs enough clearly relevant items, rationales that back each item, and a clear order. Answer with only JSON of the form {DECISION_SCHEMA}."
            )),
            ChatMessage::user(format!(
                "Query: {}\nDraft: {}\nRule-based findings: {:?}",
                state.query,
                draft.item_ids().join(", "),
                scripted.reasons
            )),
        ];
        match complete_structured::<DecisionReply>(self.backend.as_ref(), messages, &self.params, DECISION_SCHEMA) {
            Ok(reply) => Decision {
                sufficient: reply.sufficient,
                reasons: if reply.sufficient {
                    Vec::new()
                } else {
                    reply.reasons.into_iter().map(|reason| Violation::Judge { reason }).collect()
                },
            },
            Err(e) => {
                tracing::warn!(error = %e, "judge answer unusable, treating draft as insufficient");
                Decision {
                    sufficient: false,
                    reasons: vec![Violation::Judge { reason: format!("unusable judge answer: {e}") }],
                }
            }
        }
    }
}
