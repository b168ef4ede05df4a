//! The orchestrator's scripted reasoning: drafting, the sufficiency test,
//! agent selection and instruction writing. All of it is a pure function of
//! the discussion state.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{DiscussionState, OrchestratorConfig};
use crate::agent::{AgentProfile, CandidateSuggestion, Directive, Evidence, Instruction, Role, Stance};
use crate::embedding::Vector;
use crate::ranking::{RankedEntry, RankedList, Rationale};
use crate::tools::Retrieval;

pub const SUPPORT_BONUS: f64 = 0.25;
pub const CONTEST_PENALTY: f64 = 0.5;

pub const GENERIC_GUIDANCE: &str = "Propose candidate items that fit the query and give a short rationale for each.";

/// A critique as it sits in the session record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueRecord {
    pub agent_id: String,
    pub round: usize,
    pub item_id: String,
    pub stance: Stance,
    pub reason: String,
}

/// `sum(confidence) + SUPPORT_BONUS * distinct supporters - CONTEST_PENALTY *
/// contests`, floored at 0. Supporters are proposers plus agents that
/// posted a support critique. Items in `exclude` are skipped.
pub fn score_pool(
    pool: &BTreeMap<String, Vec<CandidateSuggestion>>,
    critiques: &[CritiqueRecord],
    exclude: &BTreeSet<String>,
    list_size: usize,
) -> RankedList {
    let mut entries = Vec::new();
    for (item_id, suggestions) in pool {
        if exclude.contains(item_id) {
            continue;
        }
        let confidence: f64 = suggestions.iter().map(|s| s.confidence).sum();
        let mut supporters: BTreeSet<&str> = suggestions.iter().map(|s| s.proposer.as_str()).collect();
        let mut contests = 0usize;
        let mut rationales: Vec<Rationale> = suggestions
            .iter()
            .map(|s| Rationale { agent_id: s.proposer.clone(), text: s.rationale.clone() })
            .collect();
        for c in critiques.iter().filter(|c| &c.item_id == item_id) {
            match c.stance {
                Stance::Support => {
                    supporters.insert(c.agent_id.as_str());
                    rationales.push(Rationale { agent_id: c.agent_id.clone(), text: c.reason.clone() });
                }
                Stance::Contest => contests += 1,
            }
        }
        let score = (confidence + SUPPORT_BONUS * supporters.len() as f64 - CONTEST_PENALTY * contests as f64).max(0.0);
        entries.push(RankedEntry { item_id: item_id.clone(), score, rationales });
    }
    RankedList::from_entries(entries, list_size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// Condition (i): fewer than K entries.
    Shortfall { have: usize, need: usize },
    /// Condition (i): entries whose query relevance is under the floor.
    LowRelevance { items: Vec<String> },
    /// Condition (ii): entries without any supporting rationale.
    Unsupported { items: Vec<String> },
    /// Condition (ii): entries whose latest contest has no later support.
    UnresolvedContest { items: Vec<String> },
    /// Condition (iii): the draft is not strictly ordered.
    Unordered,
    /// A free-text reason from a chat judge.
    Judge { reason: String },
}

impl Violation {
    pub fn condition(&self) -> Option<u8> {
        match self {
            Self::Shortfall { .. } | Self::LowRelevance { .. } => Some(1),
            Self::Unsupported { .. } | Self::UnresolvedContest { .. } => Some(2),
            Self::Unordered => Some(3),
            Self::Judge { .. } => None,
        }
    }

    pub fn items(&self) -> &[String] {
        match self {
            Self::LowRelevance { items } | Self::Unsupported { items } | Self::UnresolvedContest { items } => items,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub sufficient: bool,
    pub reasons: Vec<Violation>,
}

impl Decision {
    pub fn violates(&self, condition: u8) -> bool {
        self.reasons.iter().any(|r| r.condition() == Some(condition))
    }

    pub fn low_relevance(&self) -> BTreeSet<String> {
        self.reasons
            .iter()
            .filter(|r| matches!(r, Violation::LowRelevance { .. }))
            .flat_map(|r| r.items().iter().cloned())
            .collect()
    }

    pub fn contested(&self) -> BTreeSet<String> {
        self.reasons
            .iter()
            .filter(|r| matches!(r, Violation::UnresolvedContest { .. }))
            .flat_map(|r| r.items().iter().cloned())
            .collect()
    }
}

/// Items whose most recent contest was not followed by support (a support
/// critique or a fresh suggestion) in a strictly later round.
pub fn unresolved_contests(
    pool: &BTreeMap<String, Vec<CandidateSuggestion>>,
    critiques: &[CritiqueRecord],
) -> BTreeSet<String> {
    let mut last_contest: BTreeMap<&str, usize> = BTreeMap::new();
    let mut last_support: BTreeMap<&str, usize> = BTreeMap::new();
    for c in critiques {
        let slot = match c.stance {
            Stance::Contest => &mut last_contest,
            Stance::Support => &mut last_support,
        };
        let r = slot.entry(c.item_id.as_str()).or_insert(c.round);
        *r = (*r).max(c.round);
    }
    for (item, suggestions) in pool {
        for s in suggestions {
            let r = last_support.entry(item.as_str()).or_insert(s.round);
            *r = (*r).max(s.round);
        }
    }
    last_contest
        .into_iter()
        .filter(|(item, contest)| last_support.get(item).is_none_or(|support| support <= contest))
        .map(|(item, _)| item.to_string())
        .collect()
}

/// The scripted three-condition check.
pub fn sufficiency_test(
    state: &DiscussionState,
    draft: &RankedList,
    config: &OrchestratorConfig,
    retrieval: &Retrieval,
    query: &Vector,
) -> Decision {
    let mut reasons = Vec::new();
    if draft.len() < config.list_size {
        reasons.push(Violation::Shortfall { have: draft.len(), need: config.list_size });
    }
    let low: Vec<String> = draft
        .entries
        .iter()
        .filter(|e| retrieval.relevance(query, &e.item_id) < config.tau)
        .map(|e| e.item_id.clone())
        .collect();
    if !low.is_empty() {
        reasons.push(Violation::LowRelevance { items: low });
    }
    let unsupported: Vec<String> = draft
        .entries
        .iter()
        .filter(|e| e.rationales.is_empty())
        .map(|e| e.item_id.clone())
        .collect();
    if !unsupported.is_empty() {
        reasons.push(Violation::Unsupported { items: unsupported });
    }
    let open = unresolved_contests(&state.pool, &state.critiques);
    let contested: Vec<String> = draft
        .entries
        .iter()
        .filter(|e| open.contains(&e.item_id))
        .map(|e| e.item_id.clone())
        .collect();
    if !contested.is_empty() {
        reasons.push(Violation::UnresolvedContest { items: contested });
    }
    let ordered = draft.entries.windows(2).all(|w| {
        crate::ranking::by_score_then_id(w[0].score, &w[0].item_id, w[1].score, &w[1].item_id).is_lt()
    });
    debug_assert!(ordered, "drafts are sorted on construction");
    if !ordered {
        reasons.push(Violation::Unordered);
    }
    Decision { sufficient: reasons.is_empty(), reasons }
}

fn best_of_role<'a>(agents: &'a [AgentProfile], role: Role, exhausted: &BTreeSet<String>) -> Option<&'a AgentProfile> {
    agents
        .iter()
        .filter(|a| a.role == role && !exhausted.contains(&a.agent_id))
        .min_by(|a, b| crate::ranking::by_score_then_id(a.score(), &a.agent_id, b.score(), &b.agent_id))
}

/// Agents to hear from next round, sorted by id.
pub fn select_active_agents(state: &DiscussionState, decision: &Decision, config: &OrchestratorConfig) -> Vec<String> {
    let all: BTreeSet<String> = state.agents.iter().map(|a| a.agent_id.clone()).collect();
    if config.disable_dar {
        return all.into_iter().collect();
    }
    let named: BTreeSet<&str> = decision.reasons.iter().flat_map(|r| r.items()).map(String::as_str).collect();
    let mut chosen: BTreeSet<String> = BTreeSet::new();
    for item in &named {
        if let Some(suggestions) = state.pool.get(*item) {
            chosen.extend(suggestions.iter().map(|s| s.proposer.clone()));
        }
        chosen.extend(
            state
                .critiques
                .iter()
                .filter(|c| c.item_id == *item && c.stance == Stance::Contest)
                .map(|c| c.agent_id.clone()),
        );
    }
    if decision.violates(1) {
        for role in [Role::UserAgent, Role::ItemAgent] {
            if let Some(best) = best_of_role(&state.agents, role, &state.exhausted) {
                chosen.insert(best.agent_id.clone());
            }
        }
    }
    chosen.retain(|id| all.contains(id));
    if chosen.is_empty() {
        chosen = all.iter().filter(|id| !state.exhausted.contains(*id)).cloned().collect();
    }
    if chosen.is_empty() {
        chosen = all;
    }
    chosen.into_iter().collect()
}

fn describe(profile: &AgentProfile) -> String {
    match &profile.evidence {
        Evidence::User { similarity, .. } => format!(
            "you speak for neighbor {} (similarity {:.3}, tastes: {})",
            profile.subject_id,
            similarity,
            profile.top_category_names().join(", ")
        ),
        Evidence::Item { title, relevance, .. } => format!(
            "you speak for anchor item {} \"{}\" (query relevance {:.3})",
            profile.subject_id, title, relevance
        ),
        Evidence::Orchestrator => "you coordinate the discussion".to_string(),
    }
}

fn ids(items: &[String]) -> String {
    if items.is_empty() {
        "none".into()
    } else {
        items.join(", ")
    }
}

/// One instruction per active agent. `decision` is the latest sufficiency
/// result, absent in round 0.
pub fn make_instructions(
    state: &DiscussionState,
    active: &[String],
    decision: Option<&Decision>,
    config: &OrchestratorConfig,
) -> Vec<Instruction> {
    let round = state.round;
    let profiles: BTreeMap<&str, &AgentProfile> = state.agents.iter().map(|a| (a.agent_id.as_str(), a)).collect();
    let draft_ids = state.draft.item_ids();
    let open_contests = decision.map(Decision::contested).unwrap_or_default();
    let low = decision.map(Decision::low_relevance).unwrap_or_default();
    let shortfall = decision.is_some_and(|d| d.reasons.iter().any(|r| matches!(r, Violation::Shortfall { .. })));

    active
        .iter()
        .filter_map(|agent_id| {
            let profile = profiles.get(agent_id.as_str())?;
            if config.disable_pci {
                return Some(Instruction {
                    agent_id: agent_id.clone(),
                    round,
                    directive: Directive::Propose,
                    focus_items: Vec::new(),
                    guidance_text: GENERIC_GUIDANCE.to_string(),
                });
            }
            let who = describe(profile);
            let Some(_) = decision else {
                return Some(Instruction {
                    agent_id: agent_id.clone(),
                    round,
                    directive: Directive::Propose,
                    focus_items: Vec::new(),
                    guidance_text: format!(
                        "{}: {who}. Propose items for \"{}\" that this perspective supports.",
                        profile.agent_id, state.query
                    ),
                });
            };
            let involved = |item: &String| {
                state.pool.get(item).is_some_and(|s| s.iter().any(|s| &s.proposer == agent_id))
                    || state.critiques.iter().any(|c| &c.item_id == item && &c.agent_id == agent_id)
            };
            let conflicts: Vec<String> = open_contests.iter().filter(|i| involved(i)).cloned().collect();
            let own_low: Vec<String> = low.iter().filter(|i| involved(i)).cloned().collect();
            let (directive, focus, task) = if !conflicts.is_empty() {
                (Directive::ResolveConflict, conflicts, "Settle the disputed items: support or contest each with evidence.")
            } else if !low.is_empty() {
                let focus = if own_low.is_empty() { low.iter().cloned().collect() } else { own_low };
                (Directive::ReplaceLowRelevance, focus, "These items look weakly related to the query; replace them with better-fitting ones.")
            } else if shortfall {
                (Directive::Propose, Vec::new(), "The list is short; propose additional relevant items.")
            } else {
                (Directive::Refine, draft_ids.clone(), "Review the draft and back the items your evidence supports.")
            };
            Some(Instruction {
                agent_id: agent_id.clone(),
                round,
                directive,
                guidance_text: format!(
                    "{}: {who}. {task} Draft: {}. Focus: {}.",
                    profile.agent_id,
                    ids(&draft_ids),
                    ids(&focus)
                ),
                focus_items: focus,
            })
        })
        .collect()
}

/// Renders the discussion so far for chat agents, dropping the oldest lines
/// first. Round-0 instructions and the latest draft are always kept.
pub fn transcript_digest(state: &DiscussionState, budget: usize) -> String {
    use super::transcript::EventPayload as P;
    let mut lines: Vec<(bool, String)> = Vec::new();
    let last_draft = state.events.iter().rposition(|e| matches!(e.payload, P::DraftList(_)));
    for (idx, e) in state.events.iter().enumerate() {
        let (keep, line) = match &e.payload {
            P::Instruction(i) => (
                e.round == 0,
                format!("[r{}] instruction to {}: {:?} {}", e.round, i.agent_id, i.directive, i.guidance_text),
            ),
            P::AgentTurn(t) => {
                let sug: Vec<&str> = t.suggestions.iter().map(|s| s.item_id.as_str()).collect();
                let crit: Vec<String> = t.critiques.iter().map(|c| format!("{:?} {}", c.stance, c.item_id)).collect();
                (
                    false,
                    format!("[r{}] {}: {} | suggests {} | {}", e.round, t.agent_id, t.message, sug.join(","), crit.join(",")),
                )
            }
            P::DraftList(d) => (Some(idx) == last_draft, format!("[r{}] draft: {}", e.round, d.item_ids().join(","))),
            P::Decision(d) => (false, format!("[r{}] decision: sufficient={} {:?}", e.round, d.sufficient, d.reasons)),
            _ => continue,
        };
        lines.push((keep, line));
    }
    let mut used: usize = lines.iter().filter(|(k, _)| *k).map(|(_, l)| l.chars().count() + 1).sum();
    let mut include = vec![false; lines.len()];
    for (i, (keep, line)) in lines.iter().enumerate().rev() {
        if *keep {
            include[i] = true;
            continue;
        }
        let cost = line.chars().count() + 1;
        if used + cost <= budget {
            used += cost;
            include[i] = true;
        }
    }
    lines
        .into_iter()
        .zip(include)
        .filter(|(_, inc)| *inc)
        .map(|((_, l), _)| l)
        .collect::<Vec<_>>()
        .join("\n")
}
