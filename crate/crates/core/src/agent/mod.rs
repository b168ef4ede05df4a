//! Agents: profiles, the turn contract, and the policies that produce turns.
//!
//! A policy never touches the catalog or the session state directly. It gets
//! a [`TurnContext`] snapshot and an [`AgentTools`] handle with a call
//! budget; [`agent_step`] then validates whatever the policy produced, so a
//! turn can only ever mention catalog items.

pub mod chat;
mod profile;
mod scripted;

pub use profile::{
    build_item_agent_profile, build_user_agent_profile, item_agent_id, top_categories, user_agent_id, AgentProfile,
    CategoryCount, Evidence, Role, ORCHESTRATOR_ID, PROFILE_BUDGET,
};
pub use scripted::{pseudo_query, ScriptedPolicy};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranking::{sort_scored, RankedList, ScoredItem};
use crate::tools::{ToolCall, ToolError, ToolRequest, ToolResponse, ToolSet};

pub const MAX_SUGGESTIONS: usize = 10;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AgentError {
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("user {0} has an empty history")]
    EmptyHistory(String),
    #[error("item {item_id} is not in the history of {user_id}")]
    ItemNotInHistory { item_id: String, user_id: String },
    #[error("instruction for {instruction} given to {agent}")]
    InstructionMismatch { instruction: String, agent: String },
    #[error("policy failure: {0}")]
    PolicyFailure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directive {
    Propose,
    Refine,
    ResolveConflict,
    ReplaceLowRelevance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub agent_id: String,
    pub round: usize,
    pub directive: Directive,
    #[serde(default)]
    pub focus_items: Vec<String>,
    pub guidance_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stance {
    Support,
    Contest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critique {
    pub item_id: String,
    pub stance: Stance,
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSuggestion {
    pub item_id: String,
    pub rationale: String,
    pub confidence: f64,
    pub proposer: String,
    pub round: usize,
}

/// A suggestion as a policy emits it, before attribution and validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireSuggestion {
    pub item_id: String,
    #[serde(default)]
    pub rationale: String,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
}

fn default_confidence() -> f64 {
    0.5
}

/// The agent-turn wire format. Unknown fields are ignored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnPayload {
    #[serde(default)]
    pub message: String,
    #[serde(default)]
    pub suggestions: Vec<WireSuggestion>,
    #[serde(default)]
    pub critiques: Vec<Critique>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTurn {
    pub agent_id: String,
    pub round: usize,
    pub message: String,
    pub suggestions: Vec<CandidateSuggestion>,
    pub critiques: Vec<Critique>,
    pub tool_calls_made: usize,
    #[serde(default)]
    pub tool_calls_refused: usize,
    /// Suggestions removed for naming unknown or already-owned items, or for
    /// exceeding the per-turn cap.
    #[serde(default)]
    pub dropped_suggestions: usize,
    #[serde(default)]
    pub dropped_critiques: usize,
    /// Retrieval results the agent saw this turn.
    #[serde(default)]
    pub evidence: Vec<ScoredItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AgentTurn {
    /// Placeholder recorded when an agent's turn fails.
    pub fn failed(agent_id: &str, round: usize, error: &AgentError, tool_calls_made: usize) -> Self {
        Self {
            agent_id: agent_id.to_string(),
            round,
            message: String::new(),
            suggestions: Vec::new(),
            critiques: Vec::new(),
            tool_calls_made,
            tool_calls_refused: 0,
            dropped_suggestions: 0,
            dropped_critiques: 0,
            evidence: Vec::new(),
            error: Some(error.to_string()),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.error.is_some()
    }
}

/// What an agent sees of the discussion when it takes its turn.
#[derive(Debug, Clone, Default)]
pub struct TurnContext {
    pub round: usize,
    pub target_user: String,
    pub query: String,
    pub tau: f64,
    /// Retrieval depth for tool calls.
    pub k: usize,
    /// The target user's history; never suggested.
    pub exclude: BTreeSet<String>,
    /// Pool keys and current draft ids; critiques must name one of these.
    pub candidates: BTreeSet<String>,
    pub draft: RankedList,
    /// Draft entries flagged below the relevance floor by the last decision.
    pub low_relevance: BTreeSet<String>,
    /// Everything this agent retrieved in earlier rounds, best first.
    pub own_evidence: Vec<ScoredItem>,
    pub own_suggested: BTreeSet<String>,
    /// Rendered, budget-truncated discussion history.
    pub transcript_digest: String,
}

/// Tool access for one agent turn. Calls past the budget are refused, not
/// errors.
pub struct AgentTools<'a> {
    tools: &'a ToolSet,
    caller: String,
    round: usize,
    budget: usize,
    made: usize,
    refused: usize,
    log: Vec<ToolCall>,
}

impl<'a> AgentTools<'a> {
    pub fn new(tools: &'a ToolSet, caller: &str, round: usize, budget: usize) -> Self {
        Self {
            tools,
            caller: caller.to_string(),
            round,
            budget,
            made: 0,
            refused: 0,
            log: Vec::new(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.made
    }

    pub fn made(&self) -> usize {
        self.made
    }

    pub fn refused(&self) -> usize {
        self.refused
    }

    pub fn toolset(&self) -> &ToolSet {
        self.tools
    }

    /// `None` when the budget is spent.
    pub fn call(&mut self, request: ToolRequest) -> Option<Result<ToolResponse, ToolError>> {
        if self.remaining() == 0 {
            self.refused += 1;
            return None;
        }
        self.made += 1;
        let (result, record) = self.tools.execute(&request.clamped(), &self.caller, self.round);
        self.log.push(record);
        Some(result)
    }

    pub fn into_log(self) -> Vec<ToolCall> {
        self.log
    }
}

/// A policy's raw output: the wire payload plus what it retrieved.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyOutput {
    pub payload: TurnPayload,
    pub evidence: Vec<ScoredItem>,
}

pub trait AgentPolicy: Send + Sync {
    fn name(&self) -> &str;

    fn step(
        &self,
        profile: &AgentProfile,
        instruction: &Instruction,
        ctx: &TurnContext,
        tools: &mut AgentTools<'_>,
    ) -> Result<PolicyOutput, AgentError>;
}

/// Runs one agent turn and validates it. The tool calls it made are
/// returned whether or not the turn succeeded.
pub fn agent_step(
    profile: &AgentProfile,
    instruction: &Instruction,
    ctx: &TurnContext,
    tools: &ToolSet,
    policy: &dyn AgentPolicy,
    max_tool_calls: usize,
) -> (Result<AgentTurn, AgentError>, Vec<ToolCall>) {
    if instruction.agent_id != profile.agent_id {
        let err = AgentError::InstructionMismatch {
            instruction: instruction.agent_id.clone(),
            agent: profile.agent_id.clone(),
        };
        return (Err(err), Vec::new());
    }
    let mut handle = AgentTools::new(tools, &profile.agent_id, instruction.round, max_tool_calls);
    let output = policy.step(profile, instruction, ctx, &mut handle);
    let made = handle.made();
    let refused = handle.refused();
    let log = handle.into_log();
    let output = match output {
        Ok(o) => o,
        Err(e) => return (Err(e), log),
    };
    let turn = validate_turn(output, &profile.agent_id, instruction.round, ctx, tools, made, refused);
    (Ok(turn), log)
}

fn validate_turn(
    output: PolicyOutput,
    agent_id: &str,
    round: usize,
    ctx: &TurnContext,
    tools: &ToolSet,
    made: usize,
    refused: usize,
) -> AgentTurn {
    let catalog = tools.retrieval().catalog();
    let PolicyOutput { payload, evidence } = output;

    let mut dropped_suggestions = 0;
    let mut seen = BTreeSet::new();
    let mut suggestions = Vec::new();
    for s in payload.suggestions {
        let valid = catalog.contains_item(&s.item_id) && !ctx.exclude.contains(&s.item_id);
        if !valid || !seen.insert(s.item_id.clone()) || suggestions.len() == MAX_SUGGESTIONS {
            dropped_suggestions += 1;
            continue;
        }
        let confidence = if s.confidence.is_finite() { s.confidence.clamp(0.0, 1.0) } else { 0.0 };
        suggestions.push(CandidateSuggestion {
            item_id: s.item_id,
            rationale: s.rationale,
            confidence,
            proposer: agent_id.to_string(),
            round,
        });
    }

    let mut dropped_critiques = 0;
    let mut seen = BTreeSet::new();
    let mut critiques = Vec::new();
    for c in payload.critiques {
        if !ctx.candidates.contains(&c.item_id) || !catalog.contains_item(&c.item_id) || !seen.insert((c.item_id.clone(), c.stance)) {
            dropped_critiques += 1;
            continue;
        }
        critiques.push(c);
    }

    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for e in evidence {
        if catalog.contains_item(&e.item_id) {
            let slot = best.entry(e.item_id).or_insert(f64::NEG_INFINITY);
            *slot = slot.max(e.score);
        }
    }
    let mut evidence: Vec<ScoredItem> = best.into_iter().map(|(id, s)| ScoredItem::new(id, s)).collect();
    sort_scored(&mut evidence);

    let mut message = payload.message;
    if refused > 0 {
        message.push_str(&format!(" [{refused} tool call(s) refused: budget exhausted]"));
    }
    if dropped_suggestions + dropped_critiques > 0 {
        tracing::debug!(agent_id, dropped_suggestions, dropped_critiques, "dropped invalid turn content");
    }
    AgentTurn {
        agent_id: agent_id.to_string(),
        round,
        message,
        suggestions,
        critiques,
        tool_calls_made: made,
        tool_calls_refused: refused,
        dropped_suggestions,
        dropped_critiques,
        evidence,
        error: None,
    }
}
