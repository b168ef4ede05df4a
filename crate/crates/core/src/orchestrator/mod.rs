//! The discussion loop.
//!
//! Round 0 recruits agents and collects proposals. Each later round drafts a
//! list from the pool, tests it, and either stops or picks agents and
//! instructions for another pass. The loop stops at `T_max` at the latest.

mod draft;
mod judge;
pub mod transcript;

pub use draft::{
    make_instructions, score_pool, select_active_agents, sufficiency_test, transcript_digest, unresolved_contests,
    CritiqueRecord, Decision, Violation, CONTEST_PENALTY, GENERIC_GUIDANCE, SUPPORT_BONUS,
};
pub use judge::{ChatJudge, Judge, ScriptedJudge};
pub use transcript::{EventPayload, EventSink, JsonlSink, NullSink, SessionEvent, SinkError, Tee};

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::chat::ChatError;
use crate::agent::{
    agent_step, build_item_agent_profile, build_user_agent_profile, AgentError, AgentPolicy, AgentProfile, AgentTurn,
    CandidateSuggestion, Role, ScriptedPolicy, TurnContext, ORCHESTRATOR_ID,
};
use crate::embedding::cosine;
use crate::ranking::{by_score_then_id, RankedList, ScoredItem};
use crate::tools::{ToolError, ToolSet, MAX_BOUND};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    UserOnly,
    ItemOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::UserOnly => "user_only",
            Mode::ItemOnly => "item_only",
        }
    }

    fn allows(self, role: Role) -> bool {
        match self {
            Mode::Full => true,
            Mode::UserOnly => role == Role::UserAgent,
            Mode::ItemOnly => role == Role::ItemAgent,
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(Mode::Full),
            "user_only" | "user" => Ok(Mode::UserOnly),
            "item_only" | "item" => Ok(Mode::ItemOnly),
            other => Err(format!("unknown mode {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrchestratorConfig {
    /// Neighbors and anchors considered at recruitment.
    pub n: usize,
    /// Retrieval depth for agent tool calls.
    pub k: usize,
    #[serde(rename = "K")]
    pub list_size: usize,
    #[serde(rename = "T_max")]
    pub t_max: usize,
    /// Relevance floor for recruitment and the sufficiency test.
    pub tau: f64,
    pub disable_pci: bool,
    pub disable_dar: bool,
    pub disable_atu: bool,
    pub mode: Mode,
    /// Per agent, over the whole session.
    pub max_tool_calls: usize,
    /// Characters of discussion history shown to chat agents.
    pub transcript_budget: usize,
    /// Most recent events of a neighbor used for its profile.
    pub history_window: Option<usize>,
    pub seed: u64,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            n: 5,
            k: 15,
            list_size: 10,
            t_max: 5,
            tau: 0.35,
            disable_pci: false,
            disable_dar: false,
            disable_atu: false,
            mode: Mode::Full,
            max_tool_calls: 8,
            transcript_budget: 6000,
            history_window: None,
            seed: 0,
        }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        let bad = |m: &str| Err(SessionError::Config(m.to_string()));
        if self.n == 0 || self.k == 0 {
            return bad("n and k must be positive");
        }
        if self.list_size == 0 || self.list_size > MAX_BOUND {
            return bad("K must be in 1..=100");
        }
        if self.t_max == 0 {
            return bad("T_max must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        Ok(())
    }

    /// Session-wide tool-call cap for one agent.
    pub fn tool_cap(&self) -> usize {
        if self.disable_atu {
            1
        } else {
            self.max_tool_calls
        }
    }

    /// Applies a named ablation (`no-pci`, `no-dar`, `no-atu`).
    pub fn apply_ablation(&mut self, name: &str) -> Result<(), SessionError> {
        match name.to_ascii_lowercase().replace('_', "-").as_str() {
            "no-pci" | "pci" => self.disable_pci = true,
            "no-dar" | "dar" => self.disable_dar = true,
            "no-atu" | "atu" => self.disable_atu = true,
            "none" => {}
            other => return Err(SessionError::Config(format!("unknown ablation {other}"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Sufficient,
    RoundLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Termination {
    pub reason: TerminationReason,
    pub round: usize,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SessionError {
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("user {0} has an empty history")]
    EmptyHistory(String),
    #[error("query is empty")]
    EmptyText,
    #[error("no agents could be recruited")]
    NoAgents,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("every agent failed in round {round}: {errors:?}")]
    SessionFailure { round: usize, errors: Vec<String> },
    #[error("drafting failed: {0}")]
    Judge(ChatError),
    #[error(transparent)]
    Sink(#[from] SinkError),
    #[error("tool failure: {0}")]
    Tool(ToolError),
    #[error(transparent)]
    Agent(AgentError),
}

impl SessionError {
    /// Short machine-readable name used in error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            SessionError::UnknownUser(_) => "UnknownUser",
            SessionError::EmptyHistory(_) => "EmptyHistory",
            SessionError::EmptyText => "EmptyText",
            SessionError::NoAgents => "NoAgents",
            SessionError::Config(_) => "InvalidConfig",
            SessionError::SessionFailure { .. } => "SessionFailure",
            SessionError::Judge(_) => "UnparseableTurn",
            SessionError::Sink(_) => "StreamClosed",
            SessionError::Tool(_) => "ToolFailure",
            SessionError::Agent(_) => "AgentFailure",
        }
    }
}

impl From<ToolError> for SessionError {
    fn from(e: ToolError) -> Self {
        match e {
            ToolError::UnknownUser(u) => SessionError::UnknownUser(u),
            ToolError::EmptyHistory(u) => SessionError::EmptyHistory(u),
            ToolError::EmptyText => SessionError::EmptyText,
            other => SessionError::Tool(other),
        }
    }
}

impl From<AgentError> for SessionError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::UnknownUser(u) => SessionError::UnknownUser(u),
            AgentError::EmptyHistory(u) => SessionError::EmptyHistory(u),
            other => SessionError::Agent(other),
        }
    }
}

/// Everything one session knows. Mutated only between agent phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscussionState {
    pub session_id: String,
    pub target_user: String,
    pub query: String,
    pub round: usize,
    pub agents: Vec<AgentProfile>,
    pub active: Vec<String>,
    /// Active set per round, index = round.
    pub active_history: Vec<Vec<String>>,
    /// Append-only.
    pub pool: BTreeMap<String, Vec<CandidateSuggestion>>,
    pub critiques: Vec<CritiqueRecord>,
    pub draft: RankedList,
    pub history: BTreeSet<String>,
    pub tool_calls: BTreeMap<String, usize>,
    pub exhausted: BTreeSet<String>,
    pub termination: Option<Termination>,
    pub events: Vec<SessionEvent>,
}

impl DiscussionState {
    pub fn new(session_id: &str, target_user: &str, query: &str, history: BTreeSet<String>) -> Self {
        Self {
            session_id: session_id.to_string(),
            target_user: target_user.to_string(),
            query: query.to_string(),
            round: 0,
            agents: Vec::new(),
            active: Vec::new(),
            active_history: Vec::new(),
            pool: BTreeMap::new(),
            critiques: Vec::new(),
            draft: RankedList::default(),
            history,
            tool_calls: BTreeMap::new(),
            exhausted: BTreeSet::new(),
            termination: None,
            events: Vec::new(),
        }
    }

    pub fn turns(&self) -> impl Iterator<Item = &AgentTurn> {
        self.events.iter().filter_map(|e| match &e.payload {
            EventPayload::AgentTurn(t) => Some(t),
            _ => None,
        })
    }

    pub fn instructions(&self) -> impl Iterator<Item = &crate::agent::Instruction> {
        self.events.iter().filter_map(|e| match &e.payload {
            EventPayload::Instruction(i) => Some(i),
            _ => None,
        })
    }

    pub fn rounds_used(&self) -> usize {
        self.termination.as_ref().map(|t| t.round).unwrap_or(self.round)
    }

    fn candidates(&self) -> BTreeSet<String> {
        self.pool.keys().cloned().chain(self.draft.item_ids()).collect()
    }

    fn own_evidence(&self, agent_id: &str) -> Vec<ScoredItem> {
        let mut best: BTreeMap<&str, f64> = BTreeMap::new();
        for t in self.turns().filter(|t| t.agent_id == agent_id) {
            for e in &t.evidence {
                let slot = best.entry(e.item_id.as_str()).or_insert(f64::NEG_INFINITY);
                *slot = slot.max(e.score);
            }
        }
        let mut out: Vec<ScoredItem> = best.into_iter().map(|(id, s)| ScoredItem::new(id, s)).collect();
        crate::ranking::sort_scored(&mut out);
        out
    }

    fn own_suggested(&self, agent_id: &str) -> BTreeSet<String> {
        self.pool
            .iter()
            .filter(|(_, s)| s.iter().any(|s| s.proposer == agent_id))
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Stable id for a session: the same user, query and seed give the same id.
pub fn deterministic_session_id(target_user: &str, query: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(target_user.as_bytes());
    h.update([0]);
    h.update(query.as_bytes());
    h.update([0]);
    h.update(seed.to_le_bytes());
    let digest = h.finalize();
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("s-{hex}")
}

/// Recruited agents, in recruitment order: neighbors by similarity, then
/// anchors by relevance.
pub fn recruit_agents(config: &OrchestratorConfig, tools: &ToolSet, target_user: &str, query: &str) -> Result<Vec<AgentProfile>, SessionError> {
    let retrieval = tools.retrieval().clone();
    let catalog = retrieval.catalog();
    let history = catalog
        .get_history(target_user)
        .map_err(|_| SessionError::UnknownUser(target_user.to_string()))?;
    if history.is_empty() {
        return Err(SessionError::EmptyHistory(target_user.to_string()));
    }
    let q = retrieval.embed_query(query)?;

    // (role, id, profile score, query relevance)
    let mut candidates: Vec<(Role, String, f64, f64)> = Vec::new();
    if config.mode.allows(Role::UserAgent) {
        let neighbors = tools.get_similar_users(ORCHESTRATOR_ID, 0, target_user, config.n)?;
        for nb in neighbors.neighbors {
            let relevance = retrieval
                .user_vector(&nb.user_id)
                .and_then(|v| cosine(v, &q).ok())
                .unwrap_or(0.0);
            candidates.push((Role::UserAgent, nb.user_id, nb.score, relevance));
        }
    }
    if config.mode.allows(Role::ItemAgent) {
        let anchors = tools.get_relevant_items(ORCHESTRATOR_ID, 0, target_user, query, config.n)?;
        for a in anchors.items {
            candidates.push((Role::ItemAgent, a.item_id, a.score, a.score));
        }
    }
    if candidates.is_empty() {
        return Err(SessionError::NoAgents);
    }
    let survivors: Vec<&(Role, String, f64, f64)> = if config.disable_dar {
        candidates.iter().collect()
    } else {
        let above: Vec<_> = candidates.iter().filter(|c| c.3 >= config.tau).collect();
        if above.is_empty() {
            let best = candidates
                .iter()
                .min_by(|a, b| by_score_then_id(a.3, &agent_key(a.0, &a.1), b.3, &agent_key(b.0, &b.1)))
                .expect("non-empty");
            vec![best]
        } else {
            above
        }
    };
    survivors
        .into_iter()
        .map(|(role, id, score, _)| match role {
            Role::UserAgent => build_user_agent_profile(catalog, id, *score, target_user, config.history_window),
            _ => build_item_agent_profile(catalog, id, *score, target_user, query),
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(SessionError::from)
}

fn agent_key(role: Role, id: &str) -> String {
    match role {
        Role::UserAgent => crate::agent::user_agent_id(id),
        _ => crate::agent::item_agent_id(id),
    }
}

/// Result of a finished session.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub final_list: RankedList,
    pub state: DiscussionState,
}

/// Runs discussions with a fixed policy and judge.
#[derive(Clone)]
pub struct Orchestrator {
    pub config: OrchestratorConfig,
    policy: Arc<dyn AgentPolicy>,
    judge: Arc<dyn Judge>,
}

impl Orchestrator {
    pub fn new(config: OrchestratorConfig, policy: Arc<dyn AgentPolicy>, judge: Arc<dyn Judge>) -> Self {
        Self { config, policy, judge }
    }

    pub fn scripted(config: OrchestratorConfig) -> Self {
        Self::new(config, Arc::new(ScriptedPolicy), Arc::new(ScriptedJudge))
    }

    pub fn policy_name(&self) -> &str {
        self.policy.name()
    }

    /// Runs one session. Errors before the first event (unknown user, empty
    /// query, no agents) leave the sink untouched.
    pub fn run(
        &self,
        tools: &ToolSet,
        target_user: &str,
        query: &str,
        session_id: Option<&str>,
        sink: &mut dyn EventSink,
    ) -> Result<Outcome, SessionError> {
        let config = &self.config;
        config.validate()?;
        let retrieval = tools.retrieval().clone();
        let history = retrieval
            .catalog()
            .get_history(target_user)
            .map_err(|_| SessionError::UnknownUser(target_user.to_string()))?
            .item_set();
        let query_vec = retrieval.embed_query(query)?;
        let agents = recruit_agents(config, tools, target_user, query)?;

        let session_id = session_id
            .map(str::to_string)
            .unwrap_or_else(|| deterministic_session_id(target_user, query, config.seed));
        let mut run = Run {
            state: DiscussionState::new(&session_id, target_user, query, history),
            sink,
            seq: 0,
        };
        run.state.agents = agents;
        run.emit(EventPayload::SessionStarted {
            target_user: target_user.to_string(),
            query: query.to_string(),
            policy: self.policy.name().to_string(),
            config: config.clone(),
            agents: run.state.agents.clone(),
        })?;

        let mut active: Vec<String> = run.state.agents.iter().map(|a| a.agent_id.clone()).collect();
        active.sort();
        self.round(&mut run, tools, active, None)?;

        for t in 1..=config.t_max {
            run.state.round = t;
            let scripted = score_pool(&run.state.pool, &run.state.critiques, &run.state.history, config.list_size);
            let draft = match self.judge.draft(&run.state, scripted, config) {
                Ok(d) => d,
                Err(e) => return Err(run.fail(SessionError::Judge(e))),
            };
            run.state.draft = draft.clone();
            run.emit(EventPayload::DraftList(draft.clone()))?;
            let scripted = sufficiency_test(&run.state, &draft, config, &retrieval, &query_vec);
            let decision = self.judge.decide(&run.state, &draft, scripted);
            run.emit(EventPayload::Decision(decision.clone()))?;
            if decision.sufficient || t == config.t_max {
                let reason = if decision.sufficient { TerminationReason::Sufficient } else { TerminationReason::RoundLimit };
                run.state.termination = Some(Termination { reason, round: t });
                run.emit(EventPayload::FinalList { entries: draft.entries.clone(), reason, rounds_used: t })?;
                return Ok(Outcome { final_list: draft, state: run.state });
            }
            let active = select_active_agents(&run.state, &decision, config);
            self.round(&mut run, tools, active, Some(&decision))?;
        }
        unreachable!("the loop returns at t == T_max")
    }

    fn round(
        &self,
        run: &mut Run<'_>,
        tools: &ToolSet,
        active: Vec<String>,
        decision: Option<&Decision>,
    ) -> Result<(), SessionError> {
        let config = &self.config;
        let round = run.state.round;
        run.state.active = active.clone();
        run.state.active_history.push(active.clone());
        run.emit(EventPayload::RoundStarted { active: active.clone() })?;
        let instructions = make_instructions(&run.state, &active, decision, config);
        for ins in &instructions {
            run.emit(EventPayload::Instruction(ins.clone()))?;
        }

        let low = decision.map(Decision::low_relevance).unwrap_or_default();
        let digest = transcript_digest(&run.state, config.transcript_budget);
        let candidates = run.state.candidates();
        let profiles: BTreeMap<&str, &AgentProfile> = run.state.agents.iter().map(|a| (a.agent_id.as_str(), a)).collect();
        let jobs: Vec<(&AgentProfile, &crate::agent::Instruction, TurnContext, usize)> = instructions
            .iter()
            .filter_map(|ins| {
                let profile = *profiles.get(ins.agent_id.as_str())?;
                let used = run.state.tool_calls.get(&ins.agent_id).copied().unwrap_or(0);
                let ctx = TurnContext {
                    round,
                    target_user: run.state.target_user.clone(),
                    query: run.state.query.clone(),
                    tau: config.tau,
                    k: config.k,
                    exclude: run.state.history.clone(),
                    candidates: candidates.clone(),
                    draft: run.state.draft.clone(),
                    low_relevance: low.clone(),
                    own_evidence: run.state.own_evidence(&ins.agent_id),
                    own_suggested: run.state.own_suggested(&ins.agent_id),
                    transcript_digest: digest.clone(),
                };
                Some((profile, ins, ctx, config.tool_cap().saturating_sub(used)))
            })
            .collect();

        let policy = self.policy.as_ref();
        let results: Vec<_> = jobs
            .par_iter()
            .map(|(profile, ins, ctx, budget)| {
                let (turn, log) = agent_step(profile, ins, ctx, tools, policy, *budget);
                (ins.directive, turn, log)
            })
            .collect();

        // instructions are in agent-id order, so this merge is too
        let mut errors = Vec::new();
        let mut turns = Vec::new();
        for ((directive, result, log), ins) in results.into_iter().zip(&instructions) {
            let made = log.len();
            tools.record(log);
            *run.state.tool_calls.entry(ins.agent_id.clone()).or_default() += made;
            let turn = match result {
                Ok(turn) => turn,
                Err(e) => {
                    tracing::warn!(agent = %ins.agent_id, round, error = %e, "agent turn failed");
                    errors.push(format!("{}: {e}", ins.agent_id));
                    AgentTurn::failed(&ins.agent_id, round, &e, made)
                }
            };
            if !turn.is_failed() {
                let fresh = turn
                    .suggestions
                    .iter()
                    .filter(|s| !run.state.pool.get(&s.item_id).is_some_and(|v| v.iter().any(|p| p.proposer == s.proposer)))
                    .count();
                let seeks_new = matches!(
                    directive,
                    crate::agent::Directive::Propose | crate::agent::Directive::ReplaceLowRelevance
                );
                if seeks_new && fresh == 0 {
                    run.state.exhausted.insert(ins.agent_id.clone());
                }
                for s in &turn.suggestions {
                    run.state.pool.entry(s.item_id.clone()).or_default().push(s.clone());
                }
                for c in &turn.critiques {
                    run.state.critiques.push(CritiqueRecord {
                        agent_id: turn.agent_id.clone(),
                        round,
                        item_id: c.item_id.clone(),
                        stance: c.stance,
                        reason: c.reason.clone(),
                    });
                }
            }
            turns.push(turn);
        }
        let all_failed = !turns.is_empty() && turns.iter().all(AgentTurn::is_failed);
        for turn in turns {
            run.emit(EventPayload::AgentTurn(turn))?;
        }
        if all_failed {
            return Err(run.fail(SessionError::SessionFailure { round, errors }));
        }
        Ok(())
    }
}

struct Run<'a> {
    state: DiscussionState,
    sink: &'a mut dyn EventSink,
    seq: u64,
}

impl Run<'_> {
    fn emit(&mut self, payload: EventPayload) -> Result<(), SessionError> {
        let event = SessionEvent {
            session_id: self.state.session_id.clone(),
            seq: self.seq,
            round: self.state.round,
            payload,
        };
        self.seq += 1;
        self.sink.emit(&event)?;
        self.state.events.push(event);
        Ok(())
    }

    /// Emits `session_failed` (best effort) and hands the error back.
    fn fail(&mut self, error: SessionError) -> SessionError {
        let _ = self.emit(EventPayload::SessionFailed { error: error.to_string() });
        error
    }
}

/// Scripted session with a throwaway sink.
pub fn run_discussion(
    config: &OrchestratorConfig,
    tools: &ToolSet,
    target_user: &str,
    query: &str,
) -> Result<Outcome, SessionError> {
    Orchestrator::scripted(config.clone()).run(tools, target_user, query, None, &mut NullSink)
}
