//! Deterministic stand-in for an LLM agent.
//!
//! User agents retrieve with a pseudo-query built from the query and the
//! neighbor's favourite categories. Item agents expand around their anchor
//! when it is relevant to the query and fall back to plain query retrieval
//! otherwise. Confidence is the retrieval score clamped to [0, 1].

use std::collections::{BTreeMap, BTreeSet};

use super::{
    AgentError, AgentPolicy, AgentProfile, AgentTools, Critique, Directive, Evidence, Instruction, PolicyOutput, Role,
    Stance, TurnContext, TurnPayload, WireSuggestion,
};
use crate::ranking::{sort_scored, ScoredItem};
use crate::tools::ToolRequest;

const PROPOSE_COUNT: usize = 5;
const REFINE_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedPolicy;

/// The query followed by the top category names, space separated.
pub fn pseudo_query(query: &str, categories: &[&str]) -> String {
    let mut out = query.trim().to_string();
    for c in categories {
        out.push(' ');
        out.push_str(c);
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum Source {
    Query,
    Anchor,
}

impl ScriptedPolicy {
    fn source(profile: &AgentProfile, ctx: &TurnContext, directive: Directive) -> Source {
        match (&profile.evidence, directive) {
            (Evidence::Item { .. }, Directive::ReplaceLowRelevance) => Source::Anchor,
            (Evidence::Item { relevance, .. }, _) if *relevance >= ctx.tau => Source::Anchor,
            _ => Source::Query,
        }
    }

    fn request(profile: &AgentProfile, ctx: &TurnContext, source: Source, k: usize) -> ToolRequest {
        match source {
            Source::Anchor => ToolRequest::RetrieveByItem {
                item_id: profile.subject_id.clone(),
                k,
                exclude: ctx.exclude.clone(),
            },
            Source::Query => {
                let query = match profile.role {
                    Role::UserAgent => pseudo_query(&ctx.query, &profile.top_category_names()),
                    _ => ctx.query.clone(),
                };
                ToolRequest::RetrieveByQuery { query, k, exclude: ctx.exclude.clone() }
            }
        }
    }

    /// Fresh retrieval when the budget allows, merged with everything the
    /// agent saw before. With no budget left only past evidence is used.
    fn gather(
        profile: &AgentProfile,
        ctx: &TurnContext,
        tools: &mut AgentTools<'_>,
        source: Source,
        k: usize,
        want_fresh: bool,
    ) -> Result<(Vec<ScoredItem>, Vec<ScoredItem>), AgentError> {
        let mut fresh = Vec::new();
        if want_fresh || ctx.own_evidence.is_empty() {
            if let Some(result) = tools.call(Self::request(profile, ctx, source, k)) {
                fresh = result
                    .map_err(|e| AgentError::PolicyFailure(format!("retrieval failed: {e}")))?
                    .scored_items();
            }
        }
        let mut best: BTreeMap<&str, f64> = BTreeMap::new();
        for s in ctx.own_evidence.iter().chain(fresh.iter()) {
            let slot = best.entry(s.item_id.as_str()).or_insert(f64::NEG_INFINITY);
            *slot = slot.max(s.score);
        }
        let mut merged: Vec<ScoredItem> = best.into_iter().map(|(id, s)| ScoredItem::new(id, s)).collect();
        sort_scored(&mut merged);
        Ok((merged, fresh))
    }

    fn rationale(profile: &AgentProfile, source: Source, score: f64) -> String {
        match &profile.evidence {
            Evidence::User { similarity, .. } => format!(
                "neighbor {} (similarity {:.3}) favors {}; retrieval score {:.3}",
                profile.subject_id,
                similarity,
                profile.top_category_names().join("/"),
                score
            ),
            Evidence::Item { relevance, .. } if source == Source::Anchor => format!(
                "close to anchor {} (query relevance {:.3}); item similarity {:.3}",
                profile.subject_id, relevance, score
            ),
            Evidence::Item { relevance, .. } => format!(
                "anchor {} is weakly relevant ({:.3}); direct query match {:.3}",
                profile.subject_id, relevance, score
            ),
            Evidence::Orchestrator => format!("retrieval score {score:.3}"),
        }
    }

    fn suggest(
        profile: &AgentProfile,
        source: Source,
        pool: &[ScoredItem],
        skip: impl Fn(&str) -> bool,
        count: usize,
    ) -> Vec<WireSuggestion> {
        pool.iter()
            .filter(|s| !skip(&s.item_id))
            .take(count)
            .map(|s| WireSuggestion {
                item_id: s.item_id.clone(),
                rationale: Self::rationale(profile, source, s.score),
                confidence: s.score.clamp(0.0, 1.0),
            })
            .collect()
    }
}

impl AgentPolicy for ScriptedPolicy {
    fn name(&self) -> &str {
        "scripted"
    }

    fn step(
        &self,
        profile: &AgentProfile,
        instruction: &Instruction,
        ctx: &TurnContext,
        tools: &mut AgentTools<'_>,
    ) -> Result<PolicyOutput, AgentError> {
        let k = ctx.k.max(1);
        let directive = instruction.directive;
        let source = Self::source(profile, ctx, directive);
        let known: BTreeSet<&str> = ctx.own_evidence.iter().map(|s| s.item_id.as_str()).collect();
        let low = |id: &str| ctx.low_relevance.contains(id);
        let mut critiques = Vec::new();

        let (suggestions, fresh) = match directive {
            Directive::Propose => {
                let (pool, fresh) = Self::gather(profile, ctx, tools, source, k, true)?;
                let s = Self::suggest(profile, source, &pool, |id| ctx.own_suggested.contains(id) || low(id), PROPOSE_COUNT);
                (s, fresh)
            }
            Directive::Refine => {
                let (pool, fresh) = Self::gather(profile, ctx, tools, source, k, false)?;
                for entry in &ctx.draft.entries {
                    if !low(&entry.item_id) && pool.iter().any(|s| s.item_id == entry.item_id) {
                        critiques.push(Critique {
                            item_id: entry.item_id.clone(),
                            stance: Stance::Support,
                            reason: format!("also surfaced by {}", profile.agent_id),
                        });
                    }
                }
                let s = Self::suggest(
                    profile,
                    source,
                    &pool,
                    |id| ctx.own_suggested.contains(id) || ctx.draft.contains(id) || low(id),
                    REFINE_COUNT,
                );
                (s, fresh)
            }
            Directive::ResolveConflict => {
                let (pool, fresh) = Self::gather(profile, ctx, tools, source, k, false)?;
                let mut contested_any = false;
                for item in &instruction.focus_items {
                    if low(item) {
                        contested_any = true;
                        critiques.push(Critique {
                            item_id: item.clone(),
                            stance: Stance::Contest,
                            reason: "query relevance below the floor".into(),
                        });
                    } else if known.contains(item.as_str()) || pool.iter().any(|s| &s.item_id == item) {
                        critiques.push(Critique {
                            item_id: item.clone(),
                            stance: Stance::Support,
                            reason: format!("backed by {} retrieval evidence", profile.agent_id),
                        });
                    }
                }
                let s = if contested_any {
                    Self::suggest(
                        profile,
                        source,
                        &pool,
                        |id| ctx.own_suggested.contains(id) || ctx.candidates.contains(id) || low(id),
                        REFINE_COUNT,
                    )
                } else {
                    Vec::new()
                };
                (s, fresh)
            }
            Directive::ReplaceLowRelevance => {
                for item in &instruction.focus_items {
                    critiques.push(Critique {
                        item_id: item.clone(),
                        stance: Stance::Contest,
                        reason: "query relevance below the floor".into(),
                    });
                }
                let focus: BTreeSet<&str> = instruction.focus_items.iter().map(String::as_str).collect();
                let (pool, fresh) = Self::gather(profile, ctx, tools, source, k, true)?;
                let s = Self::suggest(
                    profile,
                    source,
                    &pool,
                    |id| focus.contains(id) || ctx.candidates.contains(id) || ctx.own_suggested.contains(id) || low(id),
                    PROPOSE_COUNT,
                );
                (s, fresh)
            }
        };

        let supported = critiques.iter().filter(|c| c.stance == Stance::Support).count();
        let contested = critiques.len() - supported;
        let message = format!(
            "{}: {:?} with {} new suggestion(s), {} support(s), {} contest(s)",
            profile.agent_id,
            directive,
            suggestions.len(),
            supported,
            contested
        );
        Ok(PolicyOutput {
            payload: TurnPayload { message, suggestions, critiques },
            evidence: fresh,
        })
    }
}
