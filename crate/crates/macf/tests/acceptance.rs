//! End-to-end acceptance checks. Prints one [PASS]/[FAIL] line per
//! criterion and exits nonzero if any fails.

#[path = "../../core/tests/common/oracles.rs"]
mod oracles;

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use macf::server::AppState;
use macf_core::agent::{build_item_agent_profile, build_user_agent_profile, CandidateSuggestion, Stance, ORCHESTRATOR_ID};
use macf_core::baselines::CfScorer;
use macf_core::catalog::{Catalog, Interaction, InteractionHistory, Item};
use macf_core::config::AppConfig;
use macf_core::engine::{Engine, MacfMethod};
use macf_core::eval::{hit_at_k, ndcg_at_k, run_benchmark, BenchmarkReport};
use macf_core::orchestrator::transcript::read_transcript;
use macf_core::orchestrator::{
    run_discussion, sufficiency_test, CritiqueRecord, DiscussionState, EventPayload, JsonlSink, Mode, OrchestratorConfig,
    SessionEvent, TerminationReason,
};
use macf_core::ranking::{RankedEntry, Rationale, ScoredItem};
use macf_core::synth::{planted_corpus, random_catalog, RandomCatalogSpec, PLANTED_DIM};
use macf_core::tools::{Retrieval, ToolDefaults, ToolSet};
use macf_core::transport::{HttpTransport, RecordingTransport, Transport};
use serde_json::{json, Value};

use oracles::{same_ranking, SCORE_TOL};

type Outcome = Result<String, String>;

const LIST_SIZE: usize = 10;
const T_MAX: usize = 5;
const BM25_TOL: f64 = 1e-6;
const TREND_SLACK: f64 = 0.02;
const RANDOM_MULTIPLE: f64 = 5.0;
const FINISHED_BY_ROUND3: f64 = 0.70;
const SESSIONS: usize = 100;
const CONCURRENT: usize = 20;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn retrieval(catalog: Catalog, dim: usize, transport: &Arc<dyn Transport>) -> Arc<Retrieval> {
    let config = AppConfig { embedding: macf_core::config::EmbeddingSection { dim, ..Default::default() }, ..Default::default() };
    common::engine(config, catalog, transport).retrieval().clone()
}

fn sized_spec(i: usize, max_users: usize, max_items: usize) -> RandomCatalogSpec {
    RandomCatalogSpec {
        users: 8 + (max_users - 8) * (i + 1) / 25,
        items: 20 + (max_items - 20) * (i + 1) / 25,
        categories: 2 + i % 7,
        vocabulary: 12 + 3 * i,
        max_events: 3 + i % 12,
    }
}

fn sample_users(catalog: &Catalog, count: usize, salt: usize) -> Vec<String> {
    let users: Vec<&String> = catalog.users().keys().collect();
    let mut picked: BTreeSet<String> = (0..count).map(|j| users[(j * 37 + salt * 11) % users.len()].clone()).collect();
    let busiest = catalog.users().values().max_by_key(|h| h.events.len()).unwrap();
    picked.insert(busiest.user_id.clone());
    picked.into_iter().collect()
}

fn criterion_cf() -> Outcome {
    let cf = CfScorer::new(Arc::new(toy_catalog()));
    let item = cf.item_cf_scores("u4").map_err(|e| e.to_string())?;
    let user = cf.user_cf_scores("u4").map_err(|e| e.to_string())?;
    let toy_item = [("b".to_string(), 2.0 / 6f64.sqrt()), ("c".to_string(), 0.5)];
    let toy_user = [("b".to_string(), 1.0 / 2f64.sqrt() + 1.0 / 3f64.sqrt()), ("c".to_string(), 1.0 / 3f64.sqrt())];
    same_ranking(&item, &toy_item, SCORE_TOL).map_err(|e| format!("toy ItemCF: {e}"))?;
    same_ranking(&user, &toy_user, SCORE_TOL).map_err(|e| format!("toy UserCF: {e}"))?;
    same_ranking(&item, &oracles::item_cf(&toy_catalog(), "u4"), SCORE_TOL)?;
    same_ranking(&user, &oracles::user_cf(&toy_catalog(), "u4"), SCORE_TOL)?;
    ensure((item[0].score - 0.8165).abs() < 5e-5 && (user[0].score - 1.2845).abs() < 5e-5, || "toy rounding".into())?;

    let mut checked = 0;
    for i in 0..25 {
        let spec = sized_spec(i, 200, 500);
        let catalog = random_catalog(&spec, 1000 + i as u64);
        let cf = CfScorer::new(Arc::new(catalog.clone()));
        for user in sample_users(&catalog, 4, i) {
            let got = cf.item_cf_scores(&user).map_err(|e| e.to_string())?;
            same_ranking(&got, &oracles::item_cf(&catalog, &user), SCORE_TOL)
                .map_err(|e| format!("catalog {i} {user} ItemCF: {e}"))?;
            let got = cf.user_cf_scores(&user).map_err(|e| e.to_string())?;
            same_ranking(&got, &oracles::user_cf(&catalog, &user), SCORE_TOL)
                .map_err(|e| format!("catalog {i} {user} UserCF: {e}"))?;
            checked += 1;
        }
    }
    Ok(format!("toy case + {checked} users over 25 catalogs, tol {SCORE_TOL:e}"))
}

fn query_for(catalog: &Catalog, j: usize) -> String {
    let items: Vec<&Item> = catalog.items().values().collect();
    let title = &items[(j * 53) % items.len()].title;
    title.split_whitespace().take(2).collect::<Vec<_>>().join(" ")
}

fn criterion_retrieval(transport: &Arc<dyn Transport>) -> Outcome {
    let mut checks = 0;
    for i in 0..25 {
        let spec = sized_spec(i, 240, 1000);
        let r = retrieval(random_catalog(&spec, 2000 + i as u64), 64, transport);
        let catalog = r.catalog().clone();
        let index = r.index().clone();
        for (j, user) in sample_users(&catalog, 3, i).into_iter().enumerate() {
            let query = query_for(&catalog, i + j);
            let q = r.embed_query(&query).map_err(|e| e.to_string())?;
            let owned = catalog.get_history(&user).unwrap().item_set();
            let ctx = |what: &str| format!("corpus {i} {user} {what}");
            for k in [1, 10, 50, 5000] {
                let got = index.top_k(&q, k, &BTreeSet::new()).map_err(|e| e.to_string())?;
                same_ranking(&got, &oracles::top_k(&index, q.components(), k, &BTreeSet::new()), SCORE_TOL)
                    .map_err(|e| format!("{}: {e}", ctx("top_k")))?;
                let got = r.retrieve_by_query(&query, k, &owned).map_err(|e| e.to_string())?;
                same_ranking(&got, &oracles::top_k(&index, q.components(), k, &owned), SCORE_TOL)
                    .map_err(|e| format!("{}: {e}", ctx("top_k excluding history")))?;
                let anchor = owned.iter().nth(k % owned.len()).unwrap();
                let got = r.retrieve_by_item(anchor, k, &owned).map_err(|e| e.to_string())?;
                same_ranking(&got, &oracles::by_item(&index, anchor, k, &owned), SCORE_TOL)
                    .map_err(|e| format!("{}: {e}", ctx("retrieve_by_item")))?;
                checks += 3;
            }
            for n in [1, 5, 1000] {
                let got: Vec<ScoredItem> = r
                    .get_similar_users(&user, n)
                    .map_err(|e| e.to_string())?
                    .neighbors
                    .into_iter()
                    .map(|x| ScoredItem::new(x.user_id, x.score))
                    .collect();
                same_ranking(&got, &oracles::similar_users(&catalog, &index, &user, n), SCORE_TOL)
                    .map_err(|e| format!("{}: {e}", ctx("get_similar_users")))?;
                let got: Vec<ScoredItem> = r
                    .get_relevant_items(&user, &query, n)
                    .map_err(|e| e.to_string())?
                    .items
                    .into_iter()
                    .map(|x| ScoredItem::new(x.item_id, x.score))
                    .collect();
                same_ranking(&got, &oracles::relevant_items(&catalog, &index, &user, q.components(), n), SCORE_TOL)
                    .map_err(|e| format!("{}: {e}", ctx("get_relevant_items")))?;
                checks += 2;
            }
        }
    }

    let mut bm25_checks = 0;
    for i in 0..10 {
        let spec = RandomCatalogSpec { users: 3, items: 4 + i, categories: 2, vocabulary: 6 + i, max_events: 2 };
        let r = retrieval(random_catalog(&spec, 3000 + i as u64), 16, transport);
        let docs: Vec<(String, String)> =
            r.catalog().items().values().map(|it| (it.item_id.clone(), it.embedding_text())).collect();
        for j in 0..6 {
            let query = query_for(r.catalog(), i + j);
            let got = r.bm25_search(&query, 1000).map_err(|e| e.to_string())?;
            same_ranking(&got, &oracles::bm25(&docs, &query, 1.2, 0.75), BM25_TOL)
                .map_err(|e| format!("bm25 corpus {i} {query:?}: {e}"))?;
            bm25_checks += 1;
        }
    }
    Ok(format!("{checks} dense comparisons over 25 corpora, {bm25_checks} BM25 queries over 10 corpora (tol {BM25_TOL:e})"))
}

fn ndcg_oracle(ranked: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let mut dcg = 0.0;
    for (i, id) in ranked.iter().take(k).enumerate() {
        if relevant.contains(id) {
            dcg += 1.0 / (i as f64 + 2.0).log2();
        }
    }
    let ideal: f64 = (0..relevant.len().min(k)).map(|i| 1.0 / (i as f64 + 2.0).log2()).sum();
    dcg / ideal
}

fn permutations(ids: &[String], len: usize) -> Vec<Vec<String>> {
    if len == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        let rest: Vec<String> = ids.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| s.clone()).collect();
        for mut tail in permutations(&rest, len - 1) {
            tail.insert(0, id.clone());
            out.push(tail);
        }
    }
    out
}

fn criterion_metrics() -> Outcome {
    let ids = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let rel = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    let target = rel(&["t"]);
    let exact = [
        (ids(&["t", "x", "y"]), 1.0, 1.0),
        (ids(&["x", "y", "z"]), 0.0, 0.0),
        (ids(&["x", "y", "t"]), 1.0, 0.5),
    ];
    for (ranked, hit, ndcg) in &exact {
        ensure(hit_at_k(ranked, &target, 10) == *hit, || format!("hit of {ranked:?}"))?;
        let got = ndcg_at_k(ranked, &target, 10).map_err(|e| e.to_string())?;
        ensure((got - ndcg).abs() < 1e-12, || format!("ndcg of {ranked:?} = {got}"))?;
    }
    ensure(ndcg_at_k(&ids(&["t"]), &BTreeSet::new(), 10).is_err(), || "empty relevance accepted".into())?;

    let universe: Vec<String> = (0..6).map(|i| format!("i{i}")).collect();
    let lists: Vec<Vec<String>> = (0..=5).flat_map(|len| permutations(&universe, len)).collect();
    let mut cases = 0usize;
    for mask in 1u32..64 {
        let relevant: BTreeSet<String> = universe.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, s)| s.clone()).collect();
        for ranked in &lists {
            let mut last_hit = 0.0;
            for k in 1..=6 {
                let n = ndcg_at_k(ranked, &relevant, k).unwrap();
                ensure((0.0..=1.0 + 1e-12).contains(&n), || format!("ndcg {n} out of range"))?;
                ensure((n - ndcg_oracle(ranked, &relevant, k)).abs() < 1e-12, || format!("ndcg mismatch {ranked:?} k={k}"))?;
                let ideal = ranked.len() >= relevant.len().min(k)
                    && ranked.iter().take(relevant.len().min(k)).all(|id| relevant.contains(id));
                ensure(((n - 1.0).abs() < 1e-12) == ideal, || format!("ideal-prefix iff failed {ranked:?} {relevant:?} k={k}"))?;
                let h = hit_at_k(ranked, &relevant, k);
                ensure(h >= last_hit, || format!("hit not monotone {ranked:?} k={k}"))?;
                last_hit = h;
                cases += 1;
            }
        }
    }
    Ok(format!("3 exact cases + {cases} exhaustive sweep cases"))
}

struct Bench {
    engine: Engine,
    sessions: Vec<(String, String)>,
}

fn session_benches(transport: &Arc<dyn Transport>) -> Vec<Bench> {
    let mut benches = Vec::new();
    let planted = planted_corpus(SESSIONS / 2, 41);
    let mut config = AppConfig::default();
    config.embedding.dim = PLANTED_DIM;
    benches.push(Bench {
        sessions: planted.cases.iter().map(|c| (c.user_id.clone(), c.query.clone())).collect(),
        engine: common::engine(config, planted.catalog, transport),
    });
    for s in 0..5 {
        let catalog = random_catalog(&RandomCatalogSpec::default(), 500 + s);
        let users: Vec<String> = catalog.users().keys().cloned().collect();
        let sessions = (0..SESSIONS / 10)
            .map(|j| (users[(j * 7 + s as usize) % users.len()].clone(), query_for(&catalog, j + 3 * s as usize)))
            .collect();
        benches.push(Bench { engine: common::engine(AppConfig::default(), catalog, transport), sessions });
    }
    benches
}

struct Run {
    bytes: Vec<u8>,
    events: Vec<SessionEvent>,
    session: macf_core::engine::Session,
}

fn run_session(engine: &Engine, user: &str, query: &str, overrides: &Value) -> Result<Run, String> {
    let mut sink = JsonlSink(Vec::new());
    let session = engine.recommend(user, query, overrides, None, &mut sink).map_err(|e| format!("{user} {query:?}: {e}"))?;
    let bytes = sink.0;
    let events = read_transcript(std::str::from_utf8(&bytes).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    Ok(Run { bytes, events, session })
}

fn check_session(engine: &Engine, user: &str, run: &Run) -> Result<usize, String> {
    let catalog = engine.catalog();
    let history = catalog.get_history(user).unwrap().item_set();
    let Some(last) = run.events.last() else { return Err("empty transcript".into()) };
    let EventPayload::FinalList { entries, rounds_used, .. } = &last.payload else {
        return Err(format!("last event is {}", last.payload.type_name()));
    };
    ensure(*rounds_used >= 1 && *rounds_used <= T_MAX, || format!("terminated at round {rounds_used}"))?;
    let ids: Vec<&String> = entries.iter().map(|e| &e.item_id).collect();
    let unique: BTreeSet<&String> = ids.iter().copied().collect();
    ensure(ids.len() <= LIST_SIZE && unique.len() == ids.len(), || format!("final list {ids:?}"))?;
    ensure(ids.iter().all(|id| catalog.contains_item(id) && !history.contains(*id)), || format!("final list {ids:?}"))?;
    ensure(*entries == run.session.outcome.final_list.entries, || "final event differs from outcome".into())?;

    // Replay agent turns: each one may only add to the pool, every draft must
    // come from what had been pooled so far, and the replay must reproduce the
    // session's own pool.
    let mut pool: BTreeMap<String, Vec<CandidateSuggestion>> = BTreeMap::new();
    for e in &run.events {
        match &e.payload {
            EventPayload::AgentTurn(turn) if !turn.is_failed() => {
                for s in &turn.suggestions {
                    pool.entry(s.item_id.clone()).or_default().push(s.clone());
                }
            }
            EventPayload::DraftList(draft) => {
                ensure(draft.entries.iter().all(|d| pool.contains_key(&d.item_id)), || "draft item outside pool".into())?;
            }
            _ => {}
        }
    }
    let state = &run.session.outcome.state;
    ensure(pool == state.pool, || "pool is not the append-only union of agent turns".into())?;
    let seqs: Vec<u64> = run.events.iter().map(|e| e.seq).collect();
    ensure(seqs == (0..seqs.len() as u64).collect::<Vec<_>>(), || "seq gap".into())?;
    Ok(*rounds_used)
}

fn criterion_invariants(benches: &[Bench]) -> Outcome {
    let mut count = 0;
    let mut rounds: BTreeMap<usize, usize> = BTreeMap::new();
    for b in benches {
        for (user, query) in &b.sessions {
            let first = run_session(&b.engine, user, query, &Value::Null)?;
            let used = check_session(&b.engine, user, &first).map_err(|e| format!("{user} {query:?}: {e}"))?;
            let second = run_session(&b.engine, user, query, &Value::Null)?;
            ensure(first.bytes == second.bytes, || format!("{user} {query:?}: transcripts differ between runs"))?;
            *rounds.entry(used).or_default() += 1;
            count += 1;
        }
    }
    ensure(count == SESSIONS, || format!("ran {count} sessions"))?;
    Ok(format!("{count} sessions, rounds {rounds:?}, reruns byte-identical"))
}

fn shoe_retrieval(transport: &Arc<dyn Transport>) -> Arc<Retrieval> {
    let mut items: Vec<Item> = (0..12).map(|i| item(&format!("s{i:02}"), &format!("red shoe {i}"), "shoes")).collect();
    items.push(item("n1", "garden hose", "garden"));
    items.push(item("n2", "desk lamp", "office"));
    let histories = vec![history("u", &["n1"]), history("v", &["n1", "s00"]), history("w", &["n2"])];
    retrieval(Catalog::new(items, histories).unwrap(), 64, transport)
}

fn drafted_state(r: &Retrieval, ids: &[String]) -> DiscussionState {
    let mut st = DiscussionState::new("s", "u", "red shoe", ["n1".to_string()].into());
    for (i, id) in ids.iter().enumerate() {
        st.pool.entry(id.clone()).or_default().push(CandidateSuggestion {
            item_id: id.clone(),
            rationale: "fits the query".into(),
            confidence: 0.9,
            proposer: "user:v".into(),
            round: 0,
        });
        st.draft.entries.push(RankedEntry {
            item_id: id.clone(),
            score: 10.0 - i as f64,
            rationales: vec![Rationale { agent_id: "user:v".into(), text: "fits the query".into() }],
        });
    }
    let catalog = r.catalog();
    st.agents = vec![
        build_user_agent_profile(catalog, "v", 0.9, "u", None).unwrap(),
        build_user_agent_profile(catalog, "w", 0.2, "u", None).unwrap(),
        build_item_agent_profile(catalog, "n1", 0.1, "u", "red shoe").unwrap(),
    ];
    st
}

fn criterion_sufficiency(transport: &Arc<dyn Transport>) -> Outcome {
    let r = shoe_retrieval(transport);
    let config = OrchestratorConfig::default();
    let q = r.embed_query("red shoe").map_err(|e| e.to_string())?;
    let shoes = |n: usize| (0..n).map(|i| format!("s{i:02}")).collect::<Vec<_>>();

    let st = drafted_state(&r, &shoes(7));
    let d = sufficiency_test(&st, &st.draft, &config, &r, &q);
    ensure(!d.sufficient && d.violates(1) && !d.violates(2) && !d.violates(3), || format!("7-item draft: {:?}", d.reasons))?;

    let mut st = drafted_state(&r, &shoes(10));
    let d = sufficiency_test(&st, &st.draft, &config, &r, &q);
    ensure(d.sufficient, || format!("full draft: {:?}", d.reasons))?;
    st.critiques.push(CritiqueRecord {
        agent_id: "user:w".into(),
        round: 1,
        item_id: "s03".into(),
        stance: Stance::Contest,
        reason: "off-profile".into(),
    });
    let d = sufficiency_test(&st, &st.draft, &config, &r, &q);
    ensure(!d.sufficient && d.violates(2) && !d.violates(1), || format!("contested draft: {:?}", d.reasons))?;
    ensure(d.contested() == ["s03".to_string()].into(), || "wrong contested set".into())?;

    let tools = ToolSet::new(r.clone(), ToolDefaults::default());
    let quick = OrchestratorConfig { list_size: 5, ..Default::default() };
    let out = run_discussion(&quick, &tools, "u", "red shoe").map_err(|e| e.to_string())?;
    let t = out.state.termination.clone().unwrap();
    ensure(t.reason == TerminationReason::Sufficient && t.round == 1, || format!("all-pass corpus ended {t:?}"))?;

    let tools = ToolSet::new(r.clone(), ToolDefaults::default());
    let out = run_discussion(&config, &tools, "u", "quantum violin").map_err(|e| e.to_string())?;
    let t = out.state.termination.clone().unwrap();
    ensure(t.reason == TerminationReason::RoundLimit && t.round == T_MAX, || format!("never-sufficient corpus ended {t:?}"))?;
    Ok("shortfall, unresolved contest, round-1 pass, round-limit at 5".into())
}

#[derive(Default)]
struct AblationTally {
    atu: usize,
    pci: usize,
    dar: usize,
}

/// Which ablation properties hold in a transcript, judged from its events
/// alone: at most one tool call per agent, identical guidance within a
/// round, every agent active every round.
fn ablation_properties(events: &[SessionEvent]) -> (bool, bool, bool) {
    let mut calls: BTreeMap<&str, usize> = BTreeMap::new();
    let mut guidance: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
    let mut agents: BTreeSet<String> = BTreeSet::new();
    let mut all_active = true;
    for e in events {
        match &e.payload {
            EventPayload::SessionStarted { agents: a, .. } => agents = a.iter().map(|p| p.agent_id.clone()).collect(),
            EventPayload::AgentTurn(t) => *calls.entry(t.agent_id.as_str()).or_default() += t.tool_calls_made,
            EventPayload::Instruction(i) => {
                guidance.entry(i.round).or_default().insert(i.guidance_text.as_str());
            }
            EventPayload::RoundStarted { active } => {
                all_active &= active.iter().cloned().collect::<BTreeSet<_>>() == agents;
            }
            _ => {}
        }
    }
    (calls.values().all(|n| *n <= 1), guidance.values().all(|g| g.len() <= 1), all_active)
}

fn criterion_ablations(benches: &[Bench]) -> Outcome {
    let mut baseline = AblationTally::default();
    let mut counts = [0usize; 3];
    for b in benches {
        for (user, query) in &b.sessions {
            let plain = run_session(&b.engine, user, query, &Value::Null)?;
            let (atu, pci, dar) = ablation_properties(&plain.events);
            baseline.atu += usize::from(!atu);
            baseline.pci += usize::from(!pci);
            baseline.dar += usize::from(!dar);

            for (slot, flag) in ["disable_atu", "disable_pci", "disable_dar"].into_iter().enumerate() {
                let run = run_session(&b.engine, user, query, &json!({ flag: true }))?;
                let props = ablation_properties(&run.events);
                let holds = [props.0, props.1, props.2][slot];
                ensure(holds, || format!("{flag}: transcript of {user} {query:?} violates the property"))?;
                if flag == "disable_atu" {
                    let mut per_agent: BTreeMap<&str, usize> = BTreeMap::new();
                    for c in &run.session.call_log {
                        *per_agent.entry(c.caller.as_str()).or_default() += 1;
                    }
                    let worst = per_agent.iter().filter(|(a, _)| **a != ORCHESTRATOR_ID).map(|(_, n)| *n).max().unwrap_or(0);
                    ensure(worst <= 1, || format!("disable_atu: call log shows {worst} calls for one agent"))?;
                }
                counts[slot] += 1;
            }
        }
    }
    ensure(baseline.atu > 0 && baseline.pci > 0 && baseline.dar > 0, || {
        format!(
            "properties hold without their flag too, so the transcript cannot tell (atu {}, pci {}, dar {})",
            baseline.atu, baseline.pci, baseline.dar
        )
    })?;
    Ok(format!(
        "{} sessions per flag; without the flag the property fails in {}/{}/{} sessions (atu/pci/dar)",
        counts[0], baseline.atu, baseline.pci, baseline.dar
    ))
}

struct TrendRun {
    reports: BTreeMap<&'static str, BenchmarkReport>,
    random: f64,
    random_oracle: f64,
}

fn planted_runs(transport: &Arc<dyn Transport>) -> Result<TrendRun, String> {
    let corpus = planted_corpus(SESSIONS, 7);
    let mut config = AppConfig::default();
    config.embedding.dim = PLANTED_DIM;
    let random = corpus.random_hit_rate(LIST_SIZE);
    let random_oracle = corpus
        .cases
        .iter()
        .map(|c| {
            let eligible = corpus.catalog.num_items() - corpus.catalog.get_history(&c.user_id).unwrap().item_set().len();
            LIST_SIZE.min(eligible) as f64 / eligible as f64
        })
        .sum::<f64>()
        / corpus.cases.len() as f64;
    let cases = corpus.cases.clone();
    let engine = common::engine(config, corpus.catalog, transport);
    let mut reports = BTreeMap::new();
    for (name, mode) in [("full", Mode::Full), ("user_only", Mode::UserOnly), ("item_only", Mode::ItemOnly)] {
        let oc = OrchestratorConfig { mode, ..engine.config().orchestrator_config() };
        let method = MacfMethod::new(&engine, oc.clone());
        let report = run_benchmark(&cases, &method, LIST_SIZE, serde_json::to_value(&oc).unwrap(), true);
        ensure(report.failures == 0, || format!("{name}: {} failed cases", report.failures))?;
        reports.insert(name, report);
    }
    Ok(TrendRun { reports, random, random_oracle })
}

fn criterion_trend(run: &TrendRun) -> Outcome {
    ensure((run.random - run.random_oracle).abs() < 1e-12, || format!("random baseline {} vs oracle {}", run.random, run.random_oracle))?;
    let hit = |m: &str| run.reports[m].mean_hit;
    let (full, user, item) = (hit("full"), hit("user_only"), hit("item_only"));
    ensure(full >= user.max(item) - TREND_SLACK, || format!("full {full:.3} below max(user {user:.3}, item {item:.3}) - {TREND_SLACK}"))?;
    for (m, h) in [("full", full), ("user_only", user), ("item_only", item)] {
        ensure(h >= RANDOM_MULTIPLE * run.random, || format!("{m} H@10 {h:.3} < {RANDOM_MULTIPLE} x random {:.4}", run.random))?;
    }
    Ok(format!("H@10 full {full:.2}, user_only {user:.2}, item_only {item:.2}, random {:.4}", run.random))
}

fn criterion_rounds(run: &TrendRun) -> Outcome {
    let report = &run.reports["full"];
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("full.jsonl");
    report.save(&path).map_err(|e| e.to_string())?;
    let back = BenchmarkReport::read_jsonl(&std::fs::read_to_string(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(!back.rounds_histogram.is_empty(), || "report carries no rounds histogram".into())?;
    let mut recount: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &report.records {
        *recount.entry(r.rounds_used.ok_or("record without rounds")?).or_default() += 1;
    }
    ensure(back.rounds_histogram == recount, || "histogram disagrees with records".into())?;
    let total: usize = back.rounds_histogram.values().sum();
    ensure(total == SESSIONS, || format!("histogram covers {total} sessions"))?;
    let by3 = back.rounds_histogram.range(..=3).map(|(_, n)| *n).sum::<usize>() as f64 / total as f64;
    ensure(by3 >= FINISHED_BY_ROUND3, || format!("{by3:.2} finished by round 3"))?;
    Ok(format!("histogram {:?}, {:.0}% by round 3", back.rounds_histogram, by3 * 100.0))
}

fn criterion_protocol(transport: &Arc<dyn Transport>) -> Outcome {
    let corpus = planted_corpus(CONCURRENT, 3);
    let mut config = AppConfig::default();
    config.embedding.dim = PLANTED_DIM;
    let engine = Arc::new(common::engine(config, corpus.catalog, transport));
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut state = AppState::new(engine.clone());
    state.transcript_dir = dir.path().to_path_buf();
    let server = common::TestServer::start(state);

    let health = common::get(&server.url("/health"));
    let expected = json!({"status": "ok", "items": engine.catalog().num_items(), "users": engine.catalog().num_users()});
    ensure(health.status == 200 && health.json() == expected, || format!("/health gave {} {}", health.status, health.body))?;

    let handles: Vec<_> = corpus
        .cases
        .iter()
        .map(|c| {
            let url = server.url("/recommend");
            let body = json!({"user_id": c.user_id, "query": c.query});
            std::thread::spawn(move || common::post(&url, &body))
        })
        .collect();
    let replies: Vec<common::Reply> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let mut ids = BTreeSet::new();
    for reply in &replies {
        let terminal = common::check_stream(reply, dir.path())?;
        ensure(terminal == "final_list", || format!("session ended with {terminal}"))?;
        ids.insert(reply.session_id.clone().unwrap());
    }
    ensure(ids.len() == CONCURRENT, || "session ids collide".into())?;

    let shape = |r: &common::Reply, status: u16, kind: Option<&str>| -> Result<(), String> {
        let body = r.json();
        let keys: BTreeSet<&str> = body.as_object().map(|o| o.keys().map(String::as_str).collect()).unwrap_or_default();
        ensure(
            r.status == status
                && keys == BTreeSet::from(["error", "message"])
                && body["message"].is_string()
                && kind.is_none_or(|k| body["error"] == k),
            || format!("got {} {}", r.status, r.body),
        )
    };
    shape(&common::post(&server.url("/recommend"), &json!({"user_id": "nobody", "query": "x"})), 404, Some("UnknownUser"))?;
    shape(&common::post_raw(&server.url("/recommend"), "{not json"), 400, None)?;
    shape(&common::post(&server.url("/recommend"), &json!({"user_id": corpus.cases[0].user_id, "query": "   "})), 400, None)?;
    shape(&common::post(&server.url("/baseline/nonesuch"), &json!({"user_id": "x", "query": "y"})), 404, Some("UnknownMethod"))?;
    shape(&common::post(&server.url("/nowhere"), &json!({})), 404, None)?;
    Ok(format!("{CONCURRENT} concurrent sessions gapless and equal to transcripts; health and error shapes"))
}

fn criterion_no_network(recorder: &RecordingTransport) -> Outcome {
    ensure(recorder.call_count() == 0, || format!("{} requests reached the transport stub", recorder.call_count()))?;
    let created = HttpTransport::instances_created();
    ensure(created == 0, || format!("{created} HTTP transports were created"))?;
    Ok("0 requests recorded, 0 HTTP transports created".into())
}

fn item(id: &str, title: &str, category: &str) -> Item {
    Item { item_id: id.into(), title: title.into(), category: category.into(), attributes: BTreeMap::new(), description: String::new() }
}

fn history(user: &str, items: &[&str]) -> InteractionHistory {
    InteractionHistory {
        user_id: user.into(),
        events: items
            .iter()
            .enumerate()
            .map(|(t, id)| Interaction { item_id: (*id).into(), timestamp: t as i64, rating: None })
            .collect(),
    }
}

fn toy_catalog() -> Catalog {
    Catalog::new(
        vec![item("a", "alpha", "x"), item("b", "beta", "x"), item("c", "gamma", "y")],
        vec![history("u1", &["a", "b"]), history("u2", &["a", "b", "c"]), history("u3", &["b", "c"]), history("u4", &["a"])],
    )
    .unwrap()
}

fn report(number: usize, title: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let elapsed = start.elapsed();
    let result = match (result, limit) {
        (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.1?}, limit {limit:?}")),
        (r, _) => r,
    };
    let timing = match limit {
        Some(limit) => format!("{elapsed:.1?} of {limit:?}"),
        None => format!("{elapsed:.1?}"),
    };
    match &result {
        Ok(detail) => println!("[PASS] {number:>2} {title}: {detail} ({timing})"),
        Err(why) => println!("[FAIL] {number:>2} {title}: {why} ({timing})"),
    }
    result.is_ok()
}

fn main() {
    let recorder = Arc::new(RecordingTransport::new());
    let transport: Arc<dyn Transport> = recorder.clone();
    let secs = Duration::from_secs;
    let mut ok = true;

    ok &= report(1, "CF oracle equivalence", Some(secs(30)), criterion_cf);
    ok &= report(2, "retrieval oracle equivalence", Some(secs(30)), || criterion_retrieval(&transport));
    ok &= report(3, "metric closed forms", Some(secs(5)), criterion_metrics);

    let benches = session_benches(&transport);
    ok &= report(4, "orchestration invariants", Some(secs(120)), || criterion_invariants(&benches));
    ok &= report(5, "sufficiency test behavior", None, || criterion_sufficiency(&transport));
    ok &= report(6, "ablation observability", None, || criterion_ablations(&benches));

    let mut trend = None;
    ok &= report(7, "planted-signal trend", Some(secs(180)), || {
        let run = planted_runs(&transport);
        let verdict = run.as_ref().map_err(Clone::clone).and_then(criterion_trend);
        trend = Some(run);
        verdict
    });
    let trend = trend.unwrap_or_else(|| Err("planted runs did not finish".into()));
    ok &= report(8, "round distribution", None, || trend.as_ref().map_err(Clone::clone).and_then(criterion_rounds));
    ok &= report(9, "protocol conformance", Some(secs(60)), || criterion_protocol(&transport));
    ok &= report(10, "no network", None, || criterion_no_network(&recorder));

    if !ok {
        std::process::exit(1);
    }
}
