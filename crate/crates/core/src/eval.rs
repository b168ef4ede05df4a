//! Offline evaluation: H@K, NDCG@K and batch benchmarks over query cases.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::QueryCase;
use crate::ranking::RankedList;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricError {
    #[error("relevance set is empty")]
    EmptyRelevanceSet,
}

/// 1 when any of the first `k` ids is relevant.
pub fn hit_at_k(ranked: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    if ranked.iter().take(k).any(|id| relevant.contains(id)) {
        1.0
    } else {
        0.0
    }
}

/// Binary-gain NDCG with a `log2(i + 1)` discount; the ideal ranking puts
/// `min(|relevant|, k)` relevant items first.
pub fn ndcg_at_k(ranked: &[String], relevant: &BTreeSet<String>, k: usize) -> Result<f64, MetricError> {
    if relevant.is_empty() {
        return Err(MetricError::EmptyRelevanceSet);
    }
    let discount = |pos: usize| 1.0 / ((pos + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| relevant.contains(*id))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let idcg: f64 = (1..=relevant.len().min(k)).map(discount).sum();
    Ok(dcg / idcg)
}

/// What a method produced for one case.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MethodOutput {
    pub ranked: RankedList,
    pub rounds_used: Option<usize>,
    pub tool_calls: usize,
}

pub trait Method: Send + Sync {
    fn name(&self) -> String;
    fn run(&self, case: &QueryCase) -> Result<MethodOutput, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub case_id: String,
    pub ranked: Vec<String>,
    pub hit: f64,
    pub ndcg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds_used: Option<usize>,
    pub tool_calls: usize,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub method: String,
    pub k: usize,
    pub cases: usize,
    pub failures: usize,
    pub mean_hit: f64,
    pub mean_ndcg: f64,
    /// Rounds used to number of sessions; empty for non-discussion methods.
    pub rounds_histogram: BTreeMap<usize, usize>,
    pub config: serde_json::Value,
    #[serde(skip)]
    pub records: Vec<RunRecord>,
}

impl BenchmarkReport {
    /// Share of sessions finished within `round` rounds.
    pub fn finished_by(&self, round: usize) -> f64 {
        let total: usize = self.rounds_histogram.values().sum();
        if total == 0 {
            return 0.0;
        }
        let done: usize = self.rounds_histogram.range(..=round).map(|(_, n)| n).sum();
        done as f64 / total as f64
    }

    /// Header line, then one line per case.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", serde_json::to_string(self)?)?;
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r)?)?;
        }
        out.flush()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "case_id", "hit", "ndcg", "rounds_used", "tool_calls", "wall_ms", "error", "ranked"])?;
        for r in &self.records {
            w.write_record([
                r.method.clone(),
                r.case_id.clone(),
                r.hit.to_string(),
                r.ndcg.to_string(),
                r.rounds_used.map(|n| n.to_string()).unwrap_or_default(),
                r.tool_calls.to_string(),
                r.wall_ms.to_string(),
                r.error.clone().unwrap_or_default(),
                r.ranked.join(" "),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<stem>.jsonl` and `<stem>.csv` next to each other.
    pub fn save(&self, jsonl_path: &Path) -> std::io::Result<()> {
        if let Some(dir) = jsonl_path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.write_jsonl(std::io::BufWriter::new(std::fs::File::create(jsonl_path)?))?;
        let csv_path = jsonl_path.with_extension("csv");
        self.write_csv(std::fs::File::create(csv_path)?)
            .map_err(std::io::Error::other)
    }

    pub fn read_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut report: BenchmarkReport = serde_json::from_str(lines.next().unwrap_or("{}"))?;
        report.records = lines.map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(report)
    }
}

fn evaluate_case(method: &dyn Method, name: &str, case: &QueryCase, k: usize) -> RunRecord {
    let started = Instant::now();
    let result = method.run(case);
    let wall_ms = started.elapsed().as_millis() as u64;
    match result {
        Ok(out) => {
            let ranked = out.ranked.item_ids();
            let ndcg = ndcg_at_k(&ranked, &case.relevant_item_ids, k);
            RunRecord {
                method: name.to_string(),
                case_id: case.case_id.clone(),
                hit: hit_at_k(&ranked, &case.relevant_item_ids, k),
                ndcg: ndcg.as_ref().copied().unwrap_or(0.0),
                ranked,
                rounds_used: out.rounds_used,
                tool_calls: out.tool_calls,
                wall_ms,
                error: ndcg.err().map(|e| e.to_string()),
            }
        }
        Err(error) => RunRecord {
            method: name.to_string(),
            case_id: case.case_id.clone(),
            ranked: Vec::new(),
            hit: 0.0,
            ndcg: 0.0,
            rounds_used: None,
            tool_calls: 0,
            wall_ms,
            error: Some(error),
        },
    }
}

/// Evaluates every case; a failing case becomes a zero-metric record.
/// Records come back in case order whether or not `parallel` is set.
pub fn run_benchmark(
    cases: &[QueryCase],
    method: &dyn Method,
    k: usize,
    config: serde_json::Value,
    parallel: bool,
) -> BenchmarkReport {
    let name = method.name();
    let records: Vec<RunRecord> = if parallel {
        cases.par_iter().map(|c| evaluate_case(method, &name, c, k)).collect()
    } else {
        cases.iter().map(|c| evaluate_case(method, &name, c, k)).collect()
    };
    summarize(name, k, config, records)
}

pub fn summarize(method: String, k: usize, config: serde_json::Value, records: Vec<RunRecord>) -> BenchmarkReport {
    let n = records.len();
    let mean = |f: fn(&RunRecord) -> f64| if n == 0 { 0.0 } else { records.iter().map(f).sum::<f64>() / n as f64 };
    let mut rounds_histogram = BTreeMap::new();
    for r in &records {
        if let Some(rounds) = r.rounds_used {
            *rounds_histogram.entry(rounds).or_default() += 1;
        }
    }
    BenchmarkReport {
        method,
        k,
        cases: n,
        failures: records.iter().filter(|r| r.failed()).count(),
        mean_hit: mean(|r| r.hit),
        mean_ndcg: mean(|r| r.ndcg),
        rounds_histogram,
        config,
        records,
    }
}
