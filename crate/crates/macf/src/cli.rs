//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use macf_core::baselines::BaselineMethod;
use macf_core::catalog::load_query_cases;
use macf_core::config::AppConfig;
use macf_core::engine::{build_cached_index, build_provider, ingest, BaselineRunner, Engine, EngineError, MacfMethod};
use macf_core::eval::{run_benchmark, BenchmarkReport, Method};
use macf_core::orchestrator::{JsonlSink, Mode, SessionError};
use macf_core::transport::{HttpTransport, Transport};
use serde_json::{Map, Value};

use crate::server::{self, AppState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "macf", version, about = "Multi-agent collaborative filtering recommender")]
pub struct Cli {
    /// TOML config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate raw items and interactions and cache the catalog.
    Ingest {
        #[arg(long)]
        items: Option<PathBuf>,
        #[arg(long)]
        interactions: Option<PathBuf>,
    },
    /// Build or refresh the vector index for the ingested catalog.
    Index,
    /// Run one discussion and print the ranked list.
    Recommend {
        #[arg(long)]
        user: String,
        #[arg(long)]
        query: String,
        /// Config override, e.g. `--set K=5` or `--set orchestrator.tau=0.3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Benchmark a method over a query-case file.
    Evaluate {
        #[arg(long)]
        cases: PathBuf,
        /// macf, itemcf, usercf, bm25 or dense.
        #[arg(long, default_value = "macf")]
        method: String,
        /// no-pci, no-dar, no-atu or none.
        #[arg(long, default_value = "none")]
        ablation: String,
        /// full, user_only or item_only.
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Report path; a CSV summary is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write one transcript per case.
        #[arg(long)]
        transcripts: bool,
        #[arg(long)]
        serial: bool,
    },
    /// Run a non-agentic method for one query.
    Baseline {
        #[arg(long)]
        method: String,
        #[arg(long)]
        user: String,
        #[arg(long)]
        query: String,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        Failure::Runtime(format!("{}: {e}", e.kind()))
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Parses `argv` and runs the command, writing results to `out`.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `macf --help` for usage.");
            EXIT_USAGE
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_FAILURE
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<AppConfig, Failure> {
    match path {
        Some(p) => AppConfig::load(p).map_err(runtime),
        None => Ok(AppConfig::default()),
    }
}

/// `KEY=VALUE` pairs as a JSON override object. Values parse as JSON when
/// they can and fall back to strings; `section.key` nests.
pub fn parse_overrides(pairs: &[String]) -> Result<Value, String> {
    let mut root = Map::new();
    for pair in pairs {
        let (key, raw) = pair.split_once('=').ok_or_else(|| format!("override {pair:?} is not KEY=VALUE"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        match key.split_once('.') {
            Some((section, field)) => {
                let slot = root.entry(section.to_string()).or_insert_with(|| Value::Object(Map::new()));
                let Value::Object(fields) = slot else {
                    return Err(format!("{section} is set both as a value and as a section"));
                };
                fields.insert(field.to_string(), value);
            }
            None => {
                root.insert(key.to_string(), value);
            }
        }
    }
    Ok(Value::Object(root))
}

fn transport() -> Arc<dyn Transport> {
    Arc::new(HttpTransport::new())
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest { items, interactions } => {
            let report = ingest(&config, items.as_deref(), interactions.as_deref())?;
            writeln!(
                out,
                "ingested {} items and {} interactions ({} unknown fields ignored) into {}",
                report.items_read,
                report.interactions_read,
                report.unknown_fields,
                config.data.workdir.display()
            )
            .map_err(runtime)?;
        }
        Command::Index => {
            let provider = build_provider(&config, &transport());
            let stats = build_cached_index(&config, provider.as_ref())?;
            let how = if stats.from_cache { "up to date" } else { "rebuilt" };
            writeln!(out, "index {how} at {} ({} provider calls)", config.data.index_path().display(), stats.provider_calls)
                .map_err(runtime)?;
        }
        Command::Recommend { user, query, overrides } => {
            let overrides = parse_overrides(&overrides).map_err(Failure::Usage)?;
            let engine = Engine::open(config, transport())?;
            recommend(&engine, &user, &query, &overrides, out)?;
        }
        Command::Evaluate { cases, method, ablation, mode, overrides, out: report_path, transcripts, serial } => {
            let overrides = parse_overrides(&overrides).map_err(Failure::Usage)?;
            let config = config.with_overrides(&overrides).map_err(|e| Failure::Usage(e.to_string()))?;
            let engine = Engine::open(config, transport())?;
            let spec = EvalSpec { method, ablation, mode, transcripts, parallel: !serial };
            evaluate(&engine, &cases, &spec, report_path, out)?;
        }
        Command::Baseline { method, user, query, k } => {
            let method: BaselineMethod = method.parse().map_err(|e: macf_core::baselines::BaselineError| Failure::Usage(e.to_string()))?;
            let engine = Engine::open(config, transport())?;
            let k = k.unwrap_or(engine.config().orchestrator.list_size);
            let list = engine.baseline(method, &user, &query, k)?;
            print_list(&engine, &list, out)?;
        }
        Command::Serve { bind } => {
            let mut config = config;
            if let Some(bind) = bind {
                config.server.bind = bind;
            }
            serve(config)?;
        }
    }
    Ok(())
}

fn print_list(engine: &Engine, list: &macf_core::ranking::RankedList, out: &mut dyn Write) -> Result<(), Failure> {
    for (rank, entry) in list.entries.iter().enumerate() {
        let title = engine.catalog().item(&entry.item_id).map(|i| i.title.as_str()).unwrap_or("");
        writeln!(out, "{}\t{}\t{:.4}\t{}", rank + 1, entry.item_id, entry.score, title).map_err(runtime)?;
    }
    Ok(())
}

fn recommend(engine: &Engine, user: &str, query: &str, overrides: &Value, out: &mut dyn Write) -> Result<(), Failure> {
    let dir = engine.config().data.transcript_dir();
    std::fs::create_dir_all(&dir).map_err(runtime)?;
    let session_id = macf_core::orchestrator::deterministic_session_id(user, query, engine.config().policy.seed);
    let path = dir.join(format!("{session_id}.jsonl"));
    let file = File::create(&path).map_err(runtime)?;
    let mut sink = JsonlSink(BufWriter::new(file));
    let result = engine.recommend(user, query, overrides, Some(&session_id), &mut sink);
    drop(sink);
    match result {
        Ok(session) => {
            print_list(engine, &session.outcome.final_list, out)?;
            eprintln!("transcript: {}", path.display());
            Ok(())
        }
        Err(e) => {
            let started = std::fs::metadata(&path).map(|m| m.len() > 0).unwrap_or(false);
            if started {
                eprintln!("transcript: {}", path.display());
            } else {
                let _ = std::fs::remove_file(&path);
            }
            match &e {
                EngineError::Config(_) | EngineError::Session(SessionError::Config(_)) => Err(Failure::Usage(e.to_string())),
                _ => Err(e.into()),
            }
        }
    }
}

struct EvalSpec {
    method: String,
    ablation: String,
    mode: Option<Mode>,
    transcripts: bool,
    parallel: bool,
}

fn evaluate(
    engine: &Engine,
    cases_path: &Path,
    spec: &EvalSpec,
    report_path: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<(), Failure> {
    let cases = load_query_cases(cases_path, engine.catalog()).map_err(|e| Failure::Runtime(e.to_string()))?;
    if cases.is_empty() {
        return Err(Failure::Runtime(format!("{} holds no query cases", cases_path.display())));
    }
    let k = engine.config().orchestrator.list_size;
    let mut snapshot = engine.config().snapshot();
    let report_path = report_path.unwrap_or_else(|| {
        engine.config().data.workdir.join("reports").join(format!("{}.jsonl", spec.method))
    });
    if let Some(dir) = report_path.parent() {
        std::fs::create_dir_all(dir).map_err(runtime)?;
    }

    let report: BenchmarkReport = if spec.method == "macf" {
        let mut oc = engine.config().orchestrator_config();
        oc.apply_ablation(&spec.ablation).map_err(|e| Failure::Usage(e.to_string()))?;
        if let Some(mode) = spec.mode {
            oc.mode = mode;
        }
        snapshot["orchestrator_effective"] = serde_json::to_value(&oc).map_err(runtime)?;
        let mut method = MacfMethod::new(engine, oc);
        if spec.transcripts {
            let dir = engine.config().data.transcript_dir().join(format!("eval-{}", method.name().replace(':', "-")));
            std::fs::create_dir_all(&dir).map_err(runtime)?;
            method = method.with_transcripts(dir);
        }
        let report = run_benchmark(&cases, &method, k, snapshot, spec.parallel);
        write_call_logs(&report_path, &method)?;
        report
    } else {
        if spec.ablation != "none" || spec.mode.is_some() {
            return Err(Failure::Usage("--ablation and --mode apply to macf only".into()));
        }
        let method: BaselineMethod = spec.method.parse().map_err(|e: macf_core::baselines::BaselineError| Failure::Usage(e.to_string()))?;
        run_benchmark(&cases, &BaselineRunner { engine, method, k }, k, snapshot, spec.parallel)
    };
    report.save(&report_path).map_err(runtime)?;
    writeln!(
        out,
        "{}: H@{k}={:.4} N@{k}={:.4} over {} cases ({} failed); rounds {:?}; report {}",
        report.method,
        report.mean_hit,
        report.mean_ndcg,
        report.cases,
        report.failures,
        report.rounds_histogram,
        report_path.display()
    )
    .map_err(runtime)?;
    Ok(())
}

/// Per-case tool-call logs next to the report, one call per line.
fn write_call_logs(report_path: &Path, method: &MacfMethod<'_>) -> Result<(), Failure> {
    let path = report_path.with_extension("calls.jsonl");
    let mut file = BufWriter::new(File::create(&path).map_err(runtime)?);
    for (case_id, calls) in method.call_logs() {
        for call in calls {
            let mut line = serde_json::to_value(&call).map_err(runtime)?;
            line["case_id"] = Value::String(case_id.clone());
            writeln!(file, "{line}").map_err(runtime)?;
        }
    }
    file.flush().map_err(runtime)
}

fn serve(config: AppConfig) -> Result<(), Failure> {
    let grace = std::time::Duration::from_secs_f64(config.server.shutdown_grace_s.max(0.0));
    let bind = config.server.bind.clone();
    let engine = Arc::new(Engine::open(config, transport())?);
    let runtime_ = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(runtime)?;
    let result = runtime_.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .map_err(|e| Failure::Runtime(format!("BindFailure: cannot bind {bind}: {e}")))?;
        let addr = listener.local_addr().map_err(runtime)?;
        eprintln!("listening on http://{addr}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        server::serve(listener, Arc::new(AppState::new(engine)), shutdown).await.map_err(runtime)
    });
    runtime_.shutdown_timeout(grace);
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn pairs(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_parse_json_values_and_sections() {
        let v = parse_overrides(&pairs(&["K=5", "tau=0.2", "mode=user_only", "chat.judge=true"])).unwrap();
        assert_eq!(v, json!({"K": 5, "tau": 0.2, "mode": "user_only", "chat": {"judge": true}}));
        assert_eq!(parse_overrides(&[]).unwrap(), json!({}));
    }

    #[test]
    fn malformed_overrides_are_rejected() {
        assert!(parse_overrides(&pairs(&["K"])).is_err());
        assert!(parse_overrides(&pairs(&["chat=1", "chat.judge=true"])).is_err());
    }

    #[test]
    fn usage_and_help_exit_codes() {
        let mut out = Vec::new();
        assert_eq!(run(["macf", "--version"], &mut out), EXIT_OK);
        assert_eq!(run(["macf", "frobnicate"], &mut out), EXIT_USAGE);
    }
}
