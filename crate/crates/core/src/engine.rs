//! Wires catalog, index, tools, policies and baselines into one shared,
//! immutable engine that the CLI and the service both drive.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

use crate::agent::chat::{ChatBackend, ChatClientConfig, ChatParams, ChatPolicy, HttpChatClient};
use crate::agent::{AgentPolicy, ScriptedPolicy};
use crate::baselines::{run_baseline, BaselineError, BaselineMethod, CfScorer};
use crate::catalog::{load_catalog, Catalog, CatalogError, LoadReport, QueryCase};
use crate::config::{AppConfig, ConfigError, EmbeddingKind, PolicyKind};
use crate::embedding::{
    build_index, index_fingerprint, BuildStats, EmbeddingError, EmbeddingProvider, HashEmbedder, IndexCache, RemoteEmbedder,
    RemoteEmbedderConfig,
};
use crate::eval::{Method, MethodOutput};
use crate::orchestrator::{
    ChatJudge, EventSink, JsonlSink, Judge, NullSink, Orchestrator, OrchestratorConfig, Outcome, ScriptedJudge, SessionError,
};
use crate::ranking::RankedList;
use crate::tools::{Retrieval, ToolCall, ToolDefaults, ToolError, ToolSet};
use crate::transport::{RetryPolicy, Secret, Transport};

pub const CHAT_KEY_VAR: &str = "CHAT_API_KEY";
pub const EMBED_KEY_VAR: &str = "EMBED_API_KEY";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("no ingested catalog at {0}; run `ingest` first")]
    MissingCatalog(PathBuf),
    #[error("no vector index at {0}; run `index` first")]
    MissingIndex(PathBuf),
    #[error("vector index at {0} does not match the catalog or provider; run `index` again")]
    StaleIndex(PathBuf),
    #[error("no raw {0} file configured")]
    MissingInput(&'static str),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl EngineError {
    /// Short machine-readable name used in error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            EngineError::MissingCatalog(_) => "MissingCatalog",
            EngineError::MissingIndex(_) | EngineError::StaleIndex(_) => "MissingIndex",
            EngineError::MissingInput(_) => "MissingInput",
            EngineError::Catalog(CatalogError::UnknownUser(_)) => "UnknownUser",
            EngineError::Catalog(_) => "CatalogError",
            EngineError::Embedding(_) => "EmbeddingError",
            EngineError::Tool(ToolError::UnknownUser(_)) | EngineError::Baseline(BaselineError::UnknownUser(_)) => {
                "UnknownUser"
            }
            EngineError::Tool(ToolError::UnknownItem(_)) => "UnknownItem",
            EngineError::Tool(ToolError::EmptyText) | EngineError::Baseline(BaselineError::EmptyText) => "EmptyText",
            EngineError::Tool(ToolError::EmptyHistory(_)) | EngineError::Baseline(BaselineError::EmptyHistory(_)) => {
                "EmptyHistory"
            }
            EngineError::Tool(_) => "ToolFailure",
            EngineError::Baseline(BaselineError::UnknownMethod(_)) => "UnknownMethod",
            EngineError::Baseline(_) => "BaselineFailure",
            EngineError::Config(_) => "InvalidConfig",
            EngineError::Session(e) => e.kind(),
            EngineError::Io { .. } => "IoError",
        }
    }

    /// True for errors caused by the request rather than the engine.
    pub fn is_client_error(&self) -> bool {
        !matches!(
            self.kind(),
            "MissingCatalog" | "MissingIndex" | "EmbeddingError" | "ToolFailure" | "IoError" | "SessionFailure" | "BaselineFailure"
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io { path: path.to_path_buf(), source }
}

fn retry(max_retries: u32) -> RetryPolicy {
    RetryPolicy { max_retries, ..RetryPolicy::default() }
}

/// Embedding provider selected by config. Remote providers read their key
/// from `EMBED_API_KEY`.
pub fn build_provider(config: &AppConfig, transport: &Arc<dyn Transport>) -> Arc<dyn EmbeddingProvider> {
    let e = &config.embedding;
    match e.provider {
        EmbeddingKind::Deterministic => Arc::new(HashEmbedder::new(e.dim)),
        EmbeddingKind::Remote => Arc::new(RemoteEmbedder::new(
            RemoteEmbedderConfig {
                base_url: e.base_url.clone(),
                model: e.model.clone(),
                dim: e.dim,
                timeout: Duration::from_secs_f64(e.timeout_s),
                retry: retry(e.max_retries),
                api_key: Secret::from_env(EMBED_KEY_VAR),
            },
            transport.clone(),
        )),
    }
}

/// Agent policy and judge selected by config. The chat client reads its
/// key from `CHAT_API_KEY`.
pub fn build_policy(config: &AppConfig, transport: &Arc<dyn Transport>) -> (Arc<dyn AgentPolicy>, Arc<dyn Judge>) {
    match config.policy.kind {
        PolicyKind::Scripted => (Arc::new(ScriptedPolicy), Arc::new(ScriptedJudge)),
        PolicyKind::Chat => {
            let c = &config.chat;
            let backend: Arc<dyn ChatBackend> = Arc::new(HttpChatClient::new(
                ChatClientConfig {
                    base_url: c.base_url.clone(),
                    model: c.model.clone(),
                    timeout: Duration::from_secs_f64(c.timeout_s),
                    retry: retry(c.max_retries),
                    api_key: Secret::from_env(CHAT_KEY_VAR),
                    context_tokens: c.context_tokens,
                },
                transport.clone(),
            ));
            let params = ChatParams { temperature: c.temperature, max_tokens: c.max_tokens };
            let judge: Arc<dyn Judge> = if c.judge {
                Arc::new(ChatJudge::new(backend.clone(), params))
            } else {
                Arc::new(ScriptedJudge)
            };
            (Arc::new(ChatPolicy::new(backend, params)), judge)
        }
    }
}

/// Validates the raw item and interaction files and stores the catalog in
/// the work directory.
pub fn ingest(config: &AppConfig, items: Option<&Path>, interactions: Option<&Path>) -> Result<LoadReport, EngineError> {
    let items = items.or(config.data.items.as_deref()).ok_or(EngineError::MissingInput("items"))?;
    let interactions = interactions
        .or(config.data.interactions.as_deref())
        .ok_or(EngineError::MissingInput("interactions"))?;
    let (catalog, report) = load_catalog(items, interactions)?;
    let dir = config.data.catalog_items();
    let dir = dir.parent().expect("catalog path has a parent");
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    catalog.save(&config.data.catalog_items(), &config.data.catalog_interactions())?;
    Ok(report)
}

pub fn load_ingested(config: &AppConfig) -> Result<Catalog, EngineError> {
    let items = config.data.catalog_items();
    let interactions = config.data.catalog_interactions();
    if !items.exists() || !interactions.exists() {
        return Err(EngineError::MissingCatalog(items));
    }
    Ok(load_catalog(&items, &interactions)?.0)
}

/// Builds or refreshes the cached vector index for the ingested catalog.
pub fn build_cached_index(config: &AppConfig, provider: &dyn EmbeddingProvider) -> Result<BuildStats, EngineError> {
    let catalog = load_ingested(config)?;
    let path = config.data.index_path();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let (_, stats) = build_index(&catalog, provider, Some(&IndexCache::new(path)))?;
    Ok(stats)
}

pub struct Engine {
    config: AppConfig,
    retrieval: Arc<Retrieval>,
    cf: Arc<CfScorer>,
    policy: Arc<dyn AgentPolicy>,
    judge: Arc<dyn Judge>,
}

impl Engine {
    /// Builds an engine over an in-memory catalog, embedding every item
    /// (or reusing `cache` when it matches).
    pub fn from_catalog(
        config: AppConfig,
        catalog: Catalog,
        provider: Arc<dyn EmbeddingProvider>,
        cache: Option<&IndexCache>,
        policy: Arc<dyn AgentPolicy>,
        judge: Arc<dyn Judge>,
    ) -> Result<Self, EngineError> {
        let (index, _) = build_index(&catalog, provider.as_ref(), cache)?;
        let catalog = Arc::new(catalog);
        let retrieval = Arc::new(Retrieval::new(catalog.clone(), Arc::new(index), provider)?);
        Ok(Self { config, retrieval, cf: Arc::new(CfScorer::new(catalog)), policy, judge })
    }

    /// Scripted engine over an in-memory catalog with the deterministic
    /// provider; used by tests and evaluation corpora.
    pub fn scripted(config: AppConfig, catalog: Catalog) -> Result<Self, EngineError> {
        let provider = Arc::new(HashEmbedder::new(config.embedding.dim));
        Self::from_catalog(config, catalog, provider, None, Arc::new(ScriptedPolicy), Arc::new(ScriptedJudge))
    }

    /// Loads the ingested catalog and its prebuilt index. Never embeds the
    /// catalog: a missing or stale index is an error.
    pub fn open(config: AppConfig, transport: Arc<dyn Transport>) -> Result<Self, EngineError> {
        let catalog = load_ingested(&config)?;
        let provider = build_provider(&config, &transport);
        let path = config.data.index_path();
        let index = IndexCache::new(&path)
            .load()?
            .ok_or_else(|| EngineError::MissingIndex(path.clone()))?;
        if index.provider_fingerprint() != index_fingerprint(&catalog, provider.as_ref())
            || index.dim() != provider.dim()
        {
            return Err(EngineError::StaleIndex(path));
        }
        let (policy, judge) = build_policy(&config, &transport);
        let catalog = Arc::new(catalog);
        let retrieval = Arc::new(Retrieval::new(catalog.clone(), Arc::new(index), provider)?);
        Ok(Self { config, retrieval, cf: Arc::new(CfScorer::new(catalog)), policy, judge })
    }

    pub fn config(&self) -> &AppConfig {
        &self.config
    }

    pub fn retrieval(&self) -> &Arc<Retrieval> {
        &self.retrieval
    }

    pub fn catalog(&self) -> &Catalog {
        self.retrieval.catalog()
    }

    /// Tools with the configured defaults and an empty call log.
    pub fn tools(&self) -> ToolSet {
        self.tools_for(&self.config)
    }

    fn tools_for(&self, config: &AppConfig) -> ToolSet {
        ToolSet::new(self.retrieval.clone(), ToolDefaults { n: config.retrieval.n, k: config.retrieval.k })
    }

    /// The config after applying request overrides.
    pub fn effective_config(&self, overrides: &Value) -> Result<AppConfig, EngineError> {
        let config = self.config.with_overrides(overrides)?;
        config.orchestrator_config().validate()?;
        Ok(config)
    }

    pub fn orchestrator(&self, config: OrchestratorConfig) -> Orchestrator {
        Orchestrator::new(config, self.policy.clone(), self.judge.clone())
    }

    /// Runs one discussion with fresh tools, streaming events to `sink`.
    pub fn recommend(
        &self,
        user_id: &str,
        query: &str,
        overrides: &Value,
        session_id: Option<&str>,
        sink: &mut dyn EventSink,
    ) -> Result<Session, EngineError> {
        let config = self.effective_config(overrides)?;
        let tools = self.tools_for(&config);
        let outcome = self.orchestrator(config.orchestrator_config()).run(&tools, user_id, query, session_id, sink)?;
        Ok(Session { outcome, call_log: tools.call_log() })
    }

    pub fn baseline(&self, method: BaselineMethod, user_id: &str, query: &str, k: usize) -> Result<RankedList, EngineError> {
        Ok(run_baseline(method, &self.retrieval, &self.cf, user_id, query, k, self.config.baselines.rerank_pool)?)
    }
}

/// A finished discussion plus every tool call made during it.
#[derive(Debug, Clone)]
pub struct Session {
    pub outcome: Outcome,
    pub call_log: Vec<ToolCall>,
}

/// MACF as a benchmark method. Optionally writes one transcript per case
/// and keeps each case's tool-call log for auditing.
pub struct MacfMethod<'a> {
    engine: &'a Engine,
    config: OrchestratorConfig,
    label: String,
    transcript_dir: Option<PathBuf>,
    call_logs: Mutex<BTreeMap<String, Vec<ToolCall>>>,
}

impl<'a> MacfMethod<'a> {
    pub fn new(engine: &'a Engine, config: OrchestratorConfig) -> Self {
        let mut label = "macf".to_string();
        if config.mode != crate::orchestrator::Mode::Full {
            label.push(':');
            label.push_str(config.mode.name());
        }
        for (flag, name) in [(config.disable_pci, "no-pci"), (config.disable_dar, "no-dar"), (config.disable_atu, "no-atu")] {
            if flag {
                label.push(':');
                label.push_str(name);
            }
        }
        Self { engine, config, label, transcript_dir: None, call_logs: Mutex::new(BTreeMap::new()) }
    }

    pub fn with_transcripts(mut self, dir: impl Into<PathBuf>) -> Self {
        self.transcript_dir = Some(dir.into());
        self
    }

    /// Tool calls per case id, in case-id order.
    pub fn call_logs(&self) -> BTreeMap<String, Vec<ToolCall>> {
        self.call_logs.lock().unwrap().clone()
    }

    fn transcript_path(&self, case: &QueryCase) -> Option<PathBuf> {
        let safe: String = case
            .case_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        self.transcript_dir.as_ref().map(|d| d.join(format!("{safe}.jsonl")))
    }
}

impl Method for MacfMethod<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn run(&self, case: &QueryCase) -> Result<MethodOutput, String> {
        let tools = self.engine.tools();
        let orchestrator = self.engine.orchestrator(self.config.clone());
        let result = match self.transcript_path(case) {
            Some(path) => {
                let file = File::create(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                let mut sink = JsonlSink(BufWriter::new(file));
                orchestrator.run(&tools, &case.user_id, &case.query, None, &mut sink)
            }
            None => orchestrator.run(&tools, &case.user_id, &case.query, None, &mut NullSink),
        };
        let log = tools.call_log();
        let calls = log.len();
        self.call_logs.lock().unwrap().insert(case.case_id.clone(), log);
        let outcome = result.map_err(|e| e.to_string())?;
        Ok(MethodOutput {
            rounds_used: Some(outcome.state.rounds_used()),
            ranked: outcome.final_list,
            tool_calls: calls,
        })
    }
}

/// A non-agentic baseline as a benchmark method.
pub struct BaselineRunner<'a> {
    pub engine: &'a Engine,
    pub method: BaselineMethod,
    pub k: usize,
}

impl Method for BaselineRunner<'_> {
    fn name(&self) -> String {
        self.method.name().to_string()
    }

    fn run(&self, case: &QueryCase) -> Result<MethodOutput, String> {
        let ranked = self
            .engine
            .baseline(self.method, &case.user_id, &case.query, self.k)
            .map_err(|e| e.to_string())?;
        Ok(MethodOutput { ranked, rounds_used: None, tool_calls: 0 })
    }
}
