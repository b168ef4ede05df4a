//! TOML application config.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::orchestrator::{Mode, OrchestratorConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("unknown config key {0}")]
    UnknownKey(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub n: usize,
    pub k: usize,
    pub history_window: Option<usize>,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self { n: 5, k: 15, history_window: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrchestratorSection {
    #[serde(rename = "K")]
    pub list_size: usize,
    #[serde(rename = "T_max")]
    pub t_max: usize,
    pub tau: f64,
    pub disable_pci: bool,
    pub disable_dar: bool,
    pub disable_atu: bool,
    pub mode: Mode,
    pub max_tool_calls: usize,
    pub transcript_budget: usize,
}

impl Default for OrchestratorSection {
    fn default() -> Self {
        let d = OrchestratorConfig::default();
        Self {
            list_size: d.list_size,
            t_max: d.t_max,
            tau: d.tau,
            disable_pci: d.disable_pci,
            disable_dar: d.disable_dar,
            disable_atu: d.disable_atu,
            mode: d.mode,
            max_tool_calls: d.max_tool_calls,
            transcript_budget: d.transcript_budget,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    #[default]
    Scripted,
    Chat,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub kind: PolicyKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatSection {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: usize,
    pub timeout_s: f64,
    pub max_retries: u32,
    /// Estimated-token ceiling checked before each request.
    pub context_tokens: Option<usize>,
    /// Let the model draft and judge instead of the scripted rules.
    pub judge: bool,
}

impl Default for ChatSection {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            temperature: 0.3,
            max_tokens: 1024,
            timeout_s: 60.0,
            max_retries: 3,
            context_tokens: Some(100_000),
            judge: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    #[default]
    Deterministic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub provider: EmbeddingKind,
    pub base_url: String,
    pub model: String,
    pub dim: usize,
    pub timeout_s: f64,
    pub max_retries: u32,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            provider: EmbeddingKind::Deterministic,
            base_url: "https://api.openai.com/v1".into(),
            model: "text-embedding-3-small".into(),
            dim: 64,
            timeout_s: 30.0,
            max_retries: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselinesSection {
    pub rerank_pool: usize,
}

impl Default for BaselinesSection {
    fn default() -> Self {
        Self { rerank_pool: crate::baselines::DEFAULT_RERANK_POOL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Raw item records (input to `ingest`).
    pub items: Option<PathBuf>,
    /// Raw interaction records (input to `ingest`).
    pub interactions: Option<PathBuf>,
    /// Holds the validated catalog, the vector index and transcripts.
    pub workdir: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { items: None, interactions: None, workdir: PathBuf::from("macf-data") }
    }
}

impl DataSection {
    pub fn catalog_items(&self) -> PathBuf {
        self.workdir.join("catalog").join("items.jsonl")
    }

    pub fn catalog_interactions(&self) -> PathBuf {
        self.workdir.join("catalog").join("interactions.jsonl")
    }

    pub fn index_path(&self) -> PathBuf {
        self.workdir.join("index.jsonl")
    }

    pub fn transcript_dir(&self) -> PathBuf {
        self.workdir.join("transcripts")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub bind: String,
    /// Events a slow client may fall behind by before its session fails.
    pub queue_capacity: usize,
    /// Longest wait for a stream consumer or for the next event.
    pub stall_timeout_s: f64,
    pub shutdown_grace_s: f64,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            queue_capacity: 256,
            stall_timeout_s: 30.0,
            shutdown_grace_s: 10.0,
        }
    }
}

impl ServerSection {
    pub fn stall_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.stall_timeout_s.max(0.001))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub retrieval: RetrievalSection,
    pub orchestrator: OrchestratorSection,
    pub policy: PolicySection,
    pub chat: ChatSection,
    pub embedding: EmbeddingSection,
    pub baselines: BaselinesSection,
    pub data: DataSection,
    pub server: ServerSection,
}

const SECTIONS: [&str; 8] = ["retrieval", "orchestrator", "policy", "chat", "embedding", "baselines", "data", "server"];

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Loads a file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.data.resolve_against(base);
        }
        Ok(config)
    }

    pub fn orchestrator_config(&self) -> OrchestratorConfig {
        let o = &self.orchestrator;
        OrchestratorConfig {
            n: self.retrieval.n,
            k: self.retrieval.k,
            list_size: o.list_size,
            t_max: o.t_max,
            tau: o.tau,
            disable_pci: o.disable_pci,
            disable_dar: o.disable_dar,
            disable_atu: o.disable_atu,
            mode: o.mode,
            max_tool_calls: o.max_tool_calls,
            transcript_budget: o.transcript_budget,
            history_window: self.retrieval.history_window,
            seed: self.policy.seed,
        }
    }

    /// Merges JSON overrides. Keys are either section names holding an
    /// object, or bare keys that exist in exactly one section.
    pub fn with_overrides(&self, overrides: &Value) -> Result<Self, ConfigError> {
        let Some(map) = overrides.as_object() else {
            return if overrides.is_null() {
                Ok(self.clone())
            } else {
                Err(ConfigError::Parse("config_overrides must be an object".into()))
            };
        };
        let mut doc = serde_json::to_value(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (key, value) in map {
            if SECTIONS.contains(&key.as_str()) {
                let Some(fields) = value.as_object() else {
                    return Err(ConfigError::Parse(format!("section {key} must be an object")));
                };
                for (k, v) in fields {
                    if doc[key.as_str()].get(k).is_none() {
                        return Err(ConfigError::UnknownKey(format!("{key}.{k}")));
                    }
                    doc[key.as_str()][k.as_str()] = v.clone();
                }
                continue;
            }
            let owners: Vec<&str> = SECTIONS.iter().copied().filter(|s| doc[*s].get(key).is_some()).collect();
            match owners.as_slice() {
                [section] => doc[*section][key.as_str()] = value.clone(),
                [] => return Err(ConfigError::UnknownKey(key.clone())),
                _ => return Err(ConfigError::Parse(format!("key {key} is ambiguous; name its section"))),
            }
        }
        serde_json::from_value(doc).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// The config with the JSON form used in reports.
    pub fn snapshot(&self) -> Value {
        serde_json::to_value(self).unwrap_or(Value::Null)
    }
}

impl DataSection {
    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.workdir);
        if let Some(p) = self.items.as_mut() {
            fix(p);
        }
        if let Some(p) = self.interactions.as_mut() {
            fix(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_and_sections() {
        let c = AppConfig::from_toml(
            "[retrieval]\nn = 3\n[orchestrator]\nK = 8\nmode = \"user_only\"\n[policy]\nkind = \"scripted\"\nseed = 9\n",
        )
        .unwrap();
        let o = c.orchestrator_config();
        assert_eq!((o.n, o.k, o.list_size, o.t_max, o.seed), (3, 15, 8, 5, 9));
        assert_eq!(o.mode, Mode::UserOnly);
        assert_eq!(c.chat.temperature, 0.3);
        assert!(AppConfig::from_toml("[orchestrator]\nbogus = 1\n").is_err());
    }

    #[test]
    fn overrides_flat_and_nested() {
        let base = AppConfig::default();
        let c = base.with_overrides(&json!({"K": 5, "disable_atu": true, "retrieval": {"n": 2}})).unwrap();
        assert_eq!(c.orchestrator.list_size, 5);
        assert!(c.orchestrator.disable_atu);
        assert_eq!(c.retrieval.n, 2);
        assert!(matches!(base.with_overrides(&json!({"nope": 1})), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(base.with_overrides(&json!({"base_url": "x"})), Err(ConfigError::Parse(_))));
        assert_eq!(base.with_overrides(&Value::Null).unwrap(), base);
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[data]\nworkdir = \"work\"\nitems = \"raw/items.jsonl\"\n").unwrap();
        let c = AppConfig::load(&path).unwrap();
        assert_eq!(c.data.workdir, dir.path().join("work"));
        assert_eq!(c.data.items.unwrap(), dir.path().join("raw/items.jsonl"));
    }
}
