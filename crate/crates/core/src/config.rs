//! Application configuration: one TOML file, every key overridable from the
//! environment as `RCHAT__<SECTION>__<KEY>=<value>`.
//!
//! Override values are parsed as TOML literals when possible (`0.5`, `true`,
//! `["a","b"]`) and taken as plain strings otherwise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmark::{DEFAULT_BENCH_TEMPERATURE, DEFAULT_REPETITIONS};
use crate::corpus::{DEFAULT_CHUNK_OVERLAP, DEFAULT_CHUNK_SIZE};
use crate::embedding_index::DEFAULT_EMBED_BATCH;
use crate::knowledge_graph::{
    LeidenConfig, DEFAULT_MAX_GLEANINGS, DEFAULT_REPORT_LEVELS, DEFAULT_RESOLUTION, DEFAULT_SUMMARY_CHAR_BUDGET,
};
use crate::model_client::ProviderConfig;
use crate::query_engine::QueryConfig;

pub const ENV_PREFIX: &str = "RCHAT__";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Http,
    Mock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderSettings {
    pub kind: ProviderKind,
    /// Script for the `mock` kind; without one the mock answers "NO".
    pub mock_script: Option<PathBuf>,
    #[serde(flatten)]
    pub http: ProviderConfig,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        Self { kind: ProviderKind::Http, mock_script: None, http: ProviderConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSettings {
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    /// Glob patterns marking the code-augmentation documents.
    pub code_patterns: Vec<String>,
    pub embed_batch: usize,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            chunk_overlap: DEFAULT_CHUNK_OVERLAP,
            code_patterns: vec!["codes.md".into(), "*.py".into(), "*.ipynb".into()],
            embed_batch: DEFAULT_EMBED_BATCH,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphSettings {
    pub max_gleanings: usize,
    pub resolution: f64,
    pub seed: u64,
    pub max_levels: usize,
    pub report_levels: Vec<usize>,
    pub summary_char_budget: usize,
    pub report_context_chars: usize,
    pub extract_workers: usize,
    pub temperature: f64,
}

impl Default for GraphSettings {
    fn default() -> Self {
        Self {
            max_gleanings: DEFAULT_MAX_GLEANINGS,
            resolution: DEFAULT_RESOLUTION,
            seed: LeidenConfig::default().seed,
            max_levels: LeidenConfig::default().max_levels,
            report_levels: DEFAULT_REPORT_LEVELS.to_vec(),
            summary_char_budget: DEFAULT_SUMMARY_CHAR_BUDGET,
            report_context_chars: 8000,
            extract_workers: 4,
            temperature: crate::model_client::DEFAULT_TEMPERATURE,
        }
    }
}

impl GraphSettings {
    pub fn leiden(&self) -> LeidenConfig {
        LeidenConfig {
            resolution: self.resolution,
            seed: self.seed,
            max_levels: self.max_levels,
            ..LeidenConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    pub repetitions: u32,
    pub temperature: f64,
    pub workers: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { repetitions: DEFAULT_REPETITIONS, temperature: DEFAULT_BENCH_TEMPERATURE, workers: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateLimitSettings {
    pub enabled: bool,
    pub burst: u32,
    pub per_second: f64,
}

impl Default for RateLimitSettings {
    fn default() -> Self {
        Self { enabled: false, burst: 20, per_second: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceSettings {
    pub listen: String,
    /// Defaults to `<out>/usage.jsonl`.
    pub usage_log: Option<PathBuf>,
    /// Defaults to `<out>/sessions.redb`.
    pub session_store: Option<PathBuf>,
    pub session_ttl_secs: u64,
    pub rate_limit: RateLimitSettings,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            usage_log: None,
            session_store: None,
            session_ttl_secs: 24 * 3600,
            rate_limit: RateLimitSettings::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    /// Directory with `<name>.txt` files overriding the built-in prompts.
    pub templates_dir: Option<PathBuf>,
    pub provider: ProviderSettings,
    pub corpus: CorpusSettings,
    pub graph: GraphSettings,
    pub query: QueryConfig,
    pub bench: BenchSettings,
    pub service: ServiceSettings,
}

impl AppConfig {
    /// Reads `path` (if any), then applies `RCHAT__` variables from the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?,
            None => String::new(),
        };
        let mut config = Self::from_toml_with_env(&text, std::env::vars())?;
        if let Some(base) = path.and_then(Path::parent) {
            config.resolve_relative(base);
        }
        Ok(config)
    }

    /// Makes relative file paths relative to `base` (the config file's directory).
    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut().filter(|p| p.is_relative()) {
                *path = base.join(&*path);
            }
        };
        fix(&mut self.templates_dir);
        fix(&mut self.provider.mock_script);
        fix(&mut self.provider.http.trace_log);
        fix(&mut self.service.usage_log);
        fix(&mut self.service.session_store);
    }

    pub fn from_toml_with_env(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        let overrides: BTreeMap<String, String> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        for (key, value) in overrides {
            let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
            if path.iter().any(String::is_empty) {
                return Err(ConfigError::Invalid(format!("malformed override variable {key}")));
            }
            set_path(&mut root, &path, parse_literal(&value))?;
        }
        let config: AppConfig = toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.corpus.chunk_size == 0 || self.corpus.chunk_overlap >= self.corpus.chunk_size {
            return Err(ConfigError::Invalid(format!(
                "InvalidChunkParams: size {} must exceed overlap {}",
                self.corpus.chunk_size, self.corpus.chunk_overlap
            )));
        }
        if !(self.graph.resolution > 0.0) {
            return Err(ConfigError::Invalid("graph.resolution must be positive".into()));
        }
        if self.bench.repetitions == 0 {
            return Err(ConfigError::Invalid("bench.repetitions must be at least 1".into()));
        }
        if self.query.top_k == 0 {
            return Err(ConfigError::Invalid("query.top_k must be at least 1".into()));
        }
        self.provider.http.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), ConfigError> {
    let (last, parents) = path.split_last().expect("non-empty override path");
    let mut current = table;
    for part in parents {
        let entry = current.entry(part.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("override path crosses non-table key {part}")))?;
    }
    current.insert(last.clone(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_are_valid() {
        let c = AppConfig::from_toml_with_env("", env(&[])).unwrap();
        assert_eq!(c.corpus.chunk_size, 1200);
        assert_eq!(c.query.chunk_threshold, 0.75);
        assert_eq!(c.provider.kind, ProviderKind::Http);
        assert_eq!(c.graph.report_levels, vec![0, 1]);
    }

    #[test]
    fn file_then_env() {
        let text = "[provider]\nkind = \"mock\"\nmock_script = \"m.json\"\nmax_retries = 5\n[query]\ntop_k = 3\n";
        let c = AppConfig::from_toml_with_env(
            text,
            env(&[("RCHAT__QUERY__TOP_K", "7"), ("RCHAT__SERVICE__LISTEN", "0.0.0.0:9000"), ("OTHER", "x"), ("RCHAT__CORPUS__CODE_PATTERNS", "[\"*.rs\"]")]),
        )
        .unwrap();
        assert_eq!(c.provider.kind, ProviderKind::Mock);
        assert_eq!(c.provider.http.max_retries, 5);
        assert_eq!(c.query.top_k, 7);
        assert_eq!(c.service.listen, "0.0.0.0:9000");
        assert_eq!(c.corpus.code_patterns, vec!["*.rs"]);
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("app.toml");
        std::fs::write(&path, "templates_dir = \"/abs/t\"\n[provider]\nmock_script = \"m.json\"\n").unwrap();
        let c = AppConfig::load(Some(&path)).unwrap();
        assert_eq!(c.provider.mock_script, Some(dir.path().join("m.json")));
        assert_eq!(c.templates_dir, Some(PathBuf::from("/abs/t")));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(AppConfig::from_toml_with_env("[corpus]\nchunk_size = 10\nchunk_overlap = 10\n", env(&[])).is_err());
        assert!(AppConfig::from_toml_with_env("", env(&[("RCHAT__GRAPH__RESOLUTION", "0")])).is_err());
        assert!(AppConfig::from_toml_with_env("[query\n", env(&[])).is_err());
        assert!(AppConfig::from_toml_with_env("", env(&[("RCHAT__QUERY__TOP_K", "many")])).is_err());
    }
}
