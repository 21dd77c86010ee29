//! Question answering over the built artifacts.
//!
//! Four modes share one [`Engine`]: `faq` returns a stored answer by
//! embedding similarity without generation, `rag` packs retrieved chunks,
//! `local` anchors on matched entities and expands through the graph, and
//! `global` maps over community reports before a final synthesis call.

mod context;
mod engine;
mod global;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding_index::IndexError;
use crate::model_client::{ModelError, Role};

pub use context::{pack_sections, ContextSection, QueryContext};
pub use engine::{Engine, EngineParts, QaPair};
pub use global::{parse_partials, PartialAnswer};

pub const DEFAULT_HISTORY_WINDOW: usize = 5;
pub const DEFAULT_MAP_BATCH: usize = 10;
pub const DEFAULT_CODE_KEYWORDS: [&str; 9] =
    ["code", "python", "import", "error", "traceback", "debug", "function", "script", "implement"];

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("NoMatch: no stored question is similar enough (best score {best:?})")]
    NoMatch { best: Option<f64> },
    #[error("NoRelevantCommunities: no community report was rated helpful for this question")]
    NoRelevantCommunities,
    #[error("mode {0} is unavailable: {1}")]
    Unavailable(Mode, String),
    #[error(transparent)]
    Provider(#[from] ModelError),
    #[error(transparent)]
    Index(IndexError),
}

impl From<IndexError> for QueryError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::Provider(m) => QueryError::Provider(m),
            other => QueryError::Index(other),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Faq,
    Rag,
    Local,
    Global,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Faq => "faq",
            Mode::Rag => "rag",
            Mode::Local => "local",
            Mode::Global => "global",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "faq" => Ok(Mode::Faq),
            "rag" => Ok(Mode::Rag),
            "local" => Ok(Mode::Local),
            "global" => Ok(Mode::Global),
            other => Err(format!("unknown mode {other:?} (expected faq, rag, local or global)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Code,
    Knowledge,
}

/// `Code` when the question carries code (backticks), a traceback marker,
/// or one of `keywords` as a whole word (case-insensitive).
pub fn classify_query(question: &str, keywords: &[String]) -> Result<QueryKind, QueryError> {
    if question.trim().is_empty() {
        return Err(QueryError::EmptyQuestion);
    }
    if question.contains('`') || question.contains("Traceback (most recent call last)") {
        return Ok(QueryKind::Code);
    }
    let lowered = question.to_lowercase();
    let is_code = lowered
        .split(|c: char| !c.is_alphanumeric() && c != '_')
        .any(|word| keywords.iter().any(|k| k.eq_ignore_ascii_case(word)))
        || lowered.lines().any(|l| l.trim_start().starts_with("file \"") || l.contains("error:"));
    Ok(if is_code { QueryKind::Code } else { QueryKind::Knowledge })
}

pub fn default_code_keywords() -> Vec<String> {
    DEFAULT_CODE_KEYWORDS.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Chunk,
    Entity,
    Relationship,
    Report,
    Qa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub source_kind: SourceKind,
    pub id: String,
    pub score: f64,
}

impl TraceEntry {
    pub fn new(source_kind: SourceKind, id: impl Into<String>, score: f64) -> Self {
        Self { source_kind, id: id.into(), score }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
    #[serde(default)]
    pub retrieval_trace: Vec<TraceEntry>,
}

impl ChatTurn {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into(), retrieval_trace: Vec::new() }
    }

    pub fn assistant(content: impl Into<String>, trace: Vec<TraceEntry>) -> Self {
        Self { role: Role::Assistant, content: content.into(), retrieval_trace: trace }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryConfig {
    pub top_k: usize,
    pub chunk_threshold: f64,
    pub entity_threshold: f64,
    pub faq_threshold: f64,
    pub context_budget: usize,
    pub code_budget: usize,
    pub code_top_k: usize,
    pub history_window: usize,
    pub map_batch: usize,
    pub reduce_budget: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub code_keywords: Vec<String>,
}

impl Default for QueryConfig {
    fn default() -> Self {
        use crate::embedding_index::{DEFAULT_THRESHOLD, DEFAULT_TOP_K};
        Self {
            top_k: DEFAULT_TOP_K,
            chunk_threshold: DEFAULT_THRESHOLD,
            entity_threshold: DEFAULT_THRESHOLD,
            faq_threshold: DEFAULT_THRESHOLD,
            context_budget: 8000,
            code_budget: 3000,
            code_top_k: 3,
            history_window: DEFAULT_HISTORY_WINDOW,
            map_batch: DEFAULT_MAP_BATCH,
            reduce_budget: 8000,
            temperature: crate::model_client::DEFAULT_TEMPERATURE,
            max_tokens: crate::model_client::DEFAULT_MAX_TOKENS,
            code_keywords: default_code_keywords(),
        }
    }
}

/// The last `window` turns rendered as `role: content` lines.
pub fn render_history(history: &[ChatTurn], window: usize) -> String {
    let start = history.len().saturating_sub(window);
    let lines: Vec<String> = history[start..].iter().map(|t| format!("{}: {}", t.role, t.content)).collect();
    if lines.is_empty() {
        "(no previous messages)".to_string()
    } else {
        lines.join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classify(q: &str) -> QueryKind {
        classify_query(q, &default_code_keywords()).unwrap()
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classify("Code me the initialization of a reservoir"), QueryKind::Code);
        assert_eq!(classify("What is an echo state network?"), QueryKind::Knowledge);
        assert_eq!(classify("why does `esn.fit` fail"), QueryKind::Code);
        assert_eq!(classify("Traceback (most recent call last):\n  ..."), QueryKind::Code);
        assert_eq!(classify("How do I IMPLEMENT feedback?"), QueryKind::Code);
        assert_eq!(classify("Explain the decoding of signals"), QueryKind::Knowledge, "substring of 'code' is not a word match");
        assert!(matches!(classify_query("  ", &[]), Err(QueryError::EmptyQuestion)));
    }

    #[test]
    fn history_window_keeps_last_turns() {
        let turns: Vec<ChatTurn> = (0..8).map(|i| ChatTurn::user(format!("m{i}"))).collect();
        let text = render_history(&turns, 5);
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("user: m3") && text.ends_with("user: m7"));
        assert_eq!(render_history(&turns[..2], 5).lines().count(), 2);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("Global".parse::<Mode>().unwrap(), Mode::Global);
        assert!("fast".parse::<Mode>().is_err());
        assert_eq!(Mode::Local.to_string(), "local");
    }
}
