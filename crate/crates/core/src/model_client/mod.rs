//! Chat-completion and embedding providers.
//!
//! Everything that talks to a language model goes through [`ModelProvider`].
//! [`HttpProvider`] speaks the common JSON chat-completions wire shape;
//! [`ScriptedMock`] is a pure, seeded stand-in used by tests and offline runs.

mod http;
mod mock;

use std::fmt;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::{HttpProvider, HttpReply, ReqwestTransport, Transport, TransportError};
pub use mock::{MockScript, ScriptRule, ScriptedMock, ERROR_MARKER};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const DEFAULT_CHAT_MODEL: &str = "Codestral-22B";
pub const DEFAULT_EMBED_MODEL: &str = "nomic-embed-text-v1.5";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("request timed out")]
    Timeout,
    #[error("provider error (status {status}): {body}")]
    ProviderError { status: u16, body: String },
    #[error("exhausted retries after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: Box<ModelError> },
    #[error("provider returned vectors of mismatched dimension ({expected} vs {found})")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_id: String,
}

impl CompletionRequest {
    /// Single user message at the default temperature.
    pub fn from_prompt(prompt: impl Into<String>) -> Self {
        Self {
            messages: vec![ChatMessage::user(prompt)],
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            model_id: String::new(),
        }
    }

    pub fn with_messages(messages: Vec<ChatMessage>) -> Self {
        Self { messages, ..Self::from_prompt("") }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.messages.is_empty() {
            return Err(ModelError::InvalidRequest("no messages".into()));
        }
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(ModelError::InvalidRequest(format!("temperature {} outside [0,1]", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(ModelError::InvalidRequest("max_tokens must be positive".into()));
        }
        for m in &self.messages {
            if m.role != Role::System && m.content.trim().is_empty() {
                return Err(ModelError::InvalidRequest(format!("empty {} message", m.role)));
            }
        }
        Ok(())
    }

    /// Content-only fingerprint: sha256 over roles and contents, hex encoded.
    /// Temperature and model id do not take part.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for m in &self.messages {
            hasher.update(m.role.to_string().as_bytes());
            hasher.update([0u8]);
            hasher.update(m.content.as_bytes());
            hasher.update([0x1eu8]);
        }
        hex(&hasher.finalize())
    }

    pub fn last_content(&self) -> &str {
        self.messages.last().map(|m| m.content.as_str()).unwrap_or("")
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub base_url: String,
    /// Literal key; takes precedence over `api_key_env`.
    pub api_key: Option<String>,
    pub api_key_env: Option<String>,
    pub chat_model_id: String,
    pub embed_model_id: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
    pub trace_log: Option<std::path::PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:1234/v1".into(),
            api_key: None,
            api_key_env: Some("RESERVOIRCHAT_API_KEY".into()),
            chat_model_id: DEFAULT_CHAT_MODEL.into(),
            embed_model_id: DEFAULT_EMBED_MODEL.into(),
            timeout_secs: 120.0,
            max_retries: 2,
            backoff_base_ms: 500,
            max_in_flight: 4,
            trace_log: None,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.timeout_secs > 0.0) {
            return Err(ModelError::InvalidRequest("timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(ModelError::InvalidRequest("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    pub fn resolved_api_key(&self) -> Option<String> {
        self.api_key
            .clone()
            .or_else(|| self.api_key_env.as_deref().and_then(|v| std::env::var(v).ok()))
            .filter(|k| !k.is_empty())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

/// A chat + embedding backend. Implementations must be shareable across threads.
pub trait ModelProvider: Send + Sync {
    fn chat(&self, req: &CompletionRequest) -> Result<String, ModelError>;

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ModelError>;

    fn chat_model_id(&self) -> &str;

    fn is_reachable(&self) -> bool {
        true
    }
}

/// Validates `req` and forwards it to the provider.
pub fn complete_chat(provider: &dyn ModelProvider, req: &CompletionRequest) -> Result<String, ModelError> {
    req.validate()?;
    provider.chat(req)
}

/// Embeds `texts`, checking the one-vector-per-input and equal-dimension contract.
pub fn embed_texts(provider: &dyn ModelProvider, texts: &[String]) -> Result<Vec<Vec<f64>>, ModelError> {
    if texts.is_empty() {
        return Err(ModelError::InvalidRequest("no texts to embed".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(ModelError::InvalidRequest(format!("text #{i} is empty")));
    }
    let vectors = provider.embed(texts)?;
    if vectors.len() != texts.len() {
        return Err(ModelError::MalformedResponse(format!(
            "expected {} vectors, got {}",
            texts.len(),
            vectors.len()
        )));
    }
    let dim = vectors[0].len();
    if dim == 0 {
        return Err(ModelError::DimensionMismatch { expected: 1, found: 0 });
    }
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(ModelError::DimensionMismatch { expected: dim, found: v.len() });
    }
    Ok(vectors)
}

/// Counting semaphore bounding in-flight provider requests.
pub struct RequestLimiter {
    available: Mutex<usize>,
    freed: Condvar,
}

impl RequestLimiter {
    pub fn new(limit: usize) -> Self {
        Self {
            available: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> LimiterPermit<'_> {
        let mut available = self.available.lock();
        while *available == 0 {
            self.freed.wait(&mut available);
        }
        *available -= 1;
        LimiterPermit { limiter: self }
    }
}

pub struct LimiterPermit<'a> {
    limiter: &'a RequestLimiter,
}

impl Drop for LimiterPermit<'_> {
    fn drop(&mut self) {
        *self.limiter.available.lock() += 1;
        self.limiter.freed.notify_one();
    }
}
