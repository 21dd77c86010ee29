use std::fs::{File, OpenOptions};
use std::io::Write;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use rand::Rng;
use serde_json::{json, Value};

use super::{CompletionRequest, ModelError, ModelProvider, ProviderConfig, RequestLimiter};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Connection(String),
}

/// Minimal blocking HTTP surface, swappable in tests.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value, timeout: Duration)
        -> Result<HttpReply, TransportError>;

    fn get(&self, url: &str, api_key: Option<&str>, timeout: Duration) -> Result<HttpReply, TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Self {
        Self {
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Default for ReqwestTransport {
    fn default() -> Self {
        Self::new()
    }
}

fn classify(err: reqwest::Error) -> TransportError {
    if err.is_timeout() {
        TransportError::Timeout
    } else {
        TransportError::Connection(err.to_string())
    }
}

impl Transport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let mut req = self.client.post(url).timeout(timeout).json(body);
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(classify)?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(classify)?;
        Ok(HttpReply { status, body })
    }

    fn get(&self, url: &str, api_key: Option<&str>, timeout: Duration) -> Result<HttpReply, TransportError> {
        let mut req = self.client.get(url).timeout(timeout);
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(classify)?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(classify)?;
        Ok(HttpReply { status, body })
    }
}

/// Provider for OpenAI-compatible `/chat/completions` and `/embeddings` endpoints
/// (LM Studio, vLLM, llama.cpp server, hosted APIs).
pub struct HttpProvider {
    cfg: ProviderConfig,
    api_key: Option<String>,
    transport: Box<dyn Transport>,
    limiter: RequestLimiter,
    trace: Option<Mutex<File>>,
}

impl HttpProvider {
    pub fn new(cfg: ProviderConfig) -> Result<Self, ModelError> {
        Self::with_transport(cfg, Box::new(ReqwestTransport::new()))
    }

    pub fn with_transport(cfg: ProviderConfig, transport: Box<dyn Transport>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let trace = match &cfg.trace_log {
            Some(path) => Some(Mutex::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| ModelError::Transport(format!("cannot open trace log: {e}")))?,
            )),
            None => None,
        };
        Ok(Self {
            api_key: cfg.resolved_api_key(),
            limiter: RequestLimiter::new(cfg.max_in_flight),
            cfg,
            transport,
            trace,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path)
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.cfg.backoff_base_ms as f64 * 2f64.powi(attempt as i32);
        let jitter = rand::thread_rng().gen_range(0.8..=1.2);
        Duration::from_secs_f64(base * jitter / 1000.0)
    }

    /// POSTs `body`, retrying timeouts, connection failures, 429 and 5xx.
    fn post_with_retry(&self, path: &str, body: &Value) -> Result<String, ModelError> {
        let url = self.url(path);
        let _permit = self.limiter.acquire();
        let mut attempt = 0u32;
        loop {
            let result = self
                .transport
                .post_json(&url, self.api_key.as_deref(), body, self.cfg.timeout());
            let failure = match result {
                Ok(reply) if (200..300).contains(&reply.status) => return Ok(reply.body),
                Ok(reply) if reply.status == 429 || reply.status >= 500 => ModelError::ProviderError {
                    status: reply.status,
                    body: reply.body,
                },
                Ok(reply) => {
                    return Err(ModelError::ProviderError {
                        status: reply.status,
                        body: reply.body,
                    })
                }
                Err(TransportError::Timeout) => ModelError::Timeout,
                Err(TransportError::Connection(msg)) => ModelError::Transport(msg),
            };
            attempt += 1;
            if attempt > self.cfg.max_retries {
                return Err(ModelError::ExhaustedRetries {
                    attempts: attempt,
                    last: Box::new(failure),
                });
            }
            tracing::warn!(%url, attempt, error = %failure, "retrying provider request");
            std::thread::sleep(self.backoff(attempt - 1));
        }
    }

    fn trace(&self, kind: &str, request: &Value, reply: &Value) {
        if let Some(file) = &self.trace {
            let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
            let line = json!({ "ts": ts, "kind": kind, "request": request, "reply": reply });
            let mut f = file.lock();
            if let Err(e) = writeln!(f, "{line}") {
                tracing::warn!("trace log write failed: {e}");
            }
        }
    }
}

impl ModelProvider for HttpProvider {
    fn chat(&self, req: &CompletionRequest) -> Result<String, ModelError> {
        let model = if req.model_id.is_empty() { &self.cfg.chat_model_id } else { &req.model_id };
        let body = json!({
            "model": model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "stream": false,
        });
        let raw = self.post_with_retry("chat/completions", &body)?;
        let parsed: Value = serde_json::from_str(&raw).map_err(|e| ModelError::MalformedResponse(e.to_string()))?;
        let text = parsed
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| ModelError::MalformedResponse("missing choices[0].message.content".into()))?
            .to_string();
        self.trace("chat", &body, &json!(text));
        Ok(text)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ModelError> {
        let body = json!({ "model": self.cfg.embed_model_id, "input": texts });
        let raw = self.post_with_retry("embeddings", &body)?;
        let parsed: Value = serde_json::from_str(&raw).map_err(|e| ModelError::MalformedResponse(e.to_string()))?;
        let data = parsed
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ModelError::MalformedResponse("missing data array".into()))?;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).map(|i| i as usize).unwrap_or(pos);
            let vector = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| ModelError::MalformedResponse(format!("data[{pos}] has no embedding")))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| ModelError::MalformedResponse("non-numeric coordinate".into())))
                .collect::<Result<Vec<f64>, _>>()?;
            rows.push((index, vector));
        }
        rows.sort_by_key(|(i, _)| *i);
        self.trace("embed", &json!({ "model": self.cfg.embed_model_id, "count": texts.len() }), &json!(rows.len()));
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }

    fn chat_model_id(&self) -> &str {
        &self.cfg.chat_model_id
    }

    fn is_reachable(&self) -> bool {
        matches!(
            self.transport.get(&self.url("models"), self.api_key.as_deref(), Duration::from_secs(3)),
            Ok(HttpReply { status, .. }) if (200..300).contains(&status)
        )
    }
}
