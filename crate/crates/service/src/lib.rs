//! HTTP API over a built engine: chat with persistent sessions, read-only
//! graph and report views, health, and an append-only usage log.
//!
//! The engine snapshot is loaded from an output directory written by the
//! CLI and swapped atomically on `POST /admin/reload`; requests already in
//! flight keep the snapshot they started with.

mod error;
pub mod rate_limit;
pub mod sessions;
pub mod usage;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{ConnectInfo, Path as UrlPath, Query, Request, State};
use axum::middleware::{self, Next};
use axum::response::Response;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{SecondsFormat, Utc};
use parking_lot::{Mutex, RwLock};
use reservoirchat_core::config::{AppConfig, RateLimitSettings};
use reservoirchat_core::model_client::ModelProvider;
use reservoirchat_core::pipeline::{
    load_engine, load_manifest, provider_from_config, templates_from_config, BuildManifest, PipelineError,
};
use reservoirchat_core::prompts::PromptTemplates;
use reservoirchat_core::query_engine::{ChatTurn, Engine, Mode, QueryConfig, TraceEntry};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use error::ServiceError;
use rate_limit::RateLimiter;
use sessions::{Session, SessionStore};
use usage::{UsageEvent, UsageLog};

/// One immutable build: the engine plus its manifest.
pub struct EngineState {
    pub engine: Engine,
    pub manifest: Option<BuildManifest>,
}

#[derive(Clone, Debug)]
pub struct ServiceOptions {
    pub out_dir: PathBuf,
    pub usage_log: PathBuf,
    pub session_store: PathBuf,
    pub session_ttl_secs: u64,
    pub rate_limit: RateLimitSettings,
}

impl ServiceOptions {
    pub fn from_config(cfg: &AppConfig, out_dir: &Path) -> Self {
        Self {
            out_dir: out_dir.to_path_buf(),
            usage_log: cfg.service.usage_log.clone().unwrap_or_else(|| out_dir.join("usage.jsonl")),
            session_store: cfg.service.session_store.clone().unwrap_or_else(|| out_dir.join("sessions.redb")),
            session_ttl_secs: cfg.service.session_ttl_secs,
            rate_limit: cfg.service.rate_limit.clone(),
        }
    }
}

struct Inner {
    engine: RwLock<Option<Arc<EngineState>>>,
    out_dir: PathBuf,
    provider: Arc<dyn ModelProvider>,
    templates: PromptTemplates,
    query: QueryConfig,
    sessions: SessionStore,
    usage: UsageLog,
    session_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    limiter: Option<RateLimiter>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// Opens the session store and usage log and loads the engine if the
    /// output directory holds a build. A missing build is not an error.
    pub fn new(
        opts: ServiceOptions,
        provider: Arc<dyn ModelProvider>,
        templates: PromptTemplates,
        query: QueryConfig,
    ) -> Result<Self, ServiceError> {
        let sessions = SessionStore::open(&opts.session_store, opts.session_ttl_secs)?;
        let (usage, _) = UsageLog::open(&opts.usage_log)?;
        let limiter = opts.rate_limit.enabled.then(|| RateLimiter::new(opts.rate_limit.burst, opts.rate_limit.per_second));
        let state = Self {
            inner: Arc::new(Inner {
                engine: RwLock::new(None),
                out_dir: opts.out_dir,
                provider,
                templates,
                query,
                sessions,
                usage,
                session_locks: Mutex::new(HashMap::new()),
                limiter,
            }),
        };
        state.reload()?;
        Ok(state)
    }

    pub fn from_config(cfg: &AppConfig, out_dir: &Path) -> Result<Self, ServiceError> {
        let provider = provider_from_config(cfg)?;
        let templates = templates_from_config(cfg)?;
        Self::new(ServiceOptions::from_config(cfg, out_dir), provider, templates, cfg.query.clone())
    }

    /// Re-reads the output directory and swaps the snapshot in. Returns
    /// whether an engine is now available.
    pub fn reload(&self) -> Result<bool, ServiceError> {
        let inner = &self.inner;
        let loaded = match load_engine(&inner.out_dir, inner.provider.clone(), inner.templates.clone(), inner.query.clone()) {
            Ok(engine) => Some(Arc::new(EngineState { engine, manifest: load_manifest(&inner.out_dir)? })),
            Err(PipelineError::NotBuilt(dir)) => {
                tracing::info!(dir = %dir.display(), "no build found; serving unbuilt");
                None
            }
            Err(e) => return Err(e.into()),
        };
        let built = loaded.is_some();
        *inner.engine.write() = loaded;
        Ok(built)
    }

    pub fn engine(&self) -> Option<Arc<EngineState>> {
        self.inner.engine.read().clone()
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.inner.sessions
    }

    pub fn usage_log_path(&self) -> &Path {
        self.inner.usage.path()
    }

    fn session_lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.inner.session_locks.lock().entry(id.to_string()).or_default().clone()
    }

    fn release_session_lock(&self, id: &str) {
        let mut locks = self.inner.session_locks.lock();
        if locks.get(id).is_some_and(|l| Arc::strong_count(l) == 1) {
            locks.remove(id);
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/chat", post(chat))
        .route("/sessions/:id", get(session))
        .route("/graph/summary", get(graph_summary))
        .route("/graph/communities", get(communities))
        .route("/reports/:id", get(report))
        .route("/health", get(health))
        .route("/admin/reload", post(reload))
        .layer(middleware::from_fn_with_state(state.clone(), rate_limit))
        .with_state(state)
}

/// Serves until Ctrl-C, purging expired sessions every ten minutes.
pub async fn serve(state: AppState, listen: &str) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    let purger = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(std::time::Duration::from_secs(600));
        loop {
            tick.tick().await;
            match purger.sessions().purge_expired(Utc::now().timestamp()) {
                Ok(n) if n > 0 => tracing::info!(removed = n, "expired sessions purged"),
                Ok(_) => {}
                Err(e) => tracing::warn!(error = %e, "session purge failed"),
            }
        }
    });
    axum::serve(listener, router(state).into_make_service_with_connect_info::<SocketAddr>())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn rate_limit(State(state): State<AppState>, request: Request, next: Next) -> Result<Response, ServiceError> {
    if let Some(limiter) = &state.inner.limiter {
        let ip = request.extensions().get::<ConnectInfo<SocketAddr>>().map(|c| c.0.ip());
        if let Some(ip) = ip {
            if request.uri().path() != "/health" && !limiter.check(ip, Instant::now()) {
                return Err(ServiceError::RateLimited);
            }
        }
    }
    Ok(next.run(request).await)
}

fn require_engine(state: &AppState) -> Result<Arc<EngineState>, ServiceError> {
    state.engine().ok_or(ServiceError::NotBuilt)
}

#[derive(Clone, Debug, Deserialize)]
pub struct ChatRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    pub question: String,
    #[serde(default)]
    pub mode: Option<Mode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub session_id: String,
    pub answer: String,
    pub mode: Mode,
    pub trace: Vec<TraceEntry>,
    pub latency_ms: u64,
}

async fn chat(State(state): State<AppState>, Json(req): Json<ChatRequest>) -> Result<Json<ChatResponse>, ServiceError> {
    if req.question.trim().is_empty() {
        return Err(ServiceError::EmptyQuestion);
    }
    let engine = require_engine(&state)?;
    let mode = req.mode.unwrap_or(Mode::Local);
    let session_id = req
        .session_id
        .filter(|s| !s.trim().is_empty())
        .unwrap_or_else(|| uuid::Uuid::new_v4().to_string());

    let lock = state.session_lock(&session_id);
    let guard = lock.lock().await;
    let started = Instant::now();
    let worker = state.clone();
    let id = session_id.clone();
    let result = tokio::task::spawn_blocking(move || -> Result<ChatResponse, ServiceError> {
        let inner = &worker.inner;
        let now = Utc::now();
        let mut session = inner.sessions.get(&id, now.timestamp())?.unwrap_or_else(|| Session::new(&id, now.timestamp()));
        let turn = engine.engine.answer(&req.question, mode, &session.turns)?;
        let latency_ms = started.elapsed().as_millis() as u64;

        session.turns.push(ChatTurn::user(&req.question));
        session.turns.push(turn.clone());
        session.last_active = now.timestamp();
        inner.sessions.put(&session)?;
        inner.usage.append(&UsageEvent {
            timestamp: now.to_rfc3339_opts(SecondsFormat::Millis, true),
            session_id: id.clone(),
            mode,
            question: req.question.clone(),
            answer: turn.content.clone(),
            latency_ms,
            trace_ids: turn.retrieval_trace.iter().map(|t| t.id.clone()).collect(),
        })?;
        Ok(ChatResponse { session_id: id, answer: turn.content, mode, trace: turn.retrieval_trace, latency_ms })
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()));
    drop(guard);
    drop(lock);
    state.release_session_lock(&session_id);
    Ok(Json(result??))
}

async fn session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<Session>, ServiceError> {
    state
        .sessions()
        .get(&id, Utc::now().timestamp())?
        .map(Json)
        .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
}

fn communities_per_level(engine: &Engine) -> Vec<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for c in &engine.parts().communities {
        *counts.entry(c.level).or_default() += 1;
    }
    counts.into_values().collect()
}

async fn graph_summary(State(state): State<AppState>) -> Result<Json<Value>, ServiceError> {
    let snapshot = require_engine(&state)?;
    let parts = snapshot.engine.parts();
    let manifest = snapshot.manifest.as_ref();
    Ok(Json(json!({
        "entities": parts.graph.entities.len(),
        "relationships": parts.graph.relationships.len(),
        "communities_per_level": communities_per_level(&snapshot.engine),
        "reports": parts.reports.len(),
        "chunks": parts.chunk_kinds.len(),
        "seed": manifest.map(|m| m.seed),
        "template_version": manifest.map(|m| m.template_version.clone()),
        "modularity": manifest.map(|m| m.modularity),
    })))
}

#[derive(Deserialize)]
struct LevelQuery {
    #[serde(default)]
    level: usize,
}

async fn communities(State(state): State<AppState>, Query(q): Query<LevelQuery>) -> Result<Json<Vec<Value>>, ServiceError> {
    let snapshot = require_engine(&state)?;
    let engine = &snapshot.engine;
    Ok(Json(
        engine
            .parts()
            .communities
            .iter()
            .filter(|c| c.level == q.level)
            .map(|c| {
                let report = engine.report(c.community_id);
                json!({
                    "community_id": c.community_id,
                    "level": c.level,
                    "parent": c.parent,
                    "members": c.members,
                    "title": report.map(|r| r.title.clone()),
                    "rank": report.map(|r| r.rank),
                })
            })
            .collect(),
    ))
}

async fn report(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ServiceError> {
    let snapshot = require_engine(&state)?;
    let report = id
        .parse::<u32>()
        .ok()
        .and_then(|n| snapshot.engine.report(n))
        .ok_or_else(|| ServiceError::NotFound(format!("community {id}")))?;
    Ok(Json(serde_json::to_value(report).map_err(|e| ServiceError::Internal(e.to_string()))?))
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    let snapshot = state.engine();
    let provider = state.inner.provider.clone();
    let reachable = tokio::task::spawn_blocking(move || provider.is_reachable()).await.unwrap_or(false);
    let manifest = snapshot.as_ref().and_then(|s| s.manifest.as_ref());
    Json(json!({
        "built": snapshot.is_some(),
        "provider_reachable": reachable,
        "chat_model": state.inner.provider.chat_model_id(),
        "seed": manifest.map(|m| m.seed),
        "template_version": manifest.map(|m| m.template_version.clone()),
    }))
}

async fn reload(State(state): State<AppState>) -> Result<Json<Value>, ServiceError> {
    let worker = state.clone();
    let built = tokio::task::spawn_blocking(move || worker.reload())
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(json!({ "built": built })))
}
