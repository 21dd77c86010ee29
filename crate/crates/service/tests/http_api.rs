use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::ConnectInfo;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use reservoirchat_core::config::{AppConfig, RateLimitSettings};
use reservoirchat_core::model_client::{MockScript, ModelProvider, ScriptedMock};
use reservoirchat_core::pipeline::{build_graph, ingest, load_manifest, BuildOptions, IngestOptions};
use reservoirchat_core::prompts::PromptTemplates;
use reservoirchat_service::usage::{quarantine_path, UsageLog};
use reservoirchat_service::{router, AppState, ServiceOptions};
use serde_json::{json, Value};
use tower::ServiceExt;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn config() -> AppConfig {
    AppConfig::load(Some(&fixtures().join("config.toml"))).unwrap()
}

fn fixture_mock() -> Arc<ScriptedMock> {
    Arc::new(ScriptedMock::new(MockScript::load(&fixtures().join("mock_script.json")).unwrap()))
}

fn build_into(out: &Path) {
    let cfg = config();
    let mock = fixture_mock();
    let mut opts = IngestOptions::from_config(&cfg);
    opts.qa_file = Some(fixtures().join("qa.jsonl"));
    ingest(&fixtures().join("corpus"), &opts, mock.as_ref(), out).unwrap();
    build_graph(out, &BuildOptions::from_config(&cfg), mock.as_ref(), &PromptTemplates::default()).unwrap();
}

fn state(out: &Path, provider: Arc<dyn ModelProvider>, rate_limit: RateLimitSettings) -> AppState {
    let mut opts = ServiceOptions::from_config(&config(), out);
    opts.rate_limit = rate_limit;
    AppState::new(opts, provider, PromptTemplates::default(), config().query).unwrap()
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let mut req = req.body(body).unwrap();
    req.extensions_mut().insert(ConnectInfo(SocketAddr::from(([127, 0, 0, 1], 4000))));
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn unbuilt_service_then_reload() {
    let out = tempfile::tempdir().unwrap();
    let app = router(state(out.path(), fixture_mock(), RateLimitSettings::default()));

    let (status, health) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["built"], json!(false));
    let (status, body) = call(&app, "POST", "/chat", Some(json!({"question": "What is a reservoir?"}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"], "NotBuilt");
    assert_eq!(call(&app, "GET", "/graph/summary", None).await.0, StatusCode::SERVICE_UNAVAILABLE);

    build_into(out.path());
    let (status, body) = call(&app, "POST", "/admin/reload", None).await;
    assert_eq!((status, body["built"].clone()), (StatusCode::OK, json!(true)));
    assert_eq!(call(&app, "GET", "/health", None).await.1["built"], json!(true));
}

#[tokio::test]
async fn chat_round_trip_with_history_and_isolation() {
    let out = tempfile::tempdir().unwrap();
    build_into(out.path());
    let mock = fixture_mock();
    let app = router(state(out.path(), mock.clone(), RateLimitSettings::default()));

    let (status, first) = call(&app, "POST", "/chat", Some(json!({"question": "What is the spectral radius?"}))).await;
    assert_eq!(status, StatusCode::OK, "{first}");
    let sid = first["session_id"].as_str().unwrap().to_string();
    assert_eq!(first["answer"], "The spectral radius is the largest absolute eigenvalue of the reservoir weight matrix.");
    assert_eq!(first["mode"], "local");
    assert!(first["trace"].as_array().unwrap().iter().any(|t| t["id"] == "SPECTRAL RADIUS"));

    // A second session interleaves with the first.
    let (_, other) = call(&app, "POST", "/chat", Some(json!({"question": "How is the leak rate chosen?"}))).await;
    let other_sid = other["session_id"].as_str().unwrap().to_string();
    assert_ne!(other_sid, sid);

    let (status, _) = call(&app, "POST", "/chat", Some(json!({"session_id": sid, "question": "And how do I tune it?"}))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call(&app, "POST", "/chat", Some(json!({"session_id": other_sid, "question": "Tell me more", "mode": "rag"}))).await;
    assert_eq!(status, StatusCode::OK);

    let prompts: Vec<String> = mock.calls().iter().map(|c| c.last_content().to_string()).collect();
    let prompt_for = |q: &str| prompts.iter().find(|p| p.contains(&format!("---Question---\n{q}"))).unwrap().clone();
    let tune = prompt_for("And how do I tune it?");
    assert!(tune.contains("user: What is the spectral radius?"), "{tune}");
    assert!(!tune.contains("leak rate chosen"), "turns leaked across sessions");
    let more = prompt_for("Tell me more");
    assert!(more.contains("user: How is the leak rate chosen?"));
    assert!(!more.contains("spectral radius?"), "turns leaked across sessions");
    assert!(prompt_for("What is the spectral radius?").contains("(no previous messages)"));

    let (status, session) = call(&app, "GET", &format!("/sessions/{sid}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(session["turns"].as_array().unwrap().len(), 4);

    let events = UsageLog::read_all(&out.path().join("usage.jsonl")).unwrap();
    assert_eq!(events.len(), 4, "one event per assistant turn");
    assert!(chrono::DateTime::parse_from_rfc3339(&events[0].timestamp).is_ok());
    assert_eq!(events[0].session_id, sid);
}

#[tokio::test]
async fn error_statuses() {
    let out = tempfile::tempdir().unwrap();
    build_into(out.path());
    let app = router(state(out.path(), fixture_mock(), RateLimitSettings::default()));
    let (status, body) = call(&app, "POST", "/chat", Some(json!({"question": "   "}))).await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::BAD_REQUEST, Some("EmptyQuestion")));
    assert_eq!(call(&app, "GET", "/reports/unknown", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/reports/999", None).await.0, StatusCode::NOT_FOUND);
    let (status, report) = call(&app, "GET", "/reports/0", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["community_id"], 0);
    drop(app); // releases the session store file

    let failing: Arc<dyn ModelProvider> = Arc::new(ScriptedMock::with_default("<|ERROR|> 503 model overloaded"));
    let app = router(state(out.path(), failing, RateLimitSettings::default()));
    let (status, body) = call(&app, "POST", "/chat", Some(json!({"question": "What is a reservoir?"}))).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(body["error"], "ProviderError");
    assert_eq!(body["provider_status"], 503);
}

#[tokio::test]
async fn graph_views_match_manifest() {
    let out = tempfile::tempdir().unwrap();
    build_into(out.path());
    let manifest = load_manifest(out.path()).unwrap().unwrap();
    let app = router(state(out.path(), fixture_mock(), RateLimitSettings::default()));
    let (status, level0) = call(&app, "GET", "/graph/communities?level=0", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(level0.as_array().unwrap().len(), manifest.communities_per_level[0]);
    let (_, summary) = call(&app, "GET", "/graph/summary", None).await;
    assert_eq!(summary["entities"], manifest.entity_count);
    assert_eq!(summary["communities_per_level"], json!(manifest.communities_per_level));
    assert_eq!(summary["seed"], manifest.seed);
}

#[tokio::test]
async fn usage_log_recovers_after_crash() {
    let out = tempfile::tempdir().unwrap();
    build_into(out.path());
    {
        let app = router(state(out.path(), fixture_mock(), RateLimitSettings::default()));
        call(&app, "POST", "/chat", Some(json!({"question": "What is a reservoir?", "mode": "faq"}))).await;
    }
    let log = out.path().join("usage.jsonl");
    let before = std::fs::read(&log).unwrap();
    std::fs::write(&log, [before.clone(), b"{\"timestamp\":\"20".to_vec()].concat()).unwrap();

    let app = router(state(out.path(), fixture_mock(), RateLimitSettings::default()));
    assert_eq!(std::fs::read(&log).unwrap(), before, "only the torn line is removed");
    assert_eq!(std::fs::read_to_string(quarantine_path(&log)).unwrap(), "{\"timestamp\":\"20\n");
    let (status, _) = call(&app, "POST", "/chat", Some(json!({"question": "Who develops ReservoirPy?", "mode": "faq"}))).await;
    assert_eq!(status, StatusCode::OK);
    let events = UsageLog::read_all(&log).unwrap();
    assert_eq!(events.len(), 2);
    assert!(std::fs::read(&log).unwrap().starts_with(&before), "append-only");
}

#[tokio::test]
async fn rate_limit_applies_per_client() {
    let out = tempfile::tempdir().unwrap();
    let limits = RateLimitSettings { enabled: true, burst: 1, per_second: 0.0 };
    let app = router(state(out.path(), fixture_mock(), limits));
    assert_eq!(call(&app, "GET", "/graph/summary", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(call(&app, "GET", "/graph/summary", None).await.0, StatusCode::TOO_MANY_REQUESTS);
    assert_eq!(call(&app, "GET", "/health", None).await.0, StatusCode::OK, "health is exempt");
}
