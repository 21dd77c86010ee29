use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use reservoirchat_core::model_client::ModelError;
use reservoirchat_core::pipeline::PipelineError;
use reservoirchat_core::query_engine::QueryError;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("engine is not built; run ingest and build-graph, then reload")]
    NotBuilt,
    #[error("provider failure: {0}")]
    Provider(ModelError),
    #[error(transparent)]
    Query(QueryError),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("rate limit exceeded")]
    RateLimited,
    #[error("session store: {0}")]
    Store(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<QueryError> for ServiceError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::EmptyQuestion => ServiceError::EmptyQuestion,
            QueryError::Provider(m) => ServiceError::Provider(m),
            other => ServiceError::Query(other),
        }
    }
}

impl ServiceError {
    /// Stable machine-readable name used as the `error` field of JSON bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::EmptyQuestion => "EmptyQuestion",
            ServiceError::NotBuilt => "NotBuilt",
            ServiceError::Provider(_) => "ProviderError",
            ServiceError::Query(QueryError::NoMatch { .. }) => "NoMatch",
            ServiceError::Query(QueryError::NoRelevantCommunities) => "NoRelevantCommunities",
            ServiceError::Query(QueryError::Unavailable(..)) => "ModeUnavailable",
            ServiceError::Query(_) => "QueryError",
            ServiceError::NotFound(_) => "NotFound",
            ServiceError::RateLimited => "RateLimited",
            ServiceError::Store(_) | ServiceError::Io(_) | ServiceError::Pipeline(_) | ServiceError::Internal(_) => {
                "Internal"
            }
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::EmptyQuestion => StatusCode::BAD_REQUEST,
            ServiceError::NotBuilt => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Provider(_) => StatusCode::BAD_GATEWAY,
            ServiceError::Query(QueryError::Index(_)) => StatusCode::INTERNAL_SERVER_ERROR,
            ServiceError::Query(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::RateLimited => StatusCode::TOO_MANY_REQUESTS,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

fn provider_status(e: &ModelError) -> Option<u16> {
    match e {
        ModelError::ProviderError { status, .. } => Some(*status),
        ModelError::ExhaustedRetries { last, .. } => provider_status(last),
        _ => None,
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        let mut body = json!({ "error": self.kind(), "message": self.to_string() });
        if let ServiceError::Provider(e) = &self {
            body["provider_status"] = json!(provider_status(e));
        }
        (status, Json(body)).into_response()
    }
}
