//! HTTP service. Each endpoint maps onto one [`App`] operation.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rahore_core::engine::EngineError;
use rahore_core::prompt::Query;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use crate::app::{App, AppError};

/// Shared service state: the app plus a maintenance flag set while the cache
/// is warming or the corpus is reloading.
#[derive(Debug, Clone)]
pub struct ServiceState {
    app: Arc<App>,
    maintenance: Arc<AtomicBool>,
}

impl ServiceState {
    pub fn new(app: Arc<App>) -> Self {
        Self {
            app,
            maintenance: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn app(&self) -> &Arc<App> {
        &self.app
    }

    /// Holds the maintenance flag until the guard drops. `None` if another
    /// maintenance task already holds it.
    pub fn begin_maintenance(&self) -> Option<MaintenanceGuard> {
        self.maintenance
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| MaintenanceGuard(self.maintenance.clone()))
    }

    fn available(&self) -> Result<(), ApiError> {
        if self.maintenance.load(Ordering::Acquire) {
            Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "warming up or reloading; retry shortly",
            ))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug)]
pub struct MaintenanceGuard(Arc<AtomicBool>);

impl Drop for MaintenanceGuard {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<AppError> for ApiError {
    fn from(e: AppError) -> Self {
        let status = match &e {
            AppError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            AppError::Engine(EngineError::Backend(_) | EngineError::PartialFailure { .. }) => {
                StatusCode::BAD_GATEWAY
            }
            AppError::Engine(_) => StatusCode::UNPROCESSABLE_ENTITY,
            AppError::Dataset(_) | AppError::Setup(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

/// Any body that is not the expected JSON shape is a 400.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))
}

/// A structured query object, or a flattened dialogue string.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum QueryInput {
    Structured(Query),
    Text(String),
}

impl QueryInput {
    fn into_query(self, app: &App) -> Query {
        match self {
            QueryInput::Structured(q) => q,
            QueryInput::Text(t) => Query::from_flattened("query", &t, &app.config().roles),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrieveRequest {
    query: QueryInput,
    k: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreRequest {
    query: QueryInput,
    doc_id: String,
}

async fn retrieve(State(s): State<ServiceState>, body: Bytes) -> Result<Response, ApiError> {
    s.available()?;
    let req: RetrieveRequest = parse_body(&body)?;
    let k = req.k.unwrap_or(s.app.config().default_k);
    if k == 0 {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "k must be >= 1",
        ));
    }
    let query = req.query.into_query(&s.app);
    let result = s.app.retrieve(&query, k).await?;
    Ok(Json(result).into_response())
}

async fn score(State(s): State<ServiceState>, body: Bytes) -> Result<Response, ApiError> {
    s.available()?;
    let req: ScoreRequest = parse_body(&body)?;
    let query = req.query.into_query(&s.app);
    let score = s.app.score(&query, &req.doc_id).await?;
    Ok(Json(score).into_response())
}

async fn warm(State(s): State<ServiceState>) -> Result<Response, ApiError> {
    let _guard = s.begin_maintenance().ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "maintenance already in progress",
        )
    })?;
    let summary = s.app.warm().await?;
    Ok(Json(summary).into_response())
}

async fn reload(State(s): State<ServiceState>) -> Result<Response, ApiError> {
    let _guard = s.begin_maintenance().ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "maintenance already in progress",
        )
    })?;
    let n = s.app.reload_corpus()?;
    Ok(Json(json!({ "documents": n })).into_response())
}

async fn corpus(State(s): State<ServiceState>) -> Response {
    Json(s.app.corpus().documents().to_vec()).into_response()
}

async fn healthz(State(s): State<ServiceState>) -> Response {
    let (healthy, error) = match s.app.health().await {
        Ok(()) => (true, None),
        Err(e) => (false, Some(e.to_string())),
    };
    Json(json!({
        "status": if healthy { "ok" } else { "degraded" },
        "backend": s.app.backend().name(),
        "backend_healthy": healthy,
        "error": error,
        "warming": s.maintenance.load(Ordering::Acquire),
        "documents": s.app.corpus().len(),
    }))
    .into_response()
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/retrieve", post(retrieve))
        .route("/score", post(score))
        .route("/warm", post(warm))
        .route("/reload", post(reload))
        .route("/corpus", get(corpus))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Health-checks the backend, optionally warms the cache in the background
/// (retrievals get 503 until it finishes), then serves until ctrl-c.
pub async fn serve(app: Arc<App>, listener: tokio::net::TcpListener) -> anyhow::Result<()> {
    app.health()
        .await
        .map_err(|e| anyhow::anyhow!("backend health check failed: {e}"))?;
    let state = ServiceState::new(app.clone());
    if app.config().service.warm_on_start {
        let guard = state
            .begin_maintenance()
            .expect("no maintenance before start");
        tokio::spawn(async move {
            match app.warm().await {
                Ok(s) => tracing::info!(warm = s.warm, "prefix cache warmed"),
                Err(e) => tracing::warn!(error = %e, "startup warm-up failed"),
            }
            drop(guard);
        });
    }
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
