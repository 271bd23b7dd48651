//! HTTP/JSON service over the benchmark engine, with live bridge sessions
//! on WebSockets.

mod jobs;
mod live;

use axum::extract::{Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use coopbench_core::api::{ErrorBody, TOKEN_HEADER, TOKEN_QUERY};
use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub use live::SessionHandle;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Required on every request when set.
    pub token: Option<String>,
    /// Where recorded demonstrations are written.
    pub demo_dir: Option<PathBuf>,
    /// Wall-clock period of one bridge tick.
    pub tick_interval: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            token: None,
            demo_dir: None,
            tick_interval: Duration::from_millis(50),
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub cfg: Arc<ServerConfig>,
    pub sessions: Arc<Mutex<HashMap<String, SessionHandle>>>,
    next_session: Arc<std::sync::atomic::AtomicU64>,
}

impl AppState {
    pub fn new(cfg: ServerConfig) -> Self {
        Self {
            cfg: Arc::new(cfg),
            sessions: Arc::default(),
            next_session: Arc::default(),
        }
    }

    fn session_id(&self) -> String {
        let n = self.next_session.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        format!("s{n}")
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    pub fn bad(message: impl ToString) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message.to_string())
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!("{}", self.message);
        }
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

pub type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs CPU-bound work off the async workers.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

async fn require_token(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(expected) = &app.cfg.token {
        let header = req.headers().get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
        let query = req.uri().query().and_then(|q| {
            q.split('&')
                .filter_map(|kv| kv.split_once('='))
                .find(|(k, _)| *k == TOKEN_QUERY)
                .map(|(_, v)| v)
        });
        if header.or(query) != Some(expected.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong session token").into_response();
        }
    }
    next.run(req).await
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/suite/run", post(jobs::run))
        .route("/v1/suite/sweep", post(jobs::sweep))
        .route("/v1/gen/propose", post(jobs::propose))
        .route("/v1/gen/instantiate", post(jobs::instantiate))
        .route("/v1/gen/screen", post(jobs::screen))
        .route("/v1/gen/export", post(jobs::export))
        .route("/v1/convert", post(jobs::convert))
        .route("/v1/stats", post(jobs::stats))
        .route("/v1/report", post(jobs::report))
        .route("/v1/replay", post(jobs::replay))
        .route("/v1/compare-human", post(jobs::compare_human))
        .route("/v1/bridge/sessions", post(live::create).get(live::list))
        .route("/v1/bridge/sessions/{id}", axum::routing::delete(live::close))
        .route("/v1/bridge/sessions/{id}/demos", get(live::demos))
        .route("/v1/bridge/sessions/{id}/ws", get(live::socket))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Serves on an already bound listener until the task is dropped.
pub async fn serve(listener: TcpListener, cfg: ServerConfig) -> std::io::Result<()> {
    axum::serve(listener, router(AppState::new(cfg))).await
}

/// Binds `addr` and serves in the background; returns the bound address.
pub async fn spawn(addr: SocketAddr, cfg: ServerConfig) -> std::io::Result<(SocketAddr, JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((local, tokio::spawn(serve(listener, cfg))))
}
