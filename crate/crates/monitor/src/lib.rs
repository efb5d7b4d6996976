//! HTTP monitoring and control server.
//!
//! Endpoints (all JSON):
//!
//! | method | path | reply |
//! |---|---|---|
//! | GET | `/api/components` | `[ComponentSummary]` |
//! | GET | `/api/component/{name}` | `ComponentSnapshot` |
//! | GET | `/api/progress` | `ProgressReport` |
//! | GET | `/api/bottlenecks` | `[Bottleneck]` |
//! | POST | `/api/pause?timeout_ms=N` | `PauseReply` |
//! | POST | `/api/resume` | `ResumeReply` |
//! | POST | `/api/component/{name}/tick` | `ForceReply` |
//! | POST | `/api/watch` with `{component, field}` | `WatchSeries` |
//! | GET | `/api/watch/{id}` | `WatchSeries` |
//! | GET | `/api/watches` | `[WatchSeries]` |
//!
//! Errors carry `{"error": message, "kind": kind}` with status 404 for
//! unknown names, 400 for non-numeric watch fields and 409 once the run
//! has finished.

use std::io;
use std::net::{Ipv4Addr, SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tickwell::monitor::{HubError, MonitorHub};
use tokio::sync::oneshot;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

const DEFAULT_PAUSE_TIMEOUT_MS: u64 = 2000;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("monitor port {port}: {source}")]
    Bind { port: u16, source: io::Error },
    #[error("monitor static directory {0} does not exist")]
    StaticDir(PathBuf),
    #[error("starting the monitor runtime: {0}")]
    Runtime(io::Error),
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    kind: &'static str,
}

struct ApiError(HubError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            HubError::UnknownComponent(_) => (StatusCode::NOT_FOUND, "unknown_component"),
            HubError::UnknownField { .. } => (StatusCode::NOT_FOUND, "unknown_field"),
            HubError::UnknownWatch(_) => (StatusCode::NOT_FOUND, "unknown_watch"),
            HubError::NotNumeric { .. } => (StatusCode::BAD_REQUEST, "not_numeric"),
            HubError::Finished => (StatusCode::CONFLICT, "finished"),
        };
        let body = ErrorBody {
            error: self.0.to_string(),
            kind,
        };
        (status, Json(body)).into_response()
    }
}

type Hub = State<Arc<MonitorHub>>;

async fn components(State(hub): Hub) -> impl IntoResponse {
    Json(hub.components())
}

async fn component(State(hub): Hub, UrlPath(name): UrlPath<String>) -> Response {
    match hub.component(&name) {
        Ok(s) => Json(s).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn progress(State(hub): Hub) -> impl IntoResponse {
    Json(hub.progress())
}

async fn bottlenecks(State(hub): Hub) -> impl IntoResponse {
    Json(hub.bottlenecks())
}

#[derive(Deserialize)]
struct PauseQuery {
    timeout_ms: Option<u64>,
}

async fn pause(State(hub): Hub, Query(q): Query<PauseQuery>) -> Response {
    let timeout = Duration::from_millis(q.timeout_ms.unwrap_or(DEFAULT_PAUSE_TIMEOUT_MS));
    match tokio::task::spawn_blocking(move || hub.pause(timeout)).await {
        Ok(reply) => Json(reply).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

async fn resume(State(hub): Hub) -> impl IntoResponse {
    Json(hub.resume())
}

async fn force_tick(State(hub): Hub, UrlPath(name): UrlPath<String>) -> Response {
    match hub.force_tick(&name) {
        Ok(r) => Json(r).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

#[derive(Deserialize)]
struct WatchRequest {
    component: String,
    field: String,
}

async fn watch(State(hub): Hub, Json(req): Json<WatchRequest>) -> Response {
    match hub.watch(&req.component, &req.field) {
        Ok(s) => Json(s).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn watch_series(State(hub): Hub, UrlPath(id): UrlPath<u64>) -> Response {
    match hub.watch_series(id) {
        Ok(s) => Json(s).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn watches(State(hub): Hub) -> impl IntoResponse {
    Json(hub.watches())
}

pub fn router(hub: Arc<MonitorHub>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/components", get(components))
        .route("/api/component/{name}", get(component))
        .route("/api/component/{name}/tick", post(force_tick))
        .route("/api/progress", get(progress))
        .route("/api/bottlenecks", get(bottlenecks))
        .route("/api/pause", post(pause))
        .route("/api/resume", post(resume))
        .route("/api/watch", post(watch))
        .route("/api/watch/{id}", get(watch_series))
        .route("/api/watches", get(watches))
        .with_state(hub);
    let app = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(CorsLayer::permissive())
}

/// A running server. Dropping it stops the server.
pub struct MonitorServer {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MonitorServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MonitorServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds `127.0.0.1:port` (0 picks a free port) and serves on a background
/// thread. A port already in use is an error here, before the run starts.
pub fn serve(
    hub: Arc<MonitorHub>,
    port: u16,
    static_dir: Option<&Path>,
) -> Result<MonitorServer, ServeError> {
    if let Some(dir) = static_dir {
        if !dir.is_dir() {
            return Err(ServeError::StaticDir(dir.to_path_buf()));
        }
    }
    let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, port))
        .map_err(|source| ServeError::Bind { port, source })?;
    listener
        .set_nonblocking(true)
        .map_err(|source| ServeError::Bind { port, source })?;
    let addr = listener
        .local_addr()
        .map_err(|source| ServeError::Bind { port, source })?;
    let runtime = tokio::runtime::Builder::new_current_thread()
        .enable_io()
        .enable_time()
        .build()
        .map_err(ServeError::Runtime)?;
    let app = router(hub, static_dir);
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name("monitor".into())
        .spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        eprintln!("monitor: {e}");
                        return;
                    }
                };
                // Stop without waiting for idle keep-alive connections.
                tokio::select! {
                    r = axum::serve(listener, app) => {
                        if let Err(e) = r {
                            eprintln!("monitor: {e}");
                        }
                    }
                    _ = rx => {}
                }
            });
        })
        .map_err(ServeError::Runtime)?;
    Ok(MonitorServer {
        addr,
        stop: Some(tx),
        thread: Some(thread),
    })
}
