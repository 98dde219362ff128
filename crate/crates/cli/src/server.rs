//! JSON-over-HTTP access to the human-oracle queue and the live run snapshot.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::sync::oneshot;

use apl_core::engine::RunMonitor;
use apl_core::oracle::{HumanQueue, PostError, Slot};
use apl_core::{AplError, Result};

pub const API_TOKEN_ENV: &str = "APL_API_TOKEN";

#[derive(Default)]
pub struct ApiState {
    pub queue: Option<Arc<HumanQueue>>,
    pub monitor: Option<Arc<RunMonitor>>,
    /// When set, every route but /api/health needs `Authorization: Bearer <token>`
    /// or `X-Api-Token: <token>`.
    pub token: Option<String>,
}

type Shared = Arc<ApiState>;

fn error(status: StatusCode, message: impl Into<String>, field: Option<&str>) -> Response {
    let mut body = json!({ "error": message.into() });
    if let Some(f) = field {
        body["field"] = json!(f);
    }
    (status, Json(body)).into_response()
}

fn not_attached() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "no run attached", None)
}

fn authorized(state: &ApiState, headers: &HeaderMap) -> bool {
    let Some(token) = &state.token else { return true };
    let bearer = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    let header = headers.get("x-api-token").and_then(|v| v.to_str().ok());
    bearer == Some(token.as_str()) || header == Some(token.as_str())
}

macro_rules! guard {
    ($state:expr, $headers:expr) => {
        if !authorized(&$state, &$headers) {
            return error(StatusCode::UNAUTHORIZED, "missing or wrong API token", None);
        }
    };
}

async fn health() -> Response {
    Json(json!({ "status": "ok" })).into_response()
}

async fn pending(State(st): State<Shared>, headers: HeaderMap, Query(q): Query<HashMap<String, String>>) -> Response {
    guard!(st, headers);
    let limit = match q.get("limit").map(|s| s.parse::<usize>()) {
        None => None,
        Some(Ok(k)) => Some(k),
        Some(Err(_)) => return error(StatusCode::BAD_REQUEST, "limit must be a nonnegative integer", Some("limit")),
    };
    match &st.queue {
        Some(queue) => Json(queue.pending(limit)).into_response(),
        None => not_attached(),
    }
}

/// Validated body of POST /api/judgements.
#[derive(Debug, PartialEq)]
pub struct JudgementBody {
    pub id: String,
    pub preferred: Slot,
    pub rationale: Option<String>,
}

/// Field-level validation; the error names the offending field.
pub fn parse_judgement(body: &[u8]) -> std::result::Result<JudgementBody, (String, &'static str)> {
    let v: Value = serde_json::from_slice(body).map_err(|e| (format!("malformed JSON: {e}"), "body"))?;
    let Value::Object(obj) = v else {
        return Err(("expected a JSON object".into(), "body"));
    };
    let id = match obj.get("id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        _ => return Err(("id must be a nonempty string".into(), "id")),
    };
    let preferred = match obj.get("preferred").and_then(Value::as_str) {
        Some("A") => Slot::A,
        Some("B") => Slot::B,
        _ => return Err((r#"preferred must be "A" or "B""#.into(), "preferred")),
    };
    let rationale = match obj.get("rationale") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(("rationale must be a string".into(), "rationale")),
    };
    Ok(JudgementBody { id, preferred, rationale })
}

async fn judgements(State(st): State<Shared>, headers: HeaderMap, body: Bytes) -> Response {
    guard!(st, headers);
    let Some(queue) = &st.queue else { return not_attached() };
    let b = match parse_judgement(&body) {
        Ok(b) => b,
        Err((msg, field)) => return error(StatusCode::BAD_REQUEST, msg, Some(field)),
    };
    match queue.post(&b.id, b.preferred, b.rationale) {
        Ok(()) => Json(json!({ "id": b.id, "status": "recorded" })).into_response(),
        Err(PostError::NotFound) => error(StatusCode::NOT_FOUND, format!("unknown id {}", b.id), Some("id")),
        Err(PostError::Conflict) => error(StatusCode::CONFLICT, format!("{} already judged", b.id), Some("id")),
    }
}

async fn run(State(st): State<Shared>, headers: HeaderMap) -> Response {
    guard!(st, headers);
    let Some(snapshot) = st.monitor.as_ref().and_then(|m| m.snapshot()) else {
        return not_attached();
    };
    let mut body = serde_json::to_value(&*snapshot).unwrap_or(Value::Null);
    if let Some(queue) = &st.queue {
        body["progress"] = json!(queue.progress());
    }
    Json(body).into_response()
}

async fn fallback() -> Response {
    error(StatusCode::NOT_FOUND, "no such endpoint", None)
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/pending", get(pending))
        .route("/api/judgements", post(judgements))
        .route("/api/run", get(run))
        .fallback(fallback)
        .with_state(state)
}

pub fn is_loopback(addr: &SocketAddr) -> bool {
    addr.ip().is_loopback()
}

/// Refuses non-loopback binds unless explicitly allowed.
pub fn check_bind(addr: &SocketAddr, allow_external: bool) -> Result<()> {
    if is_loopback(addr) || allow_external {
        Ok(())
    } else {
        Err(AplError::config("addr", format!("{addr} is not a loopback address; pass --allow-external")))
    }
}

/// API server on its own runtime thread.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves until shut down.
/// `on_interrupt` runs once if the process receives Ctrl-C.
pub fn spawn(addr: SocketAddr, state: ApiState, on_interrupt: Option<Box<dyn FnOnce() + Send>>) -> Result<ServerHandle> {
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let local = std_listener.local_addr()?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(Arc::new(state));
    let thread = std::thread::spawn(move || {
        runtime.block_on(async move {
            if let Some(f) = on_interrupt {
                tokio::spawn(async move {
                    if tokio::signal::ctrl_c().await.is_ok() {
                        log::warn!("interrupted; aborting the run");
                        f();
                    }
                });
            }
            let listener = match tokio::net::TcpListener::from_std(std_listener) {
                Ok(l) => l,
                Err(e) => {
                    log::error!("api listener: {e}");
                    return;
                }
            };
            let served = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
            if let Err(e) = served {
                log::error!("api server: {e}");
            }
        });
    });
    log::info!("labelling API on http://{local}");
    Ok(ServerHandle {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
