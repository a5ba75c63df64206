//! HTTP service.
//!
//! | method | path                          | body / query                  |
//! |--------|-------------------------------|-------------------------------|
//! | GET    | `/runs`                       |                               |
//! | GET    | `/runs/{id}`                  |                               |
//! | POST   | `/runs`                       | `{config, problem?, kind?}`   |
//! | GET    | `/sessions/{id}/events`       | `?cursor=N&follow=true`       |
//! | POST   | `/sessions/{id}/gate`         | `{decision, visit?}`          |
//! | GET    | `/reports/{id}`               |                               |
//!
//! Events stream as NDJSON, one [`SessionEvent`] per line, starting after the
//! cursor (the last seq the client has seen). The stream closes after the
//! session's terminal status event.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use femagent_core::orchestra::{AdminChannel, Decision};
use femagent_core::session::SessionObserver;
use serde::{Deserialize, Serialize};
use tokio_stream::wrappers::ReceiverStream;

use crate::events::{EventHub, SessionEvent, StoreObserver};
use crate::gate::{GateBoard, GateConflict, HttpAdmin};
use crate::store::{check_id, RunKind, RunRecord, RunStatus, Store, StoreError};

pub const DEFAULT_GATE_WAIT: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaunchRequest {
    /// Name of a config under `<store>/configs/`.
    pub config: String,
    #[serde(default)]
    pub problem: Option<String>,
    #[serde(default)]
    pub kind: Option<RunKind>,
}

/// Everything a launcher needs to run and record one run.
#[derive(Clone)]
pub struct LaunchContext {
    pub run: RunRecord,
    /// Session id reserved for the run's (first) session; events are already streamable under it.
    pub session_id: String,
    pub config: Vec<u8>,
    pub store: Store,
    pub hub: Arc<EventHub>,
    pub gates: Arc<GateBoard>,
    pub gate_wait: Duration,
}

impl LaunchContext {
    pub fn observer(&self) -> Arc<dyn SessionObserver> {
        Arc::new(StoreObserver::new(self.hub.clone()))
    }

    pub fn admin(&self) -> Arc<dyn AdminChannel> {
        Arc::new(HttpAdmin::new(self.gates.clone(), self.hub.clone(), self.gate_wait))
    }

    pub fn artifact_dir(&self) -> PathBuf {
        self.store.root().join(&self.run.artifact_dir)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchResult {
    pub status: RunStatus,
    /// Session ids beyond the reserved one.
    pub extra_sessions: Vec<String>,
    pub message: Option<String>,
}

/// Runs a launched config. Called on a dedicated thread; may block for the whole run.
pub trait RunLauncher: Send + Sync {
    fn launch(&self, request: &LaunchRequest, ctx: &LaunchContext) -> LaunchResult;
}

#[derive(Clone)]
pub struct AppState {
    pub store: Store,
    pub hub: Arc<EventHub>,
    pub gates: Arc<GateBoard>,
    pub launcher: Option<Arc<dyn RunLauncher>>,
    pub gate_wait: Duration,
}

impl AppState {
    pub fn new(store: Store) -> Self {
        Self {
            hub: Arc::new(EventHub::new(store.clone())),
            store,
            gates: Arc::new(GateBoard::new()),
            launcher: None,
            gate_wait: DEFAULT_GATE_WAIT,
        }
    }

    pub fn with_launcher(mut self, launcher: Arc<dyn RunLauncher>) -> Self {
        self.launcher = Some(launcher);
        self
    }

    pub fn with_gate_wait(mut self, wait: Duration) -> Self {
        self.gate_wait = wait;
        self
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let code = match e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::InvalidId(_) => StatusCode::BAD_REQUEST,
            StoreError::Corrupt(_) | StoreError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn list_runs(State(s): State<AppState>) -> ApiResult<Json<Vec<RunRecord>>> {
    Ok(Json(s.store.list_runs()?))
}

async fn get_run(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<RunRecord>> {
    Ok(Json(s.store.load_run(&id)?.0))
}

async fn get_report(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    Ok(Json(s.store.load_report(&id)?))
}

async fn launch_run(
    State(s): State<AppState>,
    Json(req): Json<LaunchRequest>,
) -> ApiResult<(StatusCode, Json<RunRecord>)> {
    let launcher = s.launcher.clone().ok_or_else(|| {
        ApiError(StatusCode::NOT_IMPLEMENTED, "this service was started without a run launcher".into())
    })?;
    let config = s.store.load_config(&req.config)?;
    let mut run = s.store.new_run(req.kind.unwrap_or(RunKind::Orchestra), &config, chrono::Utc::now());
    run.status = RunStatus::Running;
    run.config_name = Some(req.config.clone());
    run.problem = req.problem.clone();
    run.transcript_refs = vec![run.run_id.clone()];
    std::fs::create_dir_all(s.store.session_dir(&run.run_id))
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    s.store.save_run(&run, &config)?;

    let ctx = LaunchContext {
        run: run.clone(),
        session_id: run.run_id.clone(),
        config,
        store: s.store.clone(),
        hub: s.hub.clone(),
        gates: s.gates.clone(),
        gate_wait: s.gate_wait,
    };
    std::thread::spawn(move || {
        let result = catch_unwind(AssertUnwindSafe(|| launcher.launch(&req, &ctx))).unwrap_or_else(|_| LaunchResult {
            status: RunStatus::Failed,
            extra_sessions: vec![],
            message: Some("launcher panicked".into()),
        });
        let mut run = ctx.run.clone();
        run.status = result.status;
        run.transcript_refs.extend(result.extra_sessions);
        run.message = result.message;
        if let Err(e) = ctx.store.update_run(&run) {
            log::error!("run {}: final status not stored: {e}", run.run_id);
        }
    });
    Ok((StatusCode::CREATED, Json(run)))
}

#[derive(Debug, Deserialize)]
struct EventQuery {
    #[serde(default)]
    cursor: u64,
    #[serde(default = "yes")]
    follow: bool,
}

fn yes() -> bool {
    true
}

fn ndjson(ev: &SessionEvent) -> String {
    let mut s = serde_json::to_string(ev).expect("event serializes");
    s.push('\n');
    s
}

async fn session_events(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventQuery>,
) -> ApiResult<Response> {
    check_id(&id)?;
    if !s.hub.session_exists(&id) {
        return Err(ApiError(StatusCode::NOT_FOUND, format!("session {id} not found")));
    }
    let (backlog, mut live) = s.hub.subscribe(&id, q.cursor)?;
    // a client resuming past the terminal event gets an empty, closed stream
    let already_over = !backlog.iter().any(SessionEvent::is_terminal)
        && s.hub.read_events(&id, 0)?.iter().any(|e| e.is_terminal() && e.seq <= q.cursor);
    let (tx, rx) = tokio::sync::mpsc::channel::<Result<String, Infallible>>(64);
    tokio::spawn(async move {
        if already_over {
            return;
        }
        let mut last = q.cursor;
        for ev in backlog {
            last = ev.seq;
            if tx.send(Ok(ndjson(&ev))).await.is_err() || ev.is_terminal() {
                return;
            }
        }
        if !q.follow {
            return;
        }
        while let Some(ev) = live.recv().await {
            if ev.seq <= last {
                continue;
            }
            last = ev.seq;
            if tx.send(Ok(ndjson(&ev))).await.is_err() || ev.is_terminal() {
                return;
            }
        }
    });
    Ok(Response::builder()
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from_stream(ReceiverStream::new(rx)))
        .expect("static headers"))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GateBody {
    decision: Decision,
    #[serde(default)]
    visit: Option<u32>,
}

async fn submit_gate(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<GateBody>,
) -> ApiResult<Json<crate::gate::GateAck>> {
    check_id(&id)?;
    s.gates
        .submit(&id, body.decision, body.visit)
        .map(Json)
        .map_err(|e: GateConflict| ApiError(StatusCode::CONFLICT, e.to_string()))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/runs", get(list_runs).post(launch_run))
        .route("/runs/{id}", get(get_run))
        .route("/sessions/{id}/events", get(session_events))
        .route("/sessions/{id}/gate", post(submit_gate))
        .route("/reports/{id}", get(get_report))
        .with_state(state)
}

/// Serves until the process ends.
pub async fn serve(bind: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

/// A server on its own runtime thread; stops when dropped.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn start(bind: SocketAddr, state: AppState) -> std::io::Result<Self> {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let listener = rt.block_on(tokio::net::TcpListener::bind(bind))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let server = axum::serve(listener, router(state)).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = server.await {
                    log::error!("server stopped: {e}");
                }
            });
            rt.shutdown_timeout(Duration::from_millis(200));
        });
        Ok(Self { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
