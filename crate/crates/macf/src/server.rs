//! HTTP service: streaming discussion sessions, read-only tools, baselines.
//!
//! `POST /recommend` answers with newline-delimited session events. Errors
//! found before the first event (unknown user, bad overrides, nobody to
//! recruit) come back as a plain JSON error body instead of a stream.

use std::collections::BTreeSet;
use std::convert::Infallible;
use std::fs::File;
use std::future::Future;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use macf_core::baselines::BaselineMethod;
use macf_core::config::ServerSection;
use macf_core::engine::{Engine, EngineError};
use macf_core::orchestrator::{EventPayload, EventSink, SessionEvent, SinkError};
use macf_core::tools::{ToolError, ToolRequest};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::mpsc::{self, error::TrySendError};
use tokio::sync::watch;

pub const SESSION_HEADER: &str = "x-session-id";
const HTTP_CALLER: &str = "http";

pub struct AppState {
    pub engine: Arc<Engine>,
    pub transcript_dir: PathBuf,
    pub limits: ServerSection,
}

impl AppState {
    pub fn new(engine: Arc<Engine>) -> Self {
        let transcript_dir = engine.config().data.transcript_dir();
        let limits = engine.config().server.clone();
        Self { engine, transcript_dir, limits }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/recommend", post(recommend))
        .route("/tools/{tool}", post(tool))
        .route("/baseline/{method}", post(baseline))
        .fallback(|| async { error_response(StatusCode::NOT_FOUND, "NotFound", "no such endpoint") })
        .with_state(state)
}

/// Serves until `shutdown` resolves, then lets in-flight sessions finish
/// for up to the configured grace period.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let grace = Duration::from_secs_f64(state.limits.shutdown_grace_s.max(0.0));
    let (stop_tx, mut stop_rx) = watch::channel(false);
    let server = axum::serve(listener, router(state)).with_graceful_shutdown(async move {
        shutdown.await;
        tracing::info!("shutting down, draining sessions");
        let _ = stop_tx.send(true);
    });
    let deadline = async move {
        let _ = stop_rx.wait_for(|stopped| *stopped).await;
        tokio::time::sleep(grace).await;
    };
    tokio::select! {
        result = server => result,
        _ = deadline => {
            tracing::warn!("grace period over, dropping remaining connections");
            Ok(())
        }
    }
}

fn error_response(status: StatusCode, kind: &str, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({"error": kind, "message": message.to_string()}))).into_response()
}

fn engine_error(err: &EngineError) -> Response {
    let status = match err.kind() {
        "UnknownUser" | "UnknownItem" | "UnknownMethod" => StatusCode::NOT_FOUND,
        _ if err.is_client_error() => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error_response(status, err.kind(), err)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, Response> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| error_response(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e))
}

#[allow(clippy::result_large_err)]
fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| error_response(StatusCode::BAD_REQUEST, "BadRequest", e))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    let catalog = state.engine.catalog();
    Json(json!({"status": "ok", "items": catalog.num_items(), "users": catalog.num_users()}))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ToolBody {
    user_id: Option<String>,
    item_id: Option<String>,
    query: Option<String>,
    n: Option<usize>,
    k: Option<usize>,
    #[serde(default)]
    exclude: BTreeSet<String>,
}

#[allow(clippy::result_large_err)]
fn tool_request(name: &str, body: ToolBody, defaults: macf_core::tools::ToolDefaults) -> Result<ToolRequest, Response> {
    let missing = |field: &str| error_response(StatusCode::BAD_REQUEST, "BadRequest", format!("missing field {field}"));
    let n = body.n.unwrap_or(defaults.n);
    let k = body.k.unwrap_or(defaults.k);
    Ok(match name {
        "similar_users" => ToolRequest::GetSimilarUsers { user_id: body.user_id.ok_or_else(|| missing("user_id"))?, n },
        "relevant_items" => ToolRequest::GetRelevantItems {
            user_id: body.user_id.ok_or_else(|| missing("user_id"))?,
            query: body.query.ok_or_else(|| missing("query"))?,
            n,
        },
        "by_query" => ToolRequest::RetrieveByQuery { query: body.query.ok_or_else(|| missing("query"))?, k, exclude: body.exclude },
        "by_item" => ToolRequest::RetrieveByItem { item_id: body.item_id.ok_or_else(|| missing("item_id"))?, k, exclude: body.exclude },
        "bm25" => ToolRequest::Bm25Search { query: body.query.ok_or_else(|| missing("query"))?, k },
        other => return Err(error_response(StatusCode::NOT_FOUND, "UnknownTool", format!("no tool {other}"))),
    })
}

async fn tool(State(state): State<Arc<AppState>>, Path(name): Path<String>, body: Bytes) -> Response {
    let body: ToolBody = match parse_body(&body) {
        Ok(b) => b,
        Err(r) => return r,
    };
    let tools = state.engine.tools();
    let request = match tool_request(&name, body, tools.defaults()) {
        Ok(r) => r,
        Err(r) => return r,
    };
    match blocking(move || tools.call(&request, HTTP_CALLER, 0)).await {
        Ok(Ok(response)) => Json(response).into_response(),
        Ok(Err(e)) => tool_error(e),
        Err(r) => r,
    }
}

fn tool_error(e: ToolError) -> Response {
    engine_error(&EngineError::Tool(e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BaselineBody {
    user_id: String,
    query: String,
    k: Option<usize>,
}

async fn baseline(State(state): State<Arc<AppState>>, Path(method): Path<String>, body: Bytes) -> Response {
    let method: BaselineMethod = match method.parse() {
        Ok(m) => m,
        Err(e) => return engine_error(&EngineError::Baseline(e)),
    };
    let body: BaselineBody = match parse_body(&body) {
        Ok(b) => b,
        Err(r) => return r,
    };
    let k = body.k.unwrap_or(state.engine.config().orchestrator.list_size).max(1);
    let engine = state.engine.clone();
    match blocking(move || engine.baseline(method, &body.user_id, &body.query, k)).await {
        Ok(Ok(list)) => Json(list).into_response(),
        Ok(Err(e)) => engine_error(&e),
        Err(r) => r,
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecommendBody {
    user_id: String,
    query: String,
    #[serde(default)]
    config_overrides: Value,
}

enum Msg {
    Event(SessionEvent),
    Rejected(EngineError),
}

/// State shared by the session thread and the response stream.
struct Shared {
    session_id: String,
    transcript: Option<BufWriter<File>>,
    /// No further events reach the client; only a terminal event may still
    /// be written to the transcript.
    cancelled: bool,
    terminated: bool,
    last: Option<(u64, usize)>,
}

impl Shared {
    fn write(&mut self, event: &SessionEvent) {
        if let Some(file) = self.transcript.as_mut() {
            let ok = writeln!(file, "{}", event.to_line()).and_then(|_| file.flush());
            if let Err(e) = ok {
                tracing::warn!(error = %e, "transcript write failed; continuing without it");
                self.transcript = None;
            }
        }
        self.last = Some((event.seq, event.round));
        if event.payload.is_terminal() {
            self.terminated = true;
        }
    }
}

/// Writes each event to the transcript, then hands it to the client
/// stream. A client that stops reading gets `stall` to catch up before the
/// session is failed.
struct StreamSink {
    shared: Arc<Mutex<Shared>>,
    tx: mpsc::Sender<Msg>,
    stall: Duration,
}

impl EventSink for StreamSink {
    fn emit(&mut self, event: &SessionEvent) -> Result<(), SinkError> {
        let mut msg = {
            let mut shared = self.shared.lock().unwrap();
            if shared.cancelled {
                if event.payload.is_terminal() && !shared.terminated {
                    shared.write(event);
                }
                return Err(SinkError("client stream closed".into()));
            }
            shared.write(event);
            match self.tx.try_send(Msg::Event(event.clone())) {
                Ok(()) => return Ok(()),
                Err(TrySendError::Closed(_)) => {
                    shared.cancelled = true;
                    return Err(SinkError("client disconnected".into()));
                }
                Err(TrySendError::Full(msg)) => msg,
            }
        };
        let deadline = Instant::now() + self.stall;
        loop {
            std::thread::sleep(Duration::from_millis(5));
            let mut shared = self.shared.lock().unwrap();
            if shared.cancelled {
                return Err(SinkError("client stream closed".into()));
            }
            match self.tx.try_send(msg) {
                Ok(()) => return Ok(()),
                Err(TrySendError::Closed(_)) => {
                    shared.cancelled = true;
                    return Err(SinkError("client disconnected".into()));
                }
                Err(TrySendError::Full(back)) if Instant::now() < deadline => msg = back,
                Err(TrySendError::Full(_)) => {
                    shared.cancelled = true;
                    return Err(SinkError(format!("client stopped reading for {:?}", self.stall)));
                }
            }
        }
    }
}

async fn recommend(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let body: RecommendBody = match parse_body(&body) {
        Ok(b) => b,
        Err(r) => return r,
    };
    let session_id = uuid::Uuid::new_v4().to_string();
    let transcript = state.transcript_dir.join(format!("{session_id}.jsonl"));
    let file = match std::fs::create_dir_all(&state.transcript_dir).and_then(|_| File::create(&transcript)) {
        Ok(f) => Some(BufWriter::new(f)),
        Err(e) => {
            tracing::warn!(error = %e, path = %transcript.display(), "cannot create transcript file");
            None
        }
    };
    let shared = Arc::new(Mutex::new(Shared { session_id: session_id.clone(), transcript: file, cancelled: false, terminated: false, last: None }));
    let (tx, mut rx) = mpsc::channel(state.limits.queue_capacity.max(1));
    let stall = state.limits.stall_timeout();

    let engine = state.engine.clone();
    let sink_shared = shared.clone();
    let id = session_id.clone();
    tokio::task::spawn_blocking(move || {
        let reject = tx.clone();
        let mut sink = StreamSink { shared: sink_shared.clone(), tx, stall };
        let result = engine.recommend(&body.user_id, &body.query, &body.config_overrides, Some(&id), &mut sink);
        if let Err(e) = result {
            let started = sink_shared.lock().unwrap().last.is_some();
            if !started {
                let _ = reject.blocking_send(Msg::Rejected(e));
            } else {
                tracing::info!(session = %id, error = %e, "session ended with an error");
            }
        }
    });

    // Nothing is streamed until the session has either started or been
    // rejected, so pre-stream errors keep their status code.
    let first = match tokio::time::timeout(stall, rx.recv()).await {
        Ok(Some(Msg::Event(e))) => e,
        Ok(Some(Msg::Rejected(err))) => {
            let _ = std::fs::remove_file(&transcript);
            return engine_error(&err);
        }
        Ok(None) => return error_response(StatusCode::INTERNAL_SERVER_ERROR, "Internal", "session ended without events"),
        Err(_) => {
            shared.lock().unwrap().cancelled = true;
            return error_response(StatusCode::GATEWAY_TIMEOUT, "Timeout", "session did not start in time");
        }
    };

    let stream = futures_util::stream::unfold(
        Some(StreamState { rx, pending: vec![first], shared, stall }),
        |st| async move {
            let mut st = st?;
            let line = st.next_line().await?;
            Some((Ok::<_, Infallible>(line.0), if line.1 { None } else { Some(st) }))
        },
    );
    let mut response = Response::new(Body::from_stream(stream));
    response
        .headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/x-ndjson"));
    if let Ok(v) = HeaderValue::from_str(&session_id) {
        response.headers_mut().insert(SESSION_HEADER, v);
    }
    response
}

struct StreamState {
    rx: mpsc::Receiver<Msg>,
    pending: Vec<SessionEvent>,
    shared: Arc<Mutex<Shared>>,
    stall: Duration,
}

impl StreamState {
    /// Next line for the client and whether it ends the stream.
    async fn next_line(&mut self) -> Option<(Bytes, bool)> {
        let event = match self.pending.pop() {
            Some(e) => e,
            None => match tokio::time::timeout(self.stall, self.rx.recv()).await {
                Ok(Some(Msg::Event(e))) => e,
                Ok(Some(Msg::Rejected(_))) | Ok(None) => return None,
                Err(_) => self.give_up()?,
            },
        };
        let terminal = event.payload.is_terminal();
        let mut line = event.to_line().into_bytes();
        line.push(b'\n');
        Some((Bytes::from(line), terminal))
    }

    /// The session went quiet for too long: close it with `session_failed`,
    /// after anything it managed to queue in the meantime.
    fn give_up(&mut self) -> Option<SessionEvent> {
        let mut shared = self.shared.lock().unwrap();
        let mut queued = Vec::new();
        while let Ok(Msg::Event(e)) = self.rx.try_recv() {
            queued.push(e);
        }
        if !shared.terminated {
            shared.cancelled = true;
            let (seq, round) = shared.last.map(|(s, r)| (s + 1, r)).unwrap_or((0, 0));
            let failed = SessionEvent {
                session_id: shared.session_id.clone(),
                seq,
                round,
                payload: EventPayload::SessionFailed { error: format!("no progress for {:?}", self.stall) },
            };
            shared.write(&failed);
            queued.push(failed);
        }
        drop(shared);
        queued.reverse();
        let next = queued.pop();
        self.pending = queued;
        next
    }
}
