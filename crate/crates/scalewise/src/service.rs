//! HTTP + server-sent-event API over [`SessionRunner`]s.
//!
//! Each session has one runner behind a mutex; every input is applied on a
//! blocking thread while holding it, so the inputs of one session are
//! totally ordered. New audit events are published to subscribers before the
//! lock is released, which is what lets a subscriber take a backlog and a live
//! receiver atomically.

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use scalewise_core::engine::{AssessmentStatus, EngineError};
use scalewise_core::risk::evaluate;
use scalewise_core::{Engine, RiskLevel, ScaleId, SessionPhase, SessionRunner, StreamEvent, TurnResponse};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{broadcast, watch};
use tokio_stream::wrappers::BroadcastStream;
use tower_http::cors::CorsLayer;

use crate::jsonl::{log_path, JsonlSink};
use crate::remote::{Remote, Rewriter, Webhook};

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Clone, Debug)]
pub struct ServiceOptions {
    /// `None` keeps audit logs in memory only.
    pub log_dir: Option<PathBuf>,
    pub keepalive: Duration,
    /// Run the asynchronous risk monitor for each session.
    pub monitor: bool,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self { log_dir: None, keepalive: Duration::from_secs(15), monitor: true }
    }
}

pub struct SessionHandle {
    id: String,
    runner: Mutex<SessionRunner>,
    published: Mutex<usize>,
    events: broadcast::Sender<StreamEvent>,
    version: watch::Sender<u64>,
}

/// What one serialized input produced besides its own result.
struct Applied<R> {
    result: R,
    entered_intervention: Option<serde_json::Value>,
}

impl SessionHandle {
    fn new(runner: SessionRunner) -> Self {
        let (events, _) = broadcast::channel(1024);
        let version = watch::Sender::new(runner.session.store.version());
        let published = runner.audit().len();
        Self { id: runner.session_id().to_owned(), runner: Mutex::new(runner), published: Mutex::new(published), events, version }
    }

    fn lock(&self) -> MutexGuard<'_, SessionRunner> {
        // A panic inside the engine leaves the runner as it was before the
        // panicking input (all state changes are committed at the end).
        self.runner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Applies `f` under the session lock and publishes whatever it audited.
    fn apply<R>(&self, f: impl FnOnce(&mut SessionRunner) -> R) -> Applied<R> {
        let mut runner = self.lock();
        let before = runner.session.phase;
        let result = f(&mut runner);
        let mut published = self.published.lock().unwrap_or_else(|p| p.into_inner());
        let events = runner.audit().events();
        let mut entered_intervention = None;
        for e in &events[*published..] {
            if let Some(s) = StreamEvent::from_audit(e) {
                let _ = self.events.send(s);
            }
        }
        *published = events.len();
        if before != SessionPhase::Intervention && runner.session.phase == SessionPhase::Intervention {
            let seq = events.len() as u64 - 1;
            entered_intervention = Some(json!({
                "event": "override",
                "session_id": self.id,
                "seq": seq,
                "r": runner.session.risk_state.r,
                "at": now_ms(),
            }));
        }
        self.version.send_replace(runner.session.store.version());
        Applied { result, entered_intervention }
    }

    /// Stream events after `after` plus a receiver for everything later.
    fn subscribe(&self, after: Option<u64>) -> (Vec<StreamEvent>, broadcast::Receiver<StreamEvent>) {
        let runner = self.lock();
        let rx = self.events.subscribe();
        let backlog = runner
            .audit()
            .events()
            .iter()
            .filter(|e| after.is_none_or(|a| e.seq > a))
            .filter_map(StreamEvent::from_audit)
            .collect();
        (backlog, rx)
    }
}

pub struct AppState {
    engine: Arc<Engine>,
    remote: Remote,
    options: ServiceOptions,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    rewriter: Option<Rewriter>,
    webhook: Option<Arc<Webhook>>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>, remote: Remote, options: ServiceOptions) -> Arc<Self> {
        let timeouts = engine.config().timeouts;
        let rewriter = remote.rewriter(&timeouts);
        let webhook = remote.webhook(&timeouts).map(Arc::new);
        Arc::new(Self { engine, remote, options, sessions: RwLock::new(HashMap::new()), rewriter, webhook })
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    fn session(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }

    fn open(&self, id: String) -> Result<SessionRunner, ApiError> {
        let sink = match &self.options.log_dir {
            Some(dir) => {
                let sink = JsonlSink::create(log_path(dir, &id)).map_err(|e| ApiError::internal(format!("opening audit log: {e}")))?;
                Some(Box::new(sink) as Box<dyn scalewise_core::AuditSink>)
            }
            None => None,
        };
        let mut runner = SessionRunner::new(Arc::clone(&self.engine), id, now_ms(), sink).map_err(ApiError::from)?;
        if let Some(x) = self.remote.extractor(&self.engine) {
            runner = runner.with_extractor(Box::new(x));
        }
        if let Some(r) = self.remote.reranker(&self.engine.config().timeouts) {
            runner = runner.with_reranker(Box::new(r));
        }
        Ok(runner)
    }

    fn after_input(&self, note: Option<serde_json::Value>) {
        if let (Some(hook), Some(payload)) = (&self.webhook, note) {
            let hook = Arc::clone(hook);
            std::thread::spawn(move || {
                if let Err(e) = hook.notify(&payload) {
                    tracing::warn!(error = %e, "override webhook failed");
                }
            });
        }
    }

    fn polish(&self, mut resp: TurnResponse) -> TurnResponse {
        if let Some(r) = &self.rewriter {
            resp.reply_text = r.rewrite(&resp.reply_text, resp.phase);
        }
        resp
    }
}

/// Runs one input for a session on a blocking thread.
async fn run<R: Send + 'static>(
    state: &Arc<AppState>,
    id: &str,
    f: impl FnOnce(&mut SessionRunner) -> Result<R, EngineError> + Send + 'static,
) -> Result<R, ApiError> {
    let handle = state.session(id)?;
    let st = Arc::clone(state);
    tokio::task::spawn_blocking(move || {
        let applied = handle.apply(f);
        st.after_input(applied.entered_intervention);
        applied.result.map_err(ApiError::from)
    })
    .await
    .map_err(|e| ApiError::internal(format!("session task failed: {e}")))?
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::Rejected(_) | EngineError::Closed => StatusCode::CONFLICT,
            EngineError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

#[derive(Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub phase: SessionPhase,
    pub greeting: String,
    pub context_version: u64,
}

#[derive(Serialize, Deserialize)]
pub struct Summary {
    pub session_id: String,
    pub phase: SessionPhase,
    pub risk_level: RiskLevel,
    pub turn: u64,
    pub context_version: u64,
    pub audit_events: usize,
}

#[derive(Deserialize)]
struct TurnBody {
    text: String,
    #[serde(default)]
    latency_ms: u64,
}

#[derive(Deserialize)]
struct AcceptBody {
    scale_id: ScaleId,
}

#[derive(Deserialize)]
struct ResponseBody {
    item_id: String,
    value: i64,
}

#[derive(Deserialize)]
struct EventsQuery {
    last_seq: Option<u64>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/:id", get(summary))
        .route("/sessions/:id/turns", post(turn))
        .route("/sessions/:id/accept", post(accept))
        .route("/sessions/:id/assessment/next", get(next_item))
        .route("/sessions/:id/assessment/responses", post(respond))
        .route("/sessions/:id/result", get(result))
        .route("/sessions/:id/events", get(events))
        .route("/sessions/:id/clear-override", post(clear_override))
        .route("/sessions/:id/close", post(close))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let sessions = state.sessions.read().unwrap_or_else(|p| p.into_inner()).len();
    Json(json!({ "status": "ok", "sessions": sessions, "scales": state.engine.catalog().len() }))
}

async fn create_session(State(state): State<Arc<AppState>>) -> Result<(StatusCode, Json<Created>), ApiError> {
    let id = uuid::Uuid::new_v4().simple().to_string();
    let st = Arc::clone(&state);
    let runner = tokio::task::spawn_blocking(move || st.open(id))
        .await
        .map_err(|e| ApiError::internal(format!("session task failed: {e}")))??;
    let created = Created {
        session_id: runner.session_id().to_owned(),
        phase: runner.session.phase,
        greeting: runner.greeting().to_owned(),
        context_version: runner.session.store.version(),
    };
    let handle = Arc::new(SessionHandle::new(runner));
    state.sessions.write().unwrap_or_else(|p| p.into_inner()).insert(created.session_id.clone(), Arc::clone(&handle));
    if state.options.monitor {
        tokio::spawn(monitor(Arc::clone(&state), handle));
    }
    Ok((StatusCode::CREATED, Json(created)))
}

async fn summary(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Summary>, ApiError> {
    let handle = state.session(&id)?;
    let r = handle.lock();
    Ok(Json(Summary {
        session_id: id,
        phase: r.session.phase,
        risk_level: r.session.effective_risk_level(),
        turn: r.session.context().turn,
        context_version: r.session.store.version(),
        audit_events: r.audit().len(),
    }))
}

async fn turn(State(state): State<Arc<AppState>>, Path(id): Path<String>, Json(body): Json<TurnBody>) -> Result<Json<TurnResponse>, ApiError> {
    let resp = run(&state, &id, move |r| r.handle_turn(&body.text, body.latency_ms, now_ms())).await?;
    let st = Arc::clone(&state);
    let resp = tokio::task::spawn_blocking(move || st.polish(resp)).await.map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(resp))
}

async fn accept(State(state): State<Arc<AppState>>, Path(id): Path<String>, Json(body): Json<AcceptBody>) -> Result<Json<AssessmentStatus>, ApiError> {
    Ok(Json(run(&state, &id, move |r| r.accept(&body.scale_id, now_ms())).await?))
}

async fn next_item(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<AssessmentStatus>, ApiError> {
    let handle = state.session(&id)?;
    let status = handle.lock().assessment_status();
    Ok(Json(status))
}

async fn respond(State(state): State<Arc<AppState>>, Path(id): Path<String>, Json(body): Json<ResponseBody>) -> Result<Json<AssessmentStatus>, ApiError> {
    Ok(Json(run(&state, &id, move |r| r.respond(&body.item_id, body.value, now_ms())).await?))
}

async fn result(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let handle = state.session(&id)?;
    let last = handle.lock().session.last_result.clone();
    match last {
        Some(r) => Ok(Json(r).into_response()),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "no completed assessment yet")),
    }
}

async fn clear_override(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<TurnResponse>, ApiError> {
    Ok(Json(run(&state, &id, |r| r.clear_override(now_ms())).await?))
}

async fn close(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<TurnResponse>, ApiError> {
    Ok(Json(run(&state, &id, |r| r.close(now_ms())).await?))
}

fn sse_event(e: &StreamEvent) -> Event {
    Event::default().id(e.seq.to_string()).event(e.kind.clone()).json_data(e).unwrap_or_default()
}

fn is_close(e: &StreamEvent) -> bool {
    e.kind == "phase_transition" && e.data["to"] == "closed"
}

/// Resumes after `Last-Event-ID` (or `?last_seq=`). Events are delivered in
/// seq order without duplicates; the stream ends after the session closes.
/// A subscriber that falls too far behind is disconnected and should
/// reconnect with its last seq.
async fn events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let handle = state.session(&id)?;
    let header_seq = headers.get("last-event-id").and_then(|v| v.to_str().ok()).and_then(|s| s.trim().parse().ok());
    let after = header_seq.or(q.last_seq);
    let (backlog, rx) = handle.subscribe(after);
    let mut last = after;
    let live = BroadcastStream::new(rx).take_while(|r| futures::future::ready(r.is_ok())).filter_map(|r| futures::future::ready(r.ok()));
    let ordered = stream::iter(backlog).chain(live).filter(move |e| {
        let fresh = last.is_none_or(|l| e.seq > l);
        if fresh {
            last = Some(e.seq);
        }
        futures::future::ready(fresh)
    });
    // A `None` marker right after the close event ends the stream without
    // waiting for another event.
    let until_closed = ordered
        .flat_map(|e| {
            let end = is_close(&e).then_some(None);
            stream::iter(std::iter::once(Some(e)).chain(end))
        })
        .take_while(|e| futures::future::ready(e.is_some()))
        .map(|e| Ok(sse_event(&e.expect("markers end the stream"))));
    Ok(Sse::new(until_closed).keep_alive(KeepAlive::new().interval(state.options.keepalive)))
}

/// Re-scores every new context version off the session lock and injects an
/// override through the session's queue when the verdict crosses the bar.
async fn monitor(state: Arc<AppState>, handle: Arc<SessionHandle>) {
    let mut versions = handle.version.subscribe();
    while versions.changed().await.is_ok() {
        versions.borrow_and_update();
        let (snapshot, previous, phase) = {
            let r = handle.lock();
            (r.session.store.snapshot(), r.session.risk_state.clone(), r.session.phase)
        };
        match phase {
            SessionPhase::Closed => break,
            SessionPhase::Intervention => continue,
            _ => {}
        }
        let verdict = evaluate(&snapshot, state.engine.lexicon(), &state.engine.config().risk, Some(&previous));
        if verdict.level != RiskLevel::Override {
            continue;
        }
        let version = snapshot.version;
        let id = handle.id.clone();
        match run(&state, &id, move |r| r.raise_from_monitor(version, now_ms())).await {
            Ok(true) => tracing::info!(session = %id, version, "monitor raised override"),
            Ok(false) => {}
            Err(e) => tracing::warn!(session = %id, error = %e.message, "monitor raise failed"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use scalewise_core::fixtures;

    #[test]
    fn subscribe_is_gap_free_around_an_input() {
        let engine = Arc::new(fixtures::engine());
        let runner = SessionRunner::new(engine, "h", 0, None).unwrap();
        let handle = SessionHandle::new(runner);
        let (backlog, mut rx) = handle.subscribe(None);
        assert_eq!(backlog.len(), 1, "genesis is a phase transition");
        let applied = handle.apply(|r| r.handle_turn("i want to kill myself", 0, 1));
        assert_eq!(applied.result.unwrap().phase, SessionPhase::Intervention);
        assert!(applied.entered_intervention.is_some());
        let mut kinds = Vec::new();
        while let Ok(e) = rx.try_recv() {
            kinds.push(e.kind);
        }
        assert_eq!(kinds, ["risk", "phase_transition"]);
        let (later, _) = handle.subscribe(Some(backlog[0].seq));
        assert_eq!(later.len(), 2);
    }
}
