//! HTTP API over live sessions.
//!
//! Commands are JSON over HTTP. `GET /sessions/{id}/events` streams
//! transcript events as server-sent events, or as WebSocket text frames when
//! the request is an upgrade; either way each frame is one transcript line.

use std::collections::HashMap;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use async_trait::async_trait;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use crate::config::FileConfig;
use crate::executor::{start_session, BackendConfig, Kernel};
use crate::fst::{Budgets, Counters};
use crate::llm::LlmProvider;
use crate::notebook::{export_notebook, SessionMeta};
use crate::orchestrator::{Ablations, Deps, Session, SessionConfig};
use crate::transcript::{notebook_trace, read_transcript, Event, TranscriptLog};

/// Where a session keeps its transcript, relative to its workdir.
pub const TRANSCRIPT_PATH: &str = ".cellwise/transcript.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionStatus {
    /// Open, no instruction yet.
    Idle,
    Running,
    /// Open and back at the idle state after an instruction.
    AwaitingUser,
    Aborted,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub id: String,
    pub status: SessionStatus,
    pub config: Value,
    pub counters: Counters,
    pub cost: Decimal,
    pub events: usize,
}

/// Optional per-session settings layered over the server config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CreateSessionRequest {
    pub model: Option<String>,
    pub backend: Option<BackendConfig>,
    pub budgets: Option<Budgets>,
    pub ablations: Option<Ablations>,
}

#[derive(Debug, thiserror::Error)]
pub enum CreateError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Builds the config and dependencies of a new session.
#[async_trait]
pub trait SessionFactory: Send + Sync {
    async fn open(&self, request: &CreateSessionRequest, workdir: &Path) -> Result<(SessionConfig, Deps), CreateError>;
}

/// Factory driven by a config file. `llm` replaces the configured provider.
pub struct FileConfigFactory {
    pub config: FileConfig,
    pub llm: Option<Arc<dyn LlmProvider>>,
}

#[async_trait]
impl SessionFactory for FileConfigFactory {
    async fn open(&self, request: &CreateSessionRequest, workdir: &Path) -> Result<(SessionConfig, Deps), CreateError> {
        let mut file = self.config.clone();
        if let Some(m) = &request.model {
            file.model.name = m.clone();
        }
        if let Some(b) = &request.backend {
            file.executor.backend = b.clone();
        }
        if let Some(b) = request.budgets {
            file.budgets = b;
        }
        if let Some(a) = request.ablations {
            file.ablations = a;
        }
        let invalid = |e: crate::config::ConfigError| CreateError::Invalid(e.to_string());
        let llm = match &self.llm {
            Some(l) => l.clone(),
            None => file.provider().map_err(invalid)?,
        };
        let prompts = file.prompts().map_err(invalid)?;
        let tools = file.tools().map_err(invalid)?;
        let kernel = start_session(&file.backend(), workdir)
            .await
            .map_err(|e| CreateError::BackendUnavailable(e.to_string()))?;
        let deps = Deps {
            llm,
            kernel,
            prompts: Arc::new(prompts),
            prices: file.prices.clone(),
            tools,
            echo_extra: file.echo_extra(),
        };
        Ok((file.session_config(workdir), deps))
    }
}

struct Slot {
    id: String,
    workdir: PathBuf,
    log: Arc<TranscriptLog>,
    kernel: Arc<dyn Kernel>,
    config: Value,
    session: tokio::sync::Mutex<Session>,
    snapshot: Mutex<(SessionStatus, Counters, Decimal)>,
}

impl Slot {
    fn record(&self) -> SessionRecord {
        let (status, counters, cost) = *self.snapshot.lock().expect("poisoned");
        SessionRecord {
            id: self.id.clone(),
            status,
            config: self.config.clone(),
            counters,
            cost,
            events: self.log.len(),
        }
    }

    fn status(&self) -> SessionStatus {
        self.snapshot.lock().expect("poisoned").0
    }
}

pub struct ServiceState {
    factory: Arc<dyn SessionFactory>,
    sessions_dir: PathBuf,
    token: Option<String>,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
}

impl ServiceState {
    /// `token` enables bearer authentication on every route.
    pub fn new(factory: Arc<dyn SessionFactory>, sessions_dir: PathBuf, token: Option<String>) -> Arc<Self> {
        Arc::new(Self {
            factory,
            sessions_dir,
            token,
            sessions: RwLock::new(HashMap::new()),
        })
    }

    fn get(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.sessions
            .read()
            .expect("poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::UnknownSession(id.to_string()))
    }

    pub async fn create(&self, request: &CreateSessionRequest) -> Result<SessionRecord, ApiError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let workdir = self.sessions_dir.join(&id);
        let result = self.open_at(&id, &workdir, request, None).await;
        if result.is_err() {
            let _ = std::fs::remove_dir_all(&workdir);
        }
        result
    }

    async fn open_at(
        &self,
        id: &str,
        workdir: &Path,
        request: &CreateSessionRequest,
        prior: Option<Vec<Event>>,
    ) -> Result<SessionRecord, ApiError> {
        std::fs::create_dir_all(workdir).map_err(|e| ApiError::Internal(e.to_string()))?;
        let (config, deps) = self.factory.open(request, workdir).await?;
        let kernel = deps.kernel.clone();
        let path = workdir.join(TRANSCRIPT_PATH);
        let internal = |e: String| ApiError::Internal(e);
        let (session, status) = match prior {
            None => {
                let log = TranscriptLog::create(&path).map_err(|e| internal(e.to_string()))?;
                (Session::start(config, deps, log).await, SessionStatus::Idle)
            }
            Some(events) => {
                let log = TranscriptLog::resume(&path, events.clone()).map_err(|e| internal(e.to_string()))?;
                (Session::restore(config, deps, log, &events).await, SessionStatus::AwaitingUser)
            }
        };
        let session = match session {
            Ok(s) => s,
            Err(e) => {
                let _ = kernel.shutdown().await;
                return Err(ApiError::Internal(e.to_string()));
            }
        };
        let slot = Arc::new(Slot {
            id: id.to_string(),
            workdir: workdir.to_path_buf(),
            log: session.log().clone(),
            kernel,
            config: json!({
                "model": session.config().model,
                "budgets": session.config().budgets,
                "ablations": session.config().ablations,
                "backend": format!("{:?}", session.kernel().info().backend).to_lowercase(),
            }),
            snapshot: Mutex::new((status, session.counters(), session.cost_total())),
            session: tokio::sync::Mutex::new(session),
        });
        let record = slot.record();
        self.sessions.write().expect("poisoned").insert(id.to_string(), slot);
        Ok(record)
    }

    /// Re-opens every session found under the sessions directory by
    /// replaying its transcript's code. Returns the restored ids.
    pub async fn recover(&self) -> Vec<String> {
        let mut restored = Vec::new();
        let Ok(entries) = std::fs::read_dir(&self.sessions_dir) else {
            return restored;
        };
        let mut dirs: Vec<PathBuf> = entries.flatten().map(|e| e.path()).filter(|p| p.is_dir()).collect();
        dirs.sort();
        for dir in dirs {
            let Some(id) = dir.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
                continue;
            };
            let events = match read_transcript(&dir.join(TRANSCRIPT_PATH)) {
                Ok(ev) if !ev.is_empty() => ev,
                _ => continue,
            };
            let request = echoed_request(&events);
            match self.open_at(&id, &dir, &request, Some(events)).await {
                Ok(_) => restored.push(id),
                Err(e) => tracing::warn!(session = %id, error = %e, "session not restored"),
            }
        }
        restored
    }

    pub fn list(&self) -> Vec<SessionRecord> {
        let mut out: Vec<SessionRecord> = self.sessions.read().expect("poisoned").values().map(|s| s.record()).collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    pub fn record(&self, id: &str) -> Result<SessionRecord, ApiError> {
        Ok(self.get(id)?.record())
    }

    /// Starts an instruction in the background. Returns the sequence number
    /// its first event will carry.
    pub fn post_instruction(&self, id: &str, text: &str) -> Result<u64, ApiError> {
        let slot = self.get(id)?;
        if text.trim().is_empty() {
            return Err(ApiError::EmptyInstruction);
        }
        let first_seq;
        {
            let mut snap = slot.snapshot.lock().expect("poisoned");
            match snap.0 {
                SessionStatus::Idle | SessionStatus::AwaitingUser => {}
                SessionStatus::Running => return Err(ApiError::Busy),
                s => return Err(ApiError::NotOpen(s)),
            }
            snap.0 = SessionStatus::Running;
            first_seq = slot.log.len() as u64;
        }
        let text = text.to_string();
        tokio::spawn(async move {
            let mut session = slot.session.lock().await;
            let result = session.run_instruction(&text).await;
            if let Err(e) = &result {
                tracing::warn!(session = %slot.id, error = %e, "instruction failed");
            }
            let status = if session.is_dead() {
                SessionStatus::Aborted
            } else {
                SessionStatus::AwaitingUser
            };
            *slot.snapshot.lock().expect("poisoned") = (status, session.counters(), session.cost_total());
        });
        Ok(first_seq)
    }

    /// Interrupts the running cell, if any.
    pub async fn interrupt(&self, id: &str) -> Result<bool, ApiError> {
        let slot = self.get(id)?;
        if slot.status() != SessionStatus::Running {
            return Ok(false);
        }
        slot.kernel.interrupt().await.map_err(|e| ApiError::Internal(e.to_string()))
    }

    /// Shuts the kernel down once any running instruction has finished.
    pub async fn close(&self, id: &str) -> Result<SessionRecord, ApiError> {
        let slot = self.get(id)?;
        let session = slot.session.lock().await;
        let _ = session.kernel().shutdown().await;
        slot.snapshot.lock().expect("poisoned").0 = SessionStatus::Closed;
        Ok(slot.record())
    }

    pub fn notebook(&self, id: &str) -> Result<Value, ApiError> {
        let slot = self.get(id)?;
        let cells = notebook_trace(&slot.log.snapshot()).map_err(|e| ApiError::Internal(e.to_string()))?;
        let meta = SessionMeta {
            session_id: slot.id.clone(),
            model: slot.config["model"].as_str().unwrap_or_default().to_string(),
            language: "python".into(),
            workdir: Some(slot.workdir.clone()),
        };
        export_notebook(&cells, &meta).map_err(|e| ApiError::Internal(e.to_string()))
    }

    /// Resolves a workdir-relative path; anything escaping the workdir is
    /// reported as missing.
    pub fn file_path(&self, id: &str, rel: &str) -> Result<PathBuf, ApiError> {
        let slot = self.get(id)?;
        let rel = Path::new(rel);
        let missing = || ApiError::NoSuchFile(rel.display().to_string());
        if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(missing());
        }
        let path = slot.workdir.join(rel);
        let root = slot.workdir.canonicalize().map_err(|_| missing())?;
        let real = path.canonicalize().map_err(|_| missing())?;
        if !real.starts_with(&root) || !real.is_file() {
            return Err(missing());
        }
        Ok(real)
    }

    /// Events from `since` followed by the live tail.
    pub fn events(&self, id: &str, since: u64) -> Result<impl Stream<Item = Event> + Send + 'static, ApiError> {
        Ok(event_stream(self.get(id)?.log.clone(), since))
    }
}

/// Settings a recorded session was created with.
fn echoed_request(events: &[Event]) -> CreateSessionRequest {
    let Ok(echo) = crate::replay::echoed_config(events) else {
        return CreateSessionRequest::default();
    };
    CreateSessionRequest {
        model: echo_field(echo, "model"),
        backend: echo_field(echo, "backend"),
        budgets: echo_field(echo, "budgets"),
        ablations: echo_field(echo, "ablations"),
    }
}

fn echo_field<T: serde::de::DeserializeOwned>(echo: &Value, key: &str) -> Option<T> {
    echo.get(key).cloned().and_then(|v| serde_json::from_value(v).ok())
}

/// Gap-free stream of a log from `since`. A lagging subscriber refills from
/// the stored events, so the output never skips or repeats a sequence number.
pub fn event_stream(log: Arc<TranscriptLog>, since: u64) -> impl Stream<Item = Event> + Send + 'static {
    let (backlog, rx) = log.subscribe_from(since);
    let pending: std::collections::VecDeque<Event> = backlog.into();
    stream::unfold((log, since, pending, rx), |(log, mut next, mut pending, mut rx)| async move {
        loop {
            if let Some(e) = pending.pop_front() {
                if e.seq < next {
                    continue;
                }
                next = e.seq + 1;
                return Some((e, (log, next, pending, rx)));
            }
            match rx.recv().await {
                Ok(e) if e.seq < next => continue,
                Ok(e) if e.seq == next => {
                    next += 1;
                    return Some((e, (log, next, pending, rx)));
                }
                Ok(_) | Err(RecvError::Lagged(_)) => {
                    pending = log.snapshot().into_iter().skip(next as usize).collect();
                }
                Err(RecvError::Closed) => return None,
            }
        }
    })
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session is running an instruction")]
    Busy,
    #[error("instruction text is empty")]
    EmptyInstruction,
    #[error("session is {0:?}")]
    NotOpen(SessionStatus),
    #[error("no such file {0}")]
    NoSuchFile(String),
    #[error("missing or wrong bearer token")]
    Unauthorized,
    #[error(transparent)]
    Create(#[from] CreateError),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn code(&self) -> &'static str {
        match self {
            ApiError::UnknownSession(_) => "unknown_session",
            ApiError::Busy => "busy",
            ApiError::EmptyInstruction => "empty_instruction",
            ApiError::NotOpen(_) => "not_open",
            ApiError::NoSuchFile(_) => "no_such_file",
            ApiError::Unauthorized => "unauthorized",
            ApiError::Create(CreateError::BackendUnavailable(_)) => "backend_unavailable",
            ApiError::Create(CreateError::Invalid(_)) => "invalid_config",
            ApiError::Internal(_) => "internal",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownSession(_) | ApiError::NoSuchFile(_) => StatusCode::NOT_FOUND,
            ApiError::Busy | ApiError::NotOpen(_) => StatusCode::CONFLICT,
            ApiError::EmptyInstruction | ApiError::Create(CreateError::Invalid(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::Create(CreateError::BackendUnavailable(_)) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    /// Body of error responses and error stream frames.
    pub fn frame(&self) -> Value {
        json!({ "error": self.code(), "message": self.to_string() })
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.frame())).into_response()
    }
}

type Shared = Arc<ServiceState>;

#[derive(Debug, Deserialize)]
struct InstructionBody {
    text: String,
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since: Option<u64>,
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/:id", get(get_session).delete(close_session))
        .route("/sessions/:id/instruction", post(post_instruction))
        .route("/sessions/:id/interrupt", post(interrupt_session))
        .route("/sessions/:id/events", get(stream_events))
        .route("/sessions/:id/notebook", get(get_notebook))
        .route("/sessions/:id/files/*path", get(get_file))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

async fn auth(State(state): State<Shared>, request: Request, next: Next) -> Response {
    let Some(token) = &state.token else {
        return next.run(request).await;
    };
    let header_ok = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == token);
    // Browsers cannot set headers on WebSocket or EventSource requests.
    let query_ok = request
        .uri()
        .query()
        .into_iter()
        .flat_map(|q| q.split('&'))
        .any(|kv| kv.strip_prefix("token=") == Some(token.as_str()));
    if header_ok || query_ok {
        next.run(request).await
    } else {
        ApiError::Unauthorized.into_response()
    }
}

async fn create_session(State(state): State<Shared>, body: Option<Json<CreateSessionRequest>>) -> Result<Response, ApiError> {
    let request = body.map(|Json(b)| b).unwrap_or_default();
    let record = state.create(&request).await?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn list_sessions(State(state): State<Shared>) -> Json<Vec<SessionRecord>> {
    Json(state.list())
}

async fn get_session(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionRecord>, ApiError> {
    state.record(&id).map(Json)
}

async fn close_session(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionRecord>, ApiError> {
    state.close(&id).await.map(Json)
}

async fn post_instruction(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<InstructionBody>,
) -> Result<Response, ApiError> {
    let seq = state.post_instruction(&id, &body.text)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "accepted": true, "since": seq }))).into_response())
}

async fn interrupt_session(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let interrupted = state.interrupt(&id).await?;
    Ok(Json(json!({ "acknowledged": true, "interrupted": interrupted })))
}

async fn get_notebook(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    state.notebook(&id).map(Json)
}

async fn get_file(State(state): State<Shared>, UrlPath((id, path)): UrlPath<(String, String)>) -> Result<Response, ApiError> {
    let real = state.file_path(&id, &path)?;
    let bytes = tokio::fs::read(&real).await.map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, content_type(&real))], bytes).into_response())
}

fn content_type(path: &Path) -> &'static str {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default().to_ascii_lowercase();
    match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "svg" => "image/svg+xml",
        "json" => "application/json",
        "csv" => "text/csv",
        "html" | "htm" => "text/html",
        "txt" | "md" | "log" => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

/// The resume point: `since`, else `Last-Event-ID` plus one, else zero.
fn resume_seq(query: &EventsQuery, headers: &HeaderMap) -> u64 {
    query.since.unwrap_or_else(|| {
        headers
            .get("last-event-id")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse::<u64>().ok())
            .map_or(0, |s| s + 1)
    })
}

async fn stream_events(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(query): Query<EventsQuery>,
    headers: HeaderMap,
    ws: Option<WebSocketUpgrade>,
) -> Response {
    let since = resume_seq(&query, &headers);
    let events = state.events(&id, since);
    match ws {
        Some(ws) => ws.on_upgrade(move |socket| ws_stream(socket, events)).into_response(),
        None => {
            let frames: std::pin::Pin<Box<dyn Stream<Item = Result<SseEvent, std::convert::Infallible>> + Send>> =
                match events {
                    Ok(s) => Box::pin(s.map(|e| Ok(SseEvent::default().id(e.seq.to_string()).data(e.to_line())))),
                    Err(err) => Box::pin(stream::once(async move {
                        Ok(SseEvent::default().event("error").data(err.frame().to_string()))
                    })),
                };
            Sse::new(frames).keep_alive(KeepAlive::default()).into_response()
        }
    }
}

async fn ws_stream(mut socket: WebSocket, events: Result<impl Stream<Item = Event> + Send + 'static, ApiError>) {
    let mut events = match events {
        Ok(s) => Box::pin(s),
        Err(err) => {
            let _ = socket.send(Message::Text(err.frame().to_string())).await;
            let _ = socket.send(Message::Close(None)).await;
            return;
        }
    };
    loop {
        tokio::select! {
            next = events.next() => match next {
                Some(e) => {
                    if socket.send(Message::Text(e.to_line())).await.is_err() {
                        return;
                    }
                }
                None => {
                    let _ = socket.send(Message::Close(None)).await;
                    return;
                }
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                _ => {}
            },
        }
    }
}
