//! HTTP and websocket front end.
//!
//! | method | path                              | body / result                                  |
//! |--------|-----------------------------------|------------------------------------------------|
//! | GET    | `/v1/environments`                | summaries of every loaded environment          |
//! | GET    | `/v1/environments/{name}`         | full static spec (grid rows, tasks, actions)   |
//! | POST   | `/v1/sessions`                    | `{environment, algorithm, seed?}` -> snapshot  |
//! | GET    | `/v1/sessions/{id}`               | snapshot                                       |
//! | POST   | `/v1/sessions/{id}/events`        | one event -> `snapshot` or `rejected` (409)    |
//! | GET    | `/v1/sessions/{id}/log`           | accepted events, one JSON object per line      |
//! | GET    | `/v1/sessions/{id}/dataset`       | dataset text                                   |
//! | GET    | `/v1/sessions/{id}/checkpoint`    | learner checkpoint (waits for running refits)  |
//! | GET    | `/v1/sessions/{id}/ws`            | websocket: events in, server messages out      |
//!
//! On the websocket the server sends a snapshot on connect and after every
//! event. While an agent episode is running it also generates one
//! `agent_step` per tick, unless the tick interval is zero (clients then
//! send `agent_step` themselves).

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bam_core::agents::Algorithm;
use bam_core::domains::{Environment, ACTION_LABELS};
use bam_core::learner::{ModelConfig, Schedule};
use serde::{Deserialize, Serialize};

use crate::protocol::{Mode, ServerMessage, SessionEvent, Snapshot};
use crate::session::{Session, SessionConfig};
use crate::store::{valid_id, Catalog, SessionStore, StoreError};

pub struct AppState {
    catalog: Catalog,
    sources: HashMap<String, String>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    store: Option<SessionStore>,
    tick: Duration,
    counter: AtomicU64,
}

impl AppState {
    /// `environments` maps names to environment file text.
    pub fn new(
        environments: Vec<(String, String)>,
        store: Option<SessionStore>,
        tick: Duration,
    ) -> Result<Self, bam_core::error::EnvError> {
        let mut catalog = Catalog::new();
        let mut sources = HashMap::new();
        for (name, text) in environments {
            let env = Environment::from_text(&text)?;
            catalog.insert(name.clone(), Arc::new(env));
            sources.insert(name, text);
        }
        Ok(Self {
            catalog,
            sources,
            sessions: Mutex::new(HashMap::new()),
            store,
            tick,
            counter: AtomicU64::new(0),
        })
    }

    /// Loads every `*.env` file in `dir`, named by file stem.
    pub fn from_dir(dir: &Path, store: Option<SessionStore>, tick: Duration) -> anyhow::Result<Self> {
        let mut envs = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "env") {
                let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                envs.push((name, std::fs::read_to_string(&path)?));
            }
        }
        envs.sort();
        Ok(Self::new(envs, store, tick)?)
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        if let Some(s) = self.sessions.lock().expect("session table poisoned").get(id) {
            return Ok(s.clone());
        }
        let store = self.store.as_ref().ok_or_else(|| ApiError::not_found(id))?;
        if !store.exists(id) {
            return Err(ApiError::not_found(id));
        }
        let session = store.load(id, &self.catalog).map_err(ApiError::internal)?;
        let mut table = self.sessions.lock().expect("session table poisoned");
        Ok(table
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(session)))
            .clone())
    }

    fn next_id(&self) -> String {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        loop {
            let id = format!("s{:08x}{:04x}", rand::random::<u32>(), n & 0xffff);
            let taken = self.sessions.lock().expect("session table poisoned").contains_key(&id)
                || self.store.as_ref().is_some_and(|s| s.exists(&id));
            if !taken {
                return id;
            }
        }
    }

    /// Applies one event and persists at episode boundaries. A storage
    /// failure makes the session read-only.
    fn apply(&self, session: &Mutex<Session>, event: &SessionEvent) -> (StatusCode, ServerMessage) {
        let mut s = session.lock().expect("session poisoned");
        match s.apply(event) {
            Ok(snapshot) => {
                let snapshot = match &self.store {
                    Some(store) if s.boundary() == s.log().len() => {
                        let wait = s.mode() == Mode::Ended;
                        match store.persist(&mut s, wait) {
                            Ok(()) => snapshot,
                            Err(e) => {
                                s.set_read_only(format!("storage failure: {e}"));
                                s.snapshot()
                            }
                        }
                    }
                    _ => snapshot,
                };
                (StatusCode::OK, ServerMessage::Snapshot(snapshot))
            }
            Err(e) => (
                StatusCode::CONFLICT,
                ServerMessage::Rejected {
                    seq: event.seq,
                    reason: e.to_string(),
                },
            ),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn not_found(what: &str) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: format!("`{what}` not found"),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        Self::internal(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ServerMessage::Error { message: self.message })).into_response()
    }
}

#[derive(Serialize, Deserialize)]
pub struct EnvironmentSummary {
    pub name: String,
    pub domain: String,
    pub width: usize,
    pub height: usize,
    pub tasks: Vec<String>,
}

#[derive(Serialize, Deserialize)]
pub struct TaskView {
    pub name: String,
    pub goals: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
pub struct EnvironmentView {
    pub name: String,
    pub domain: String,
    pub width: usize,
    pub height: usize,
    pub horizon: usize,
    /// Grid rows in the environment file's cell codes, `y = 0` first.
    pub rows: Vec<String>,
    pub tasks: Vec<TaskView>,
    /// Action labels by index.
    pub actions: Vec<String>,
    /// The environment file itself.
    pub source: String,
}

fn summary(name: &str, env: &Environment) -> EnvironmentSummary {
    EnvironmentSummary {
        name: name.to_string(),
        domain: env.spec.domain.name().to_string(),
        width: env.spec.width,
        height: env.spec.height,
        tasks: env.spec.tasks.iter().map(|t| t.name.clone()).collect(),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub environment: String,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub schedule: Option<Schedule>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/environments", get(list_environments))
        .route("/v1/environments/{name}", get(environment))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(session_snapshot))
        .route("/v1/sessions/{id}/events", post(post_event))
        .route("/v1/sessions/{id}/log", get(session_log))
        .route("/v1/sessions/{id}/dataset", get(session_dataset))
        .route("/v1/sessions/{id}/checkpoint", get(session_checkpoint))
        .route("/v1/sessions/{id}/ws", get(session_socket))
        .with_state(state)
}

async fn list_environments(State(app): State<Arc<AppState>>) -> Json<Vec<EnvironmentSummary>> {
    Json(app.catalog.iter().map(|(n, e)| summary(n, e)).collect())
}

async fn environment(
    State(app): State<Arc<AppState>>,
    UrlPath(name): UrlPath<String>,
) -> Result<Json<EnvironmentView>, ApiError> {
    let env = app.catalog.get(&name).ok_or_else(|| ApiError::not_found(&name))?;
    let spec = &env.spec;
    let text = spec.to_text();
    let rows = text
        .lines()
        .skip_while(|l| *l != "grid:")
        .skip(1)
        .map(str::to_string)
        .collect();
    Ok(Json(EnvironmentView {
        name: name.clone(),
        domain: spec.domain.name().to_string(),
        width: spec.width,
        height: spec.height,
        horizon: spec.horizon,
        rows,
        tasks: spec
            .tasks
            .iter()
            .map(|t| TaskView {
                name: t.name.clone(),
                goals: t.goals.clone(),
            })
            .collect(),
        actions: ACTION_LABELS.iter().map(|s| s.to_string()).collect(),
        source: app.sources.get(&name).cloned().unwrap_or_default(),
    }))
}

/// Runs blocking session work (event application may wait for a refit).
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<Snapshot>), ApiError> {
    let env = app
        .catalog
        .get(&req.environment)
        .cloned()
        .ok_or_else(|| ApiError::bad_request(format!("unknown environment `{}`", req.environment)))?;
    let config = SessionConfig {
        environment: req.environment,
        algorithm: req.algorithm,
        seed: req.seed,
        model: req.model.unwrap_or_default(),
        schedule: req.schedule.unwrap_or_default(),
    };
    let id = app.next_id();
    let app2 = app.clone();
    let snapshot = blocking(move || -> Result<Snapshot, ApiError> {
        let mut session = Session::new(id.clone(), config, env);
        if let Some(store) = &app2.store {
            store.persist(&mut session, false)?;
        }
        let snapshot = session.snapshot();
        app2.sessions
            .lock()
            .expect("session table poisoned")
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(snapshot)
    })
    .await??;
    Ok((StatusCode::CREATED, Json(snapshot)))
}

fn checked(id: &str) -> Result<(), ApiError> {
    if valid_id(id) {
        Ok(())
    } else {
        Err(ApiError::not_found(id))
    }
}

async fn session_snapshot(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Snapshot>, ApiError> {
    checked(&id)?;
    blocking(move || {
        let s = app.session(&id)?;
        let snapshot = s.lock().expect("session poisoned").snapshot();
        Ok(Json(snapshot))
    })
    .await?
}

async fn post_event(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(event): Json<SessionEvent>,
) -> Result<(StatusCode, Json<ServerMessage>), ApiError> {
    checked(&id)?;
    blocking(move || {
        let s = app.session(&id)?;
        let (status, msg) = app.apply(&s, &event);
        Ok((status, Json(msg)))
    })
    .await?
}

async fn session_log(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    checked(&id)?;
    let body = blocking(move || -> Result<String, ApiError> {
        let s = app.session(&id)?;
        let s = s.lock().expect("session poisoned");
        let mut out = String::new();
        for e in s.log() {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        Ok(out)
    })
    .await??;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn session_dataset(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    checked(&id)?;
    let body = blocking(move || -> Result<String, ApiError> {
        let s = app.session(&id)?;
        let text = s.lock().expect("session poisoned").dataset().to_text();
        Ok(text)
    })
    .await??;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], body).into_response())
}

async fn session_checkpoint(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Response, ApiError> {
    checked(&id)?;
    let body = blocking(move || -> Result<String, ApiError> {
        let s = app.session(&id)?;
        let json = s.lock().expect("session poisoned").checkpoint().to_json();
        Ok(json)
    })
    .await??;
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

async fn session_socket(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    upgrade: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    checked(&id)?;
    let app2 = app.clone();
    let session = blocking(move || app2.session(&id)).await??;
    Ok(upgrade.on_upgrade(move |socket| run_socket(app, session, socket)))
}

async fn send(socket: &mut WebSocket, msg: &ServerMessage) -> bool {
    let text = serde_json::to_string(msg).expect("message serializes");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn run_socket(app: Arc<AppState>, session: Arc<Mutex<Session>>, mut socket: WebSocket) {
    let snapshot = session.lock().expect("session poisoned").snapshot();
    let mut agent_active = snapshot.mode == Mode::AgentControl;
    if !send(&mut socket, &ServerMessage::Snapshot(snapshot)).await {
        return;
    }
    let ticking = !app.tick.is_zero();
    let mut ticker = tokio::time::interval(if ticking { app.tick } else { Duration::from_secs(3600) });
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    ticker.tick().await;
    loop {
        let event = tokio::select! {
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Text(text))) => match serde_json::from_str::<SessionEvent>(&text) {
                    Ok(e) => e,
                    Err(e) => {
                        let msg = ServerMessage::Error { message: format!("bad message: {e}") };
                        if !send(&mut socket, &msg).await {
                            return;
                        }
                        continue;
                    }
                },
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => continue,
            },
            _ = ticker.tick(), if ticking && agent_active => SessionEvent::tick(),
        };
        let (app2, s2) = (app.clone(), session.clone());
        let Ok((_, msg)) = tokio::task::spawn_blocking(move || app2.apply(&s2, &event)).await else {
            return;
        };
        if let ServerMessage::Snapshot(s) = &msg {
            let was_active = agent_active;
            agent_active = s.mode == Mode::AgentControl;
            if agent_active && !was_active {
                ticker.reset();
            }
        }
        if !send(&mut socket, &msg).await {
            return;
        }
    }
}
