use std::collections::HashMap;
use std::fs::OpenOptions;
use std::future::Future;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clfb_core::harness::{ExperimentConfig, FORMAT_VERSION};
use clfb_core::seed::{streams, SeedStream};
use clfb_core::world::TrajId;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::net::TcpListener;

use crate::session::{Assets, Command, Mode, RatingRequest, Session, SessionError, Side, Status, Step, Suggestion};

pub struct AppState {
    pub assets: Arc<Assets>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    seeds: SeedStream,
    started: Instant,
    digest: String,
    log_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(cfg: &ExperimentConfig, assets: Assets) -> std::io::Result<Self> {
        let log_dir = cfg.serve.log_dir.clone();
        if let Some(dir) = &log_dir {
            std::fs::create_dir_all(dir)?;
        }
        let digest = Sha256::digest(cfg.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        Ok(AppState {
            assets: Arc::new(assets),
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(0),
            seeds: cfg.seeds(),
            started: Instant::now(),
            digest,
            log_dir,
        })
    }

    /// Milliseconds since the server started.
    pub fn now_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    pub fn config_digest(&self) -> &str {
        &self.digest
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(id.to_string()))
    }

    fn persist(&self, session: &Session) {
        let Some(dir) = &self.log_dir else { return };
        let result = (|| -> std::io::Result<()> {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(format!("{}.jsonl", session.id())))?;
            let entry = session.log().last().expect("accepted commands are logged");
            writeln!(f, "{}", serde_json::to_string(entry)?)?;
            f.flush()?;
            if session.status() != Status::Active {
                let trace = json!({
                    "format_version": FORMAT_VERSION,
                    "session": session.view(&self.assets),
                    "metrics": session.metrics(),
                });
                std::fs::write(dir.join(format!("{}.trace.json", session.id())), serde_json::to_vec_pretty(&trace)?)?;
            }
            Ok(())
        })();
        if let Err(e) = result {
            tracing::error!(session = session.id(), error = %e, "failed to persist session log");
        }
    }
}

#[derive(Debug)]
enum ApiError {
    Session(SessionError),
    NotFound(String),
    BadRequest(String),
    Internal(String),
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        ApiError::Session(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code, message) = match self {
            ApiError::NotFound(id) => (StatusCode::NOT_FOUND, "session_not_found", format!("no session `{id}`")),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, "bad_request", m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", m),
            ApiError::Session(e) => {
                let status = match e {
                    SessionError::Closed => StatusCode::CONFLICT,
                    SessionError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
                    _ => StatusCode::BAD_REQUEST,
                };
                (status, e.code(), e.to_string())
            }
        };
        let body = json!({
            "format_version": FORMAT_VERSION,
            "error": { "code": code, "message": message },
        });
        (status, Json(body)).into_response()
    }
}

/// Per-step rendering of one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSet {
    pub trajectory: TrajId,
    pub frames: Vec<Frame>,
    pub objects: Objects,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub gripper_open: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objects {
    pub pan: [f64; 2],
    pub spoon: [f64; 2],
}

fn frames(assets: &Assets, id: TrajId) -> FrameSet {
    let cfg = &assets.pool.config;
    let traj = &assets.pool.get(id).expect("sessions show pool trajectories").trajectory;
    FrameSet {
        trajectory: id,
        frames: traj
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| Frame {
                t: i as f64 * cfg.dt,
                x: s[0],
                y: s[1],
                gripper_open: s[2] > 0.5,
            })
            .collect(),
        objects: Objects {
            pan: cfg.pan,
            spoon: cfg.spoon,
        },
    }
}

#[derive(Serialize)]
struct RateOut {
    iteration: usize,
    trajectory: FrameSet,
}

#[derive(Serialize)]
struct StepOut {
    format_version: u32,
    session: String,
    accepted: bool,
    status: Status,
    iteration: usize,
    shown: Vec<FrameSet>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rate: Option<RateOut>,
    #[serde(skip_serializing_if = "Option::is_none")]
    suggestion: Option<Suggestion>,
}

fn step_out(assets: &Assets, id: &str, step: Step) -> StepOut {
    StepOut {
        format_version: FORMAT_VERSION,
        session: id.to_string(),
        accepted: step.accepted,
        status: step.status,
        iteration: step.iteration,
        shown: step.shown.iter().map(|&t| frames(assets, t)).collect(),
        rate: step.rate.map(|RatingRequest { iteration, trajectory }| RateOut {
            iteration,
            trajectory: frames(assets, trajectory),
        }),
        suggestion: step.suggestion,
    }
}

fn parse_body(body: &[u8]) -> Result<Value, ApiError> {
    let v: Value = serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("invalid JSON body: {e}")))?;
    if !v.is_object() {
        return Err(ApiError::BadRequest("body must be a JSON object".into()));
    }
    Ok(v)
}

fn feedback_command(v: &Value) -> Result<Command, ApiError> {
    let wrong = |m: &str| ApiError::Session(SessionError::WrongPayload(m.to_string()));
    let present = ["text", "chosen", "satisfied"].iter().filter(|k| v.get(**k).is_some()).count()
        + usize::from(v.get("text").is_none() && v.get("use_suggestion").is_some());
    if present != 1 {
        return Err(wrong("expected exactly one of `text`, `chosen` or `satisfied`"));
    }
    if let Some(c) = v.get("chosen") {
        let chosen: Side = serde_json::from_value(c.clone()).map_err(|_| wrong("`chosen` must be \"a\" or \"b\""))?;
        return Ok(Command::Choice { chosen });
    }
    if let Some(s) = v.get("satisfied") {
        return match s.as_bool() {
            Some(true) => Ok(Command::Satisfied),
            _ => Err(wrong("`satisfied` must be true")),
        };
    }
    let use_suggestion = match v.get("use_suggestion") {
        None => false,
        Some(b) => b.as_bool().ok_or_else(|| wrong("`use_suggestion` must be a boolean"))?,
    };
    let text = match v.get("text") {
        None => String::new(),
        Some(t) => t.as_str().ok_or_else(|| wrong("`text` must be a string"))?.to_string(),
    };
    Ok(Command::Feedback { text, use_suggestion })
}

fn rating_command(v: &Value) -> Result<Command, ApiError> {
    let value = v
        .get("value")
        .and_then(Value::as_i64)
        .ok_or_else(|| ApiError::BadRequest("`value` must be an integer".into()))?;
    let iteration = match v.get("iteration") {
        None | Some(Value::Null) => None,
        Some(i) => Some(
            i.as_u64()
                .ok_or_else(|| ApiError::BadRequest("`iteration` must be a non-negative integer".into()))? as usize,
        ),
    };
    Ok(Command::Rating { iteration, value })
}

async fn apply(state: Arc<AppState>, id: String, command: Command) -> Result<Json<StepOut>, ApiError> {
    let session = state.session(&id)?;
    let now = state.now_ms();
    tokio::task::spawn_blocking(move || {
        let mut s = session.lock().expect("session lock");
        let step = s.handle(&state.assets, command, now, || state.now_ms())?;
        if step.accepted {
            state.persist(&s);
        }
        Ok(Json(step_out(&state.assets, &id, step)))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn create(State(state): State<Arc<AppState>>, body: axum::body::Bytes) -> Result<impl IntoResponse, ApiError> {
    let v = parse_body(&body)?;
    let mode: Mode = v
        .get("mode")
        .and_then(Value::as_str)
        .ok_or_else(|| ApiError::BadRequest("`mode` must be a string".into()))?
        .parse()?;
    let n = state.next_id.fetch_add(1, Ordering::SeqCst);
    let id = format!("s-{n}");
    let seed = state.seeds.seed(streams::GATEWAY, n);
    let now = state.now_ms();
    let st = state.clone();
    let out = tokio::task::spawn_blocking(move || -> Result<StepOut, ApiError> {
        let (session, step) = Session::create(&st.assets, id.clone(), mode, seed, now, || st.now_ms())?;
        st.persist(&session);
        let out = step_out(&st.assets, &id, step);
        st.sessions
            .lock()
            .expect("session table lock")
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(out)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    tracing::info!(session = %out.session, %mode, "session created");
    Ok((StatusCode::CREATED, Json(out)))
}

async fn feedback(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> Result<Json<StepOut>, ApiError> {
    state.session(&id)?;
    let command = feedback_command(&parse_body(&body)?)?;
    apply(state, id, command).await
}

async fn rating(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> Result<Json<StepOut>, ApiError> {
    state.session(&id)?;
    let command = rating_command(&parse_body(&body)?)?;
    apply(state, id, command).await
}

async fn show(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let session = state.session(&id)?;
    let s = session.lock().expect("session lock");
    let view = s.view(&state.assets);
    let shown: Vec<FrameSet> = view.shown.iter().map(|&t| frames(&state.assets, t)).collect();
    Ok(Json(json!({ "format_version": FORMAT_VERSION, "session": view, "frames": shown })))
}

async fn metrics(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let session = state.session(&id)?;
    let s = session.lock().expect("session lock");
    Ok(Json(json!({ "format_version": FORMAT_VERSION, "session": id, "metrics": s.metrics() })))
}

async fn log(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let session = state.session(&id)?;
    let s = session.lock().expect("session lock");
    Ok(Json(json!({ "format_version": FORMAT_VERSION, "session": id, "entries": s.log() })))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "format_version": FORMAT_VERSION,
        "config_sha256": state.digest,
        "pool_size": state.assets.pool.len(),
        "modes": Mode::ALL.iter().map(|m| m.name()).collect::<Vec<_>>(),
    }))
}

async fn not_found() -> ApiError {
    ApiError::BadRequest("no such route".into())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/feedback", post(feedback))
        .route("/sessions/{id}/rating", post(rating))
        .route("/sessions/{id}/metrics", get(metrics))
        .route("/sessions/{id}/log", get(log))
        .fallback(not_found)
        .with_state(state)
}

/// Serves until `shutdown` resolves. Session logs are written as commands
/// arrive, so nothing is buffered at exit.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
