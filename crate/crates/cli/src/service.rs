//! HTTP session service. Each session holds a world and a stack of
//! trajectories; every command reshapes the current one.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use semtraj::chomp::{command_to_cost, optimize};
use semtraj::dataset::Generator;
use semtraj::eval::{sweep, SweepCell};
use semtraj::geom::{Trajectory, World};
use semtraj::language::{parse_command, Split};
use semtraj::model::{ModelInput, Reshaper};

pub const API_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DEFAULT_IDLE: Duration = Duration::from_secs(3600);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Model,
    Oracle,
}

#[derive(Clone, Debug, Serialize)]
pub struct HistoryEntry {
    pub command: String,
    pub trajectory: Trajectory,
}

#[derive(Debug)]
struct Session {
    world: World,
    engine: Engine,
    /// `history[0]` is `("", ξ_o)`.
    history: Vec<HistoryEntry>,
    last_used: Instant,
}

type SessionRef = Arc<tokio::sync::Mutex<Session>>;

pub struct AppState {
    model: Option<Arc<dyn Reshaper>>,
    checkpoint: Option<PathBuf>,
    generator: Generator,
    sessions: Mutex<HashMap<String, SessionRef>>,
    idle: Duration,
}

impl AppState {
    pub fn new(model: Option<Box<dyn Reshaper>>, checkpoint: Option<PathBuf>, generator: Generator) -> Self {
        AppState {
            model: model.map(Arc::from),
            checkpoint,
            generator,
            sessions: Mutex::new(HashMap::new()),
            idle: DEFAULT_IDLE,
        }
    }

    pub fn with_idle_timeout(mut self, idle: Duration) -> Self {
        self.idle = idle;
        self
    }

    /// Drops sessions idle for longer than the timeout; returns how many.
    pub fn evict_idle(&self) -> usize {
        let mut sessions = self.sessions.lock().expect("session table");
        let before = sessions.len();
        sessions.retain(|_, s| match s.try_lock() {
            Ok(s) => s.last_used.elapsed() < self.idle,
            Err(_) => true,
        });
        before - sessions.len()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table").len()
    }

    fn session(&self, id: &str) -> Result<SessionRef, ApiError> {
        self.sessions
            .lock()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

/// JSON body; anything that does not deserialize is a 400.
fn parse_body<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    seed: Option<u64>,
    engine: Option<Engine>,
}

#[derive(Debug, Serialize)]
pub struct CreateResponse {
    pub id: String,
    pub engine: Engine,
    pub world: World,
    pub trajectory: Trajectory,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommandRequest {
    text: String,
}

#[derive(Debug, Serialize)]
pub struct CommandResponse {
    pub trajectory: Trajectory,
    pub similarity: Vec<f32>,
    pub engine: Engine,
    pub elapsed_ms: f64,
    pub history_len: usize,
}

#[derive(Debug, Serialize)]
pub struct SessionView {
    pub id: String,
    pub engine: Engine,
    pub world: World,
    pub history: Vec<HistoryEntry>,
    pub trajectory: Trajectory,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepRequest {
    target: Option<usize>,
    #[serde(default)]
    holdout: bool,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "checkpoint": state.checkpoint.as_ref().map(|p| p.display().to_string()),
        "version": API_VERSION,
    }))
}

async fn create(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<CreateResponse>, ApiError> {
    let req: CreateRequest = parse_body(&body)?;
    let engine = match req.engine {
        Some(e) => e,
        None if state.model.is_some() => Engine::Model,
        None => Engine::Oracle,
    };
    if engine == Engine::Model && state.model.is_none() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "model engine requested but no checkpoint is loaded",
        ));
    }
    let seed = req.seed.unwrap_or_else(rand::random);
    let gen_state = state.clone();
    let (world, xi_o) = tokio::task::spawn_blocking(move || {
        gen_state
            .generator
            .random_scene(seed, &gen_state.generator.cfg.world)
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let id = format!("{:016x}", rand::random::<u64>());
    let session = Session {
        world: world.clone(),
        engine,
        history: vec![HistoryEntry {
            command: String::new(),
            trajectory: xi_o.clone(),
        }],
        last_used: Instant::now(),
    };
    state
        .sessions
        .lock()
        .expect("session table")
        .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok(Json(CreateResponse {
        id,
        engine,
        world,
        trajectory: xi_o,
    }))
}

fn view(id: String, s: &Session) -> SessionView {
    SessionView {
        id,
        engine: s.engine,
        world: s.world.clone(),
        history: s.history.clone(),
        trajectory: s.history.last().expect("history is never empty").trajectory.clone(),
    }
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let session = state.session(&id)?;
    let mut s = session.lock().await;
    s.last_used = Instant::now();
    Ok(Json(view(id, &s)))
}

/// Applies `text` to `current` with the session's engine.
fn reshape(state: &AppState, engine: Engine, world: &World, current: &Trajectory, text: &str) -> Result<(Trajectory, Vec<f32>), ApiError> {
    match engine {
        Engine::Oracle => {
            let ast = parse_command(text, &state.generator.lexicon, &world.labels())
                .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
            let spec = command_to_cost(&ast, world, &state.generator.cfg.chomp).map_err(ApiError::internal)?;
            let out = optimize(current, &spec, &state.generator.cfg.chomp)
                .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
            let similarity = (0..world.objects.len())
                .map(|i| if i == ast.target_index { 1.0 } else { 0.0 })
                .collect();
            Ok((out, similarity))
        }
        Engine::Model => {
            let model = state
                .model
                .as_ref()
                .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "no checkpoint loaded"))?;
            let input = ModelInput {
                world,
                xi_o: current,
                command: text,
            };
            let out = model
                .predict(&[input])
                .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?
                .pop()
                .ok_or_else(|| ApiError::internal("model returned no trajectory"))?;
            if !out.is_finite() {
                return Err(ApiError::internal("model produced non-finite waypoints"));
            }
            Ok((out, model.similarity(text, world)))
        }
    }
}

async fn command(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<CommandResponse>, ApiError> {
    let req: CommandRequest = parse_body(&body)?;
    if req.text.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "command text is empty"));
    }
    let session = state.session(&id)?;
    // Held across the computation so commands to one session are serialized.
    let mut s = session.lock().await;
    let (engine, world) = (s.engine, s.world.clone());
    let current = s.history.last().expect("history is never empty").trajectory.clone();
    let started = Instant::now();
    let st = state.clone();
    let text = req.text.clone();
    let (trajectory, similarity) = tokio::task::spawn_blocking(move || reshape(&st, engine, &world, &current, &text))
        .await
        .map_err(ApiError::internal)??;
    let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    s.history.push(HistoryEntry {
        command: req.text,
        trajectory: trajectory.clone(),
    });
    s.last_used = Instant::now();
    Ok(Json(CommandResponse {
        trajectory,
        similarity,
        engine,
        elapsed_ms,
        history_len: s.history.len(),
    }))
}

async fn undo(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let session = state.session(&id)?;
    let mut s = session.lock().await;
    s.last_used = Instant::now();
    if s.history.len() <= 1 {
        return Err(ApiError::new(StatusCode::CONFLICT, "cannot undo past the original trajectory"));
    }
    s.history.pop();
    Ok(Json(view(id, &s)))
}

async fn sweep_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Vec<SweepCell>>, ApiError> {
    let req: SweepRequest = parse_body(&body)?;
    let session = state.session(&id)?;
    let mut s = session.lock().await;
    s.last_used = Instant::now();
    let target = req.target.unwrap_or(0);
    if target >= s.world.objects.len() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("no object {target}")));
    }
    let (engine, world) = (s.engine, s.world.clone());
    let current = s.history.last().expect("history is never empty").trajectory.clone();
    let split = if req.holdout { Split::Holdout } else { Split::Train };
    let st = state.clone();
    let cells = tokio::task::spawn_blocking(move || {
        let predict = |inputs: &[ModelInput<'_>]| -> semtraj::Result<Vec<Trajectory>> {
            match (engine, &st.model) {
                (Engine::Model, Some(m)) => m.predict(inputs),
                _ => inputs
                    .iter()
                    .map(|i| {
                        reshape(&st, Engine::Oracle, i.world, i.xi_o, i.command)
                            .map(|(t, _)| t)
                            .map_err(|e| semtraj::Error::Argument(e.message))
                    })
                    .collect(),
            }
        };
        sweep(&predict, &world, &current, target, &st.generator.lexicon, split, 0)
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    Ok(Json(cells))
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/v1/health", get(health))
        .route("/api/v1/session", post(create))
        .route("/api/v1/session/{id}", get(get_session))
        .route("/api/v1/session/{id}/command", post(command))
        .route("/api/v1/session/{id}/undo", post(undo))
        .route("/api/v1/session/{id}/sweep", post(sweep_session))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until the listener fails or the process receives Ctrl-C, evicting
/// idle sessions once a minute.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>, static_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let janitor = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let n = janitor.evict_idle();
            if n > 0 {
                log::info!("evicted {n} idle sessions");
            }
        }
    });
    axum::serve(listener, router(state, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
