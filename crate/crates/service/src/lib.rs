//! HTTP session service: live conversations where every user message runs
//! windowed knowledge extraction and response generation, with a full
//! per-turn trace for inspection.
//!
//! Routes:
//! - `POST /sessions`: create a session
//! - `GET /sessions/{id}`: settings and transcript
//! - `PATCH /sessions/{id}`: change window span, mask or generation settings
//! - `POST /sessions/{id}/messages`: run one turn
//! - `GET /sessions/{id}/trace`: transcript, turn results and knowledge trace
//! - `GET /healthz`

pub mod session;
pub mod store;

use std::collections::HashMap;
use std::future::Future;
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use mind2_core::backend::{Backend, GenerationConfig, RetryPolicy};
use mind2_core::linearize::AblationMask;

pub use session::{
    Event, Session, SessionInfo, SessionSettings, SettingsPatch, Trace, TripletView, TurnError, TurnResult,
    WindowView,
};
pub use store::{EventStore, JsonlStore, MemoryStore, StoreError};

use session::{check_text, run_turn, Backends, MAX_SITUATION_CHARS};

/// Bearer token for deployed demos; unset means no authentication.
pub const TOKEN_ENV: &str = "MIND2_SERVICE_TOKEN";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub auth_token: Option<String>,
    pub extraction_config: GenerationConfig,
    pub retry: RetryPolicy,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            auth_token: None,
            extraction_config: GenerationConfig::extraction(),
            retry: RetryPolicy::default(),
        }
    }
}

struct SessionHandle {
    /// Held for the whole of a state change; tokio's mutex is FIFO, so
    /// turns run in arrival order.
    turn_lock: Mutex<()>,
    snapshot: RwLock<Arc<Session>>,
}

impl SessionHandle {
    fn new(s: Session) -> Self {
        SessionHandle {
            turn_lock: Mutex::new(()),
            snapshot: RwLock::new(Arc::new(s)),
        }
    }

    fn snapshot(&self) -> Arc<Session> {
        self.snapshot.read().expect("snapshot poisoned").clone()
    }

    fn replace(&self, s: Session) {
        *self.snapshot.write().expect("snapshot poisoned") = Arc::new(s);
    }
}

pub struct AppState {
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    store: Arc<dyn EventStore>,
    extraction: Arc<dyn Backend>,
    generation: Arc<dyn Backend>,
    config: ServiceConfig,
}

impl AppState {
    /// Rebuilds every stored session from its event log.
    pub fn new(
        store: Arc<dyn EventStore>,
        extraction: Arc<dyn Backend>,
        generation: Arc<dyn Backend>,
        config: ServiceConfig,
    ) -> Result<Arc<Self>, StoreError> {
        let mut sessions = HashMap::new();
        for (id, events) in store.load_all()? {
            match Session::replay(&events) {
                Ok(s) if s.id == id => {
                    sessions.insert(id, Arc::new(SessionHandle::new(s)));
                }
                Ok(s) => tracing::warn!(%id, logged = %s.id, "skipping session log with mismatched id"),
                Err(e) => tracing::warn!(%id, "skipping unreadable session log: {e}"),
            }
        }
        tracing::info!(sessions = sessions.len(), "session index rebuilt");
        Ok(Arc::new(AppState {
            sessions: RwLock::new(sessions),
            store,
            extraction,
            generation,
            config,
        }))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("index poisoned").len()
    }

    fn handle(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.sessions
            .read()
            .expect("index poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session {id:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error: code.to_string(),
                message: message.into(),
                fields: Vec::new(),
            },
        }
    }

    fn invalid_fields(errors: Vec<(String, String)>) -> Self {
        let mut e = Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_settings", "invalid settings");
        e.body.fields = errors
            .into_iter()
            .map(|(field, message)| FieldError { field, message })
            .collect();
        e
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(r.status(), "bad_request", r.body_text())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError::internal(e.to_string())
    }
}

impl From<TurnError> for ApiError {
    fn from(e: TurnError) -> Self {
        let (status, code) = match &e {
            TurnError::EmptyText => (StatusCode::BAD_REQUEST, "empty_text"),
            TurnError::TooLong { .. } => (StatusCode::PAYLOAD_TOO_LARGE, "text_too_long"),
            TurnError::Marker(_) => (StatusCode::UNPROCESSABLE_ENTITY, "reserved_marker"),
            TurnError::Linearize(_) => (StatusCode::UNPROCESSABLE_ENTITY, "over_budget"),
            TurnError::Extraction(_) | TurnError::Generation(_) => (StatusCode::BAD_GATEWAY, "backend_failure"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub situation: String,
    #[serde(default)]
    pub window_span: Option<usize>,
    #[serde(default)]
    pub mask: Option<AblationMask>,
    #[serde(default)]
    pub generation: Option<GenerationConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostMessage {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub sessions: usize,
    pub extraction_backend: String,
    pub generation_backend: String,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionInfo>), ApiError> {
    let Json(req) = body?;
    if let Err(e) = check_text(&req.situation, MAX_SITUATION_CHARS) {
        return Err(ApiError::invalid_fields(vec![("situation".into(), e.to_string())]));
    }
    let patch = SettingsPatch {
        window_span: req.window_span,
        mask: req.mask,
        generation: req.generation,
    };
    let settings = patch.apply(&SessionSettings::default()).map_err(ApiError::invalid_fields)?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = Session::new(id.clone(), req.situation.trim().to_string(), now_ms(), settings);
    let event = Event::Created {
        id: id.clone(),
        situation: session.situation.clone(),
        created_at_ms: session.created_at_ms,
        settings,
    };
    let store = state.store.clone();
    let sid = id.clone();
    blocking(move || store.append(&sid, &event)).await??;
    let info = session.info();
    state
        .sessions
        .write()
        .expect("index poisoned")
        .insert(id, Arc::new(SessionHandle::new(session)));
    Ok((StatusCode::CREATED, Json(info)))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionInfo>, ApiError> {
    Ok(Json(state.handle(&id)?.snapshot().info()))
}

async fn patch_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<SettingsPatch>, JsonRejection>,
) -> Result<Json<SessionInfo>, ApiError> {
    let handle = state.handle(&id)?;
    let Json(patch) = body?;
    let _turn = handle.turn_lock.lock().await;
    let current = handle.snapshot();
    let settings = patch.apply(&current.settings).map_err(ApiError::invalid_fields)?;
    let event = Event::Settings { settings };
    let store = state.store.clone();
    let sid = id.clone();
    let logged = event.clone();
    blocking(move || store.append(&sid, &logged)).await??;
    let mut next = (*current).clone();
    next.apply(&event).map_err(|e| ApiError::internal(e.to_string()))?;
    let info = next.info();
    handle.replace(next);
    Ok(Json(info))
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<PostMessage>, JsonRejection>,
) -> Result<Json<TurnResult>, ApiError> {
    let handle = state.handle(&id)?;
    let Json(msg) = body?;
    let _turn = handle.turn_lock.lock().await;
    let current = handle.snapshot();
    let st = state.clone();
    let snapshot = current.clone();
    let event = blocking(move || -> Result<Event, ApiError> {
        let backends = Backends {
            extraction: &*st.extraction,
            generation: &*st.generation,
            extraction_config: st.config.extraction_config,
            retry: st.config.retry,
        };
        let event = run_turn(&snapshot, &msg.text, &backends)?;
        st.store.append(&snapshot.id, &event)?;
        Ok(event)
    })
    .await?
    .inspect_err(|e| tracing::warn!(session = %id, "turn rejected: {}", e.body.message))?;
    let mut next = (*current).clone();
    next.apply(&event).map_err(|e| ApiError::internal(e.to_string()))?;
    handle.replace(next);
    match event {
        Event::Turn { result, .. } => Ok(Json(*result)),
        _ => Err(ApiError::internal("turn produced no result")),
    }
}

async fn get_trace(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Trace>, ApiError> {
    Ok(Json(state.handle(&id)?.snapshot().trace()))
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        sessions: state.session_count(),
        extraction_backend: state.extraction.label(),
        generation_backend: state.generation.label(),
    })
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.config.auth_token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: Arc<AppState>) -> Router {
    let sessions = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).patch(patch_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/trace", get(get_trace))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(sessions)
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
