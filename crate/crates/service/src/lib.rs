//! HTTP JSON API over the turn pipeline.
//!
//! Backend calls block, so every pipeline call runs on the blocking pool.
//! A session processes one turn at a time: a second turn request for the
//! same session while one is running gets `409`. Errors are JSON objects
//! `{error_code, message}`.

mod error;

use std::collections::{BTreeMap, HashSet};
use std::future::Future;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use userllm_core::domain::{ConversationTurn, ReasoningTrace, UserProfile};
use userllm_core::gateway::ImageData;
use userllm_core::orchestrator::{IdentityEvent, Pipeline, TurnInput};

pub use error::ApiError;

/// Server-level options not owned by the pipeline.
#[derive(Debug, Clone, Default)]
pub struct ServiceOptions {
    /// Allowed browser origin; `"*"` allows any. No CORS headers when unset.
    pub cors_origin: Option<String>,
    /// When set, every route except `/health` requires `Authorization: Bearer <token>`.
    pub auth_token: Option<String>,
}

#[derive(Clone)]
struct AppState {
    pipeline: Arc<Pipeline>,
    in_flight: Arc<Mutex<HashSet<String>>>,
    auth_token: Option<Arc<str>>,
}

/// Removes a session from the in-flight set when the turn finishes, even if
/// the client has gone away.
struct InFlight {
    set: Arc<Mutex<HashSet<String>>>,
    session_id: String,
}

impl InFlight {
    fn acquire(set: &Arc<Mutex<HashSet<String>>>, session_id: &str) -> Option<Self> {
        let inserted = set.lock().unwrap_or_else(|e| e.into_inner()).insert(session_id.to_string());
        inserted.then(|| Self { set: set.clone(), session_id: session_id.to_string() })
    }
}

impl Drop for InFlight {
    fn drop(&mut self) {
        self.set.lock().unwrap_or_else(|e| e.into_inner()).remove(&self.session_id);
    }
}

/// Builds the application router.
pub fn router(pipeline: Arc<Pipeline>, options: ServiceOptions) -> Router {
    // base64 inflates by 4/3; leave room for the rest of the JSON
    let body_limit = pipeline.settings().max_image_bytes / 3 * 4 + 64 * 1024;
    let state = AppState {
        pipeline,
        in_flight: Arc::new(Mutex::new(HashSet::new())),
        auth_token: options.auth_token.map(Arc::from),
    };
    let mut app = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/:id", get(get_session))
        .route("/sessions/:id/turns", post(post_turn).get(list_turns))
        .route("/sessions/:id/consent", patch(set_consent))
        .route("/sessions/:id/profile", get(get_profile))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .route("/health", get(health))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state);
    if let Some(origin) = options.cors_origin {
        let allow = if origin == "*" {
            AllowOrigin::any()
        } else {
            match HeaderValue::from_str(&origin) {
                Ok(v) => AllowOrigin::exact(v),
                Err(_) => {
                    tracing::warn!(origin, "ignoring unparseable CORS origin");
                    return app;
                }
            }
        };
        app = app.layer(
            CorsLayer::new()
                .allow_origin(allow)
                .allow_methods([Method::GET, Method::POST, Method::PATCH])
                .allow_headers(Any),
        );
    }
    app
}

/// Serves `app` until `shutdown` resolves, then waits for open requests to finish.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down, draining open requests");
}

async fn require_token(State(state): State<AppState>, request: Request, next: Next) -> Response {
    let Some(token) = &state.auth_token else {
        return next.run(request).await;
    };
    if request.method() == Method::OPTIONS {
        return next.run(request).await;
    }
    let presented = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(&**token) {
        next.run(request).await
    } else {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token").into_response()
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", e.to_string()))
}

#[derive(Serialize)]
struct SessionCreated {
    session_id: String,
}

async fn create_session(State(state): State<AppState>) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let session_id = uuid::Uuid::new_v4().simple().to_string();
    let pipeline = state.pipeline.clone();
    let id = session_id.clone();
    blocking(move || pipeline.create_session(&id).map_err(ApiError::from)).await?;
    tracing::info!(session_id, "session created");
    Ok((StatusCode::CREATED, Json(SessionCreated { session_id })))
}

#[derive(Serialize)]
struct SessionView {
    session_id: String,
    consent: bool,
    resolved_user: Option<String>,
    profile_user_id: String,
    turn_count: usize,
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let session = state.pipeline.store().get_session(&id).ok_or_else(|| ApiError::unknown_session(&id))?;
    Ok(Json(SessionView {
        profile_user_id: session.profile_user_id(),
        turn_count: session.turns.len(),
        consent: session.consent,
        resolved_user: session.resolved_user,
        session_id: session.session_id,
    }))
}

#[derive(Deserialize)]
struct TurnRequest {
    text: String,
    #[serde(default)]
    image_base64: Option<String>,
    #[serde(default)]
    consent: Option<bool>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum IdentityView {
    Matched { user_id: String, score: f64 },
    Enrolled { user_id: String, profile_text: String },
}

impl From<IdentityEvent> for IdentityView {
    fn from(e: IdentityEvent) -> Self {
        match e {
            IdentityEvent::Matched { user_id, score } => IdentityView::Matched { user_id, score },
            IdentityEvent::Enrolled { user_id, profile_text } => IdentityView::Enrolled { user_id, profile_text },
        }
    }
}

#[derive(Serialize)]
struct TurnResponse {
    session_id: String,
    reply: String,
    trace: ReasoningTrace,
    profile: UserProfile,
    user_turn_id: u64,
    agent_turn_id: u64,
    identity: Option<IdentityView>,
    /// True when a turn was stored without its memory embedding.
    degraded: bool,
}

fn decode_image(encoded: &str, max_bytes: usize) -> Result<ImageData, ApiError> {
    let invalid = |msg: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_image", msg);
    // accept data URLs as well as bare base64
    let payload = match encoded.split_once(";base64,") {
        Some((prefix, rest)) if prefix.starts_with("data:") => rest,
        _ => encoded,
    };
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(payload.trim())
        .map_err(|e| invalid(format!("image_base64 is not valid base64: {e}")))?;
    let mut image = ImageData::from_bytes("upload", bytes, max_bytes).map_err(|e| invalid(e.to_string()))?;
    image.reference = format!("upload:{}", &image.sha256[..16]);
    Ok(image)
}

async fn post_turn(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<TurnResponse>, ApiError> {
    let session = state.pipeline.store().get_session(&id).ok_or_else(|| ApiError::unknown_session(&id))?;
    let request: TurnRequest = parse_body(&body)?;
    if request.text.trim().is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_text", "turn text is empty"));
    }
    let consent = request.consent.unwrap_or(session.consent);
    // without consent the image is dropped here, before it is even decoded
    let image = match (&request.image_base64, consent) {
        (Some(encoded), true) => Some(decode_image(encoded, state.pipeline.settings().max_image_bytes)?),
        (Some(_), false) => {
            tracing::info!(session_id = %id, "image ignored: consent not granted");
            None
        }
        (None, _) => None,
    };

    let guard = InFlight::acquire(&state.in_flight, &id).ok_or_else(|| {
        ApiError::new(StatusCode::CONFLICT, "turn_in_flight", format!("session {id} is already processing a turn"))
    })?;
    let pipeline = state.pipeline.clone();
    let session_id = id.clone();
    let outcome = blocking(move || {
        let _guard = guard;
        let input = TurnInput { text: request.text, image, consent: request.consent };
        pipeline.run_turn(&session_id, input).map_err(ApiError::from)
    })
    .await?;
    Ok(Json(TurnResponse {
        session_id: id,
        reply: outcome.reply,
        trace: outcome.trace,
        profile: outcome.profile,
        user_turn_id: outcome.user_turn.turn_id,
        agent_turn_id: outcome.agent_turn.turn_id,
        identity: outcome.identity.map(IdentityView::from),
        degraded: outcome.degraded,
    }))
}

#[derive(Serialize)]
struct TurnsView {
    session_id: String,
    turns: Vec<ConversationTurn>,
}

async fn list_turns(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<TurnsView>, ApiError> {
    let session = state.pipeline.store().get_session(&id).ok_or_else(|| ApiError::unknown_session(&id))?;
    let turns = session
        .turns
        .into_iter()
        .map(|mut t| {
            t.embedding = None;
            t
        })
        .collect();
    Ok(Json(TurnsView { session_id: id, turns }))
}

#[derive(Deserialize)]
struct ConsentRequest {
    consent: bool,
}

#[derive(Serialize)]
struct ConsentView {
    session_id: String,
    consent: bool,
}

async fn set_consent(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<ConsentView>, ApiError> {
    if !state.pipeline.store().session_exists(&id) {
        return Err(ApiError::unknown_session(&id));
    }
    let ConsentRequest { consent } = parse_body(&body)?;
    let pipeline = state.pipeline.clone();
    let session_id = id.clone();
    let session = blocking(move || pipeline.set_consent(&session_id, consent).map_err(ApiError::from)).await?;
    Ok(Json(ConsentView { session_id: id, consent: session.consent }))
}

#[derive(Serialize)]
struct ProfileView {
    session_id: String,
    consent: bool,
    profile: Option<UserProfile>,
    /// Every stored revision, oldest first.
    history: Vec<UserProfile>,
}

async fn get_profile(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<ProfileView>, ApiError> {
    let store = state.pipeline.store();
    let session = store.get_session(&id).ok_or_else(|| ApiError::unknown_session(&id))?;
    let user_id = session.profile_user_id();
    let history = store.profile_history(&user_id);
    Ok(Json(ProfileView { session_id: id, consent: session.consent, profile: history.last().cloned(), history }))
}

#[derive(Serialize)]
struct HealthView {
    status: &'static str,
    backends: BTreeMap<String, bool>,
}

async fn health(State(state): State<AppState>) -> Result<Json<HealthView>, ApiError> {
    let pipeline = state.pipeline.clone();
    let backends: BTreeMap<String, bool> =
        blocking(move || Ok(pipeline.backends().health())).await?.into_iter().collect();
    let status = if backends.values().all(|up| *up) { "ok" } else { "degraded" };
    Ok(Json(HealthView { status, backends }))
}
