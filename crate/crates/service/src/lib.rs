//! HTTP annotation service.
//!
//! A session holds one object being outlined: the client posts an image and
//! a box, receives the first predicted vertex, and then steps the decoder one
//! vertex at a time, optionally moving the pending vertex first. Finished
//! polygons go to an append-only JSONL store.
//!
//! | Method | Path | |
//! |---|---|---|
//! | POST | `/v1/sessions` | multipart `image` (PNG) + `meta` (`{"box": {...}, "label": "..."}`) |
//! | POST | `/v1/sessions/{id}/step` | `{"correction": {"x", "y"}}` or `{"close": true}`, body optional |
//! | POST | `/v1/sessions/{id}/finish` | `{"accept": bool}` |
//! | GET | `/v1/sessions/{id}` | |
//! | GET | `/v1/annotations` | JSONL export |
//! | GET | `/v1/healthz` | |

mod session;
mod store;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use polyrnn::model::Models;
use polyrnn::polygeom::BBox;
use serde::{Deserialize, Serialize};

pub use session::{check_box, AnnotationRecord, Correction, Session, SessionView, Status, Vertex};
pub use store::Store;

/// Error body: `{"code": "...", "message": "..."}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn bad_request(m: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            message: m.into(),
        }
    }
    pub fn not_found(m: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            code: "not_found",
            message: m.into(),
        }
    }
    pub fn conflict(m: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::CONFLICT,
            code: "conflict",
            message: m.into(),
        }
    }
    pub fn unprocessable(m: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "unprocessable",
            message: m.into(),
        }
    }
    pub fn unavailable(m: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            code: "model_unavailable",
            message: m.into(),
        }
    }
    pub fn internal(m: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: m.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "code": self.code, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub store_path: PathBuf,
    /// Idle time after which a session is dropped.
    pub session_ttl: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            store_path: PathBuf::from("annotations.jsonl"),
            session_ttl: Duration::from_secs(30 * 60),
        }
    }
}

/// Shared state: the model, live sessions and the store.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    models: Option<Arc<Models>>,
    checkpoint_sha256: Option<String>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    store: Store,
    ttl: Duration,
}

impl AppState {
    /// `models` is `None` when no checkpoint could be loaded; sessions then
    /// answer 503.
    pub fn new(models: Option<(Models, String)>, config: &ServiceConfig) -> Self {
        let (models, hash) = match models {
            Some((m, h)) => (Some(Arc::new(m)), Some(h)),
            None => (None, None),
        };
        AppState {
            inner: Arc::new(Inner {
                models,
                checkpoint_sha256: hash,
                sessions: Mutex::new(HashMap::new()),
                store: Store::new(config.store_path.clone()),
                ttl: config.session_ttl,
            }),
        }
    }

    fn models(&self) -> Result<Arc<Models>, ApiError> {
        self.inner
            .models
            .clone()
            .ok_or_else(|| ApiError::unavailable("no model checkpoint is loaded"))
    }

    /// Drops sessions idle for longer than the TTL; returns how many.
    pub fn expire_sessions(&self) -> usize {
        let now = Instant::now();
        let mut map = self.inner.sessions.lock().expect("session map lock");
        let before = map.len();
        map.retain(|_, s| match s.try_lock() {
            Ok(s) => now.duration_since(s.last_used) < self.inner.ttl,
            // In use right now, so not idle.
            Err(_) => true,
        });
        before - map.len()
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.lock().expect("session map lock").len()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.expire_sessions();
        self.inner
            .sessions
            .lock()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/step", post(step_session))
        .route("/v1/sessions/{id}/finish", post(finish_session))
        .route("/v1/annotations", get(annotations))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(state)
}

/// Serves on `addr` until the process is stopped, sweeping idle sessions
/// once a minute.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let n = sweeper.expire_sessions();
            if n > 0 {
                log::info!("expired {n} idle sessions");
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    model_loaded: bool,
    checkpoint_sha256: Option<String>,
    sessions: usize,
}

async fn healthz(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok",
        model_loaded: state.inner.models.is_some(),
        checkpoint_sha256: state.inner.checkpoint_sha256.clone(),
        sessions: state.session_count(),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateMeta {
    #[serde(rename = "box")]
    bbox: BBox,
    label: String,
    image_id: Option<String>,
}

async fn create_session(State(state): State<AppState>, mut form: Multipart) -> Result<Response, ApiError> {
    let models = state.models()?;
    let (mut png, mut meta) = (None, None);
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(format!("multipart: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request(format!("multipart field {name}: {e}")))?;
        match name.as_str() {
            "image" => png = Some(bytes),
            "meta" => meta = Some(bytes),
            other => return Err(ApiError::bad_request(format!("unexpected field {other:?}"))),
        }
    }
    let png = png.ok_or_else(|| ApiError::bad_request("missing multipart field \"image\""))?;
    let meta = meta.ok_or_else(|| ApiError::bad_request("missing multipart field \"meta\""))?;
    let meta: CreateMeta =
        serde_json::from_slice(&meta).map_err(|e| ApiError::bad_request(format!("meta: {e}")))?;
    let image_id = meta
        .image_id
        .clone()
        .unwrap_or_else(|| polyrnn::model::sha256_hex(&png)[..16].to_string());
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = {
        let id = id.clone();
        blocking(move || {
            let image = image::load_from_memory_with_format(&png, image::ImageFormat::Png)
                .map_err(|e| ApiError::bad_request(format!("image is not a readable PNG: {e}")))?
                .to_rgb8();
            Session::start(id, image_id, &image, meta.bbox, meta.label, &models)
        })
        .await?
    };
    let view = session.view(state.inner.models.as_deref().expect("checked above"));
    state
        .inner
        .sessions
        .lock()
        .expect("session map lock")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let models = state.models()?;
    let s = state.session(&id)?;
    let s = s.lock().expect("session lock");
    Ok(Json(s.view(&models)))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct StepRequest {
    correction: Option<Vertex>,
    #[serde(default)]
    close: bool,
}

impl StepRequest {
    fn into_correction(self) -> Result<Option<Correction>, ApiError> {
        match (self.correction, self.close) {
            (Some(_), true) => Err(ApiError::bad_request("give either a correction or close, not both")),
            (Some(v), false) => Ok(Some(Correction::Point(v))),
            (None, true) => Ok(Some(Correction::Close)),
            (None, false) => Ok(None),
        }
    }
}

fn parse_body<T: serde::de::DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(|b| b.is_ascii_whitespace()) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("body: {e}")))
}

async fn step_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SessionView>, ApiError> {
    let correction = parse_body::<StepRequest>(&body)?.into_correction()?;
    let models = state.models()?;
    let s = state.session(&id)?;
    let view = blocking(move || {
        let mut s = s.lock().expect("session lock");
        s.last_used = Instant::now();
        s.step(correction, &models)
    })
    .await?;
    Ok(Json(view))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FinishRequest {
    accept: bool,
}

#[derive(Serialize)]
struct Finished {
    accepted: bool,
    record: AnnotationRecord,
}

async fn finish_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Finished>, ApiError> {
    let req: FinishRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("body: {e}")))?;
    let models = state.models()?;
    let s = state.session(&id)?;
    let hash = state.inner.checkpoint_sha256.clone();
    let st = state.clone();
    let record = blocking(move || {
        let mut s = s.lock().expect("session lock");
        s.last_used = Instant::now();
        let record = s.finish(&models, hash)?;
        if req.accept {
            st.inner
                .store
                .append(&record)
                .map_err(|e| ApiError::internal(format!("store: {e}")))?;
        }
        Ok(record)
    })
    .await?;
    Ok(Json(Finished {
        accepted: req.accept,
        record,
    }))
}

async fn annotations(State(state): State<AppState>) -> Result<Response, ApiError> {
    let body = state
        .inner
        .store
        .read_all()
        .map_err(|e| ApiError::internal(format!("store: {e}")))?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}
