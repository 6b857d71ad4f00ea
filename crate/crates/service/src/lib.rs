//! Annotation service: upload an image, request point-prompted masks from a
//! backend, save accepted masks as numbered instances, export the label map.

mod persist;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::{ImageFormat, RgbImage};
use promptseg_core::ingest::{canonicalize, encode_label_map, IntensityImage, RawSample, CANONICAL_SIDE};
use promptseg_core::mask::{InstanceLabelMap, Point};
use promptseg_core::sbr::PromptSet;
use promptseg_core::segmenter::{
    rle, RegionCompete, RemoteSegmenter, RleMask, SegmentError, SegmentRequest, Segmenter, WirePoint,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::sync::Mutex;
use tower_http::cors::CorsLayer;

pub use persist::SessionFile;

pub const DEFAULT_BODY_LIMIT: usize = 64 * 1024 * 1024;
pub const BASELINE_ID: &str = "baseline";
pub const REMOTE_ID: &str = "remote";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub remote_backend: Option<String>,
    pub remote_timeout: Duration,
    pub persist_dir: Option<PathBuf>,
    pub body_limit: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { remote_backend: None, remote_timeout: Duration::from_secs(30), persist_dir: None, body_limit: DEFAULT_BODY_LIMIT }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("persistence: {0}")]
    Persist(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One uploaded image and the instances saved against it.
#[derive(Debug, Clone)]
pub struct Session {
    pub image_id: String,
    pub image: Arc<RgbImage>,
    pub saved: InstanceLabelMap,
    pub next_instance_id: u32,
    pub active_backend: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BackendInfo {
    pub id: String,
    pub kind: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct UploadResponse {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PredictRequest {
    pub image_id: String,
    pub points: Vec<WirePoint>,
    /// Switches the session's active backend when present.
    #[serde(default)]
    pub backend: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SaveRequest {
    pub image_id: String,
    pub rle: Vec<u32>,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub height: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SaveResponse {
    pub instance_id: u32,
}

struct Backend {
    kind: &'static str,
    segmenter: Arc<dyn Segmenter>,
}

/// Shared across handlers; sessions are locked one at a time.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    backends: BTreeMap<String, Backend>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    persist_dir: Option<PathBuf>,
    body_limit: usize,
}

impl AppState {
    /// Loads any sessions found in the persistence directory.
    pub fn new(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let mut backends = BTreeMap::new();
        backends.insert(BASELINE_ID.to_owned(), Backend { kind: "baseline", segmenter: Arc::new(RegionCompete::default()) });
        if let Some(url) = &config.remote_backend {
            let remote = RemoteSegmenter::new(url.clone(), config.remote_timeout);
            backends.insert(REMOTE_ID.to_owned(), Backend { kind: "remote", segmenter: Arc::new(remote) });
        }
        let mut sessions = HashMap::new();
        if let Some(dir) = &config.persist_dir {
            std::fs::create_dir_all(dir)?;
            for s in persist::load_all(dir)? {
                sessions.insert(s.image_id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        Ok(Self {
            inner: Arc::new(Inner {
                backends,
                sessions: RwLock::new(sessions),
                persist_dir: config.persist_dir.clone(),
                body_limit: config.body_limit,
            }),
        })
    }

    pub fn backends(&self) -> Vec<BackendInfo> {
        self.inner.backends.iter().map(|(id, b)| BackendInfo { id: id.clone(), kind: b.kind.to_owned() }).collect()
    }

    fn session(&self, image_id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.inner
            .sessions
            .read()
            .expect("session table poisoned")
            .get(image_id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(image_id.to_owned()))
    }

    async fn persist(&self, session: &Session) -> Result<(), ApiError> {
        let Some(dir) = self.inner.persist_dir.clone() else {
            return Ok(());
        };
        let snapshot = session.clone();
        tokio::task::spawn_blocking(move || persist::save(&dir, &snapshot))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))?
            .map_err(|e| ApiError::Internal(e.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unknown image id {0}")]
    NotFound(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    UnsupportedMedia(String),
    #[error("{0}")]
    TooLarge(String),
    #[error("backend failure: {0}")]
    BadGateway(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::UnsupportedMedia(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            Self::TooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            Self::BadGateway(_) => StatusCode::BAD_GATEWAY,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.inner.body_limit;
    Router::new()
        .route("/images", post(upload))
        .route("/backends", get(list_backends))
        .route("/predict", post(predict))
        .route("/instances", post(save_instance))
        .route("/export/{image_id}", get(export))
        .layer(DefaultBodyLimit::max(limit))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn canonical_image(bytes: &[u8]) -> Result<RgbImage, ApiError> {
    let img = image::load_from_memory(bytes).map_err(|e| ApiError::UnsupportedMedia(format!("undecodable image: {e}")))?;
    let raw = IntensityImage::from_dynamic(&img);
    let labels = InstanceLabelMap::new(raw.width, raw.height);
    let sample = RawSample::new(raw, labels, "upload").map_err(|e| ApiError::Internal(e.to_string()))?;
    let canonical = canonicalize(&sample).map_err(|e| ApiError::UnsupportedMedia(e.to_string()))?;
    Ok(canonical.image)
}

async fn upload(State(state): State<AppState>, mut multipart: Multipart) -> Result<Json<UploadResponse>, ApiError> {
    let multipart_error = |e: axum::extract::multipart::MultipartError| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::TooLarge(e.body_text())
        } else {
            ApiError::BadRequest(e.body_text())
        }
    };
    let mut bytes = None;
    while let Some(field) = multipart.next_field().await.map_err(multipart_error)? {
        if field.file_name().is_some() || field.name() == Some("file") {
            bytes = Some(field.bytes().await.map_err(multipart_error)?);
            break;
        }
    }
    let bytes = bytes.ok_or_else(|| ApiError::BadRequest("multipart body has no file field".into()))?;
    let image = tokio::task::spawn_blocking(move || canonical_image(&bytes))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    let (width, height) = (image.width() as usize, image.height() as usize);
    let session = Session {
        image_id: uuid::Uuid::new_v4().to_string(),
        image: Arc::new(image),
        saved: InstanceLabelMap::new(width, height),
        next_instance_id: 1,
        active_backend: BASELINE_ID.to_owned(),
    };
    state.persist(&session).await?;
    let image_id = session.image_id.clone();
    state.inner.sessions.write().expect("session table poisoned").insert(image_id.clone(), Arc::new(Mutex::new(session)));
    Ok(Json(UploadResponse { image_id, width, height }))
}

async fn list_backends(State(state): State<AppState>) -> Json<Vec<BackendInfo>> {
    Json(state.backends())
}

fn prompt_set(points: &[WirePoint]) -> Result<PromptSet, ApiError> {
    let mut prompts = PromptSet { instance_id: 0, positives: Vec::new(), negatives: Vec::new() };
    for p in points {
        match p.label {
            1 => prompts.positives.push(Point::new(p.x, p.y)),
            0 => prompts.negatives.push(Point::new(p.x, p.y)),
            other => return Err(ApiError::Unprocessable(format!("point label must be 0 or 1, got {other}"))),
        }
    }
    Ok(prompts)
}

fn segment_error(e: SegmentError) -> ApiError {
    match e {
        SegmentError::NoPositive | SegmentError::OutOfBounds { .. } | SegmentError::DegeneratePrompts(..) => {
            ApiError::Unprocessable(e.to_string())
        }
        SegmentError::Timeout | SegmentError::Unreachable(_) | SegmentError::Protocol(_) | SegmentError::Contract(_) => {
            ApiError::BadGateway(e.to_string())
        }
    }
}

async fn predict(State(state): State<AppState>, Json(req): Json<PredictRequest>) -> Result<Json<RleMask>, ApiError> {
    let session = state.session(&req.image_id)?;
    let prompts = prompt_set(&req.points)?;
    let (image, backend_id) = {
        let mut s = session.lock().await;
        if let Some(b) = &req.backend {
            if !state.inner.backends.contains_key(b) {
                return Err(ApiError::Unprocessable(format!("unknown backend {b:?}")));
            }
            s.active_backend = b.clone();
        }
        (s.image.clone(), s.active_backend.clone())
    };
    let segmenter = state.inner.backends[&backend_id].segmenter.clone();
    let image_id = req.image_id.clone();
    let seg = tokio::task::spawn_blocking(move || {
        segmenter.segment(&SegmentRequest { image_id: &image_id, image: &image, prompts: &prompts })
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
    .map_err(segment_error)?;
    Ok(Json(RleMask::encode(&seg.mask)))
}

async fn save_instance(State(state): State<AppState>, Json(req): Json<SaveRequest>) -> Result<Json<SaveResponse>, ApiError> {
    let session = state.session(&req.image_id)?;
    let mut s = session.lock().await;
    let (w, h) = s.saved.dims();
    if req.width.is_some_and(|v| v != w) || req.height.is_some_and(|v| v != h) {
        return Err(ApiError::BadRequest(format!("mask dimensions do not match the {w}x{h} image")));
    }
    let mask = rle::decode(w, h, &req.rle).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let id = s.next_instance_id;
    let mut saved = s.saved.clone();
    saved.paint(&mask, id).map_err(|e| ApiError::Internal(e.to_string()))?;
    let mut next = s.clone();
    next.saved = saved;
    next.next_instance_id = id + 1;
    state.persist(&next).await?;
    *s = next;
    Ok(Json(SaveResponse { instance_id: id }))
}

async fn export(State(state): State<AppState>, Path(image_id): Path<String>) -> Result<Response, ApiError> {
    let session = state.session(&image_id)?;
    let saved = session.lock().await.saved.clone();
    let bytes = tokio::task::spawn_blocking(move || encode_label_map(&saved, ImageFormat::Tiff))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let disposition = format!("attachment; filename=\"{image_id}.tif\"");
    Ok(([(header::CONTENT_TYPE, "image/tiff".to_owned()), (header::CONTENT_DISPOSITION, disposition)], bytes).into_response())
}

/// Canonical side of every session image.
pub const SESSION_SIDE: usize = CANONICAL_SIDE;
