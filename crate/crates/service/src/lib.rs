//! HTTP front end for a trained segmentation model.
//!
//! `POST /segment` takes an image and clicks (multipart form or base64 JSON)
//! and returns a binary mask PNG at the image's own resolution.
//! `GET /health` reports readiness. The model is shared read-only between
//! requests; inference runs on the blocking pool behind a semaphore, and a
//! saturated pool answers 429 instead of queueing.

mod error;
mod request;

use std::io::Cursor;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, State};
use axum::http::{Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use tapseg::data::ColorImage;
use tapseg::guidance::GuidanceConfig;
use tapseg::inference::Predictor;
use tapseg::metrics::binarize;
use tapseg::model::SegModel;
use tokio::sync::{OwnedSemaphorePermit, Semaphore};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub use error::{ApiError, ErrorBody};
pub use request::{ClickIn, SegmentRequest};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Largest accepted image, in pixels (checked from the header).
    pub max_pixels: u64,
    pub max_body_bytes: usize,
    /// Concurrent inference slots.
    pub workers: usize,
    /// Encoder settings; requests may override the kind.
    pub guidance: GuidanceConfig,
    /// `None` allows any origin.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_pixels: 4096 * 4096,
            max_body_bytes: 32 << 20,
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            guidance: GuidanceConfig::default(),
            cors_origin: None,
        }
    }
}

pub struct LoadedModel {
    pub model: SegModel<f32>,
    pub id: String,
}

struct Inner {
    config: ServiceConfig,
    model: OnceLock<Arc<LoadedModel>>,
    started: Instant,
    permits: Arc<Semaphore>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        let permits = Arc::new(Semaphore::new(config.workers.max(1)));
        AppState { inner: Arc::new(Inner { config, model: OnceLock::new(), started: Instant::now(), permits }) }
    }

    /// Installs the model. Only the first call has an effect.
    pub fn set_model(&self, model: SegModel<f32>, id: String) -> bool {
        self.inner.model.set(Arc::new(LoadedModel { model, id })).is_ok()
    }

    pub fn model(&self) -> Option<Arc<LoadedModel>> {
        self.inner.model.get().cloned()
    }

    /// Claims an inference slot, or `None` when all are busy.
    pub fn try_acquire_worker(&self) -> Option<OwnedSemaphorePermit> {
        self.inner.permits.clone().try_acquire_owned().ok()
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ProbStats {
    pub min: f32,
    pub max: f32,
    pub mean: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SegmentResponse {
    /// Base64 single-channel PNG, 0 or 255 per pixel.
    pub mask: String,
    pub width: usize,
    pub height: usize,
    pub prob_stats: ProbStats,
    pub model_id: String,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Health {
    pub status: String,
    pub model_id: Option<String>,
    pub uptime_s: f64,
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers(Any);
    let cors = match &state.config().cors_origin {
        Some(origin) => match origin.parse() {
            Ok(v) => cors.allow_origin(AllowOrigin::exact(v)),
            Err(_) => cors.allow_origin(Any),
        },
        None => cors.allow_origin(Any),
    };
    let limit = state.config().max_body_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/segment", post(segment))
        .layer(DefaultBodyLimit::max(limit))
        .layer(cors)
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> Response {
    let uptime_s = state.inner.started.elapsed().as_secs_f64();
    match state.model() {
        Some(m) => {
            (StatusCode::OK, Json(Health { status: "ok".into(), model_id: Some(m.id.clone()), uptime_s }))
                .into_response()
        }
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health { status: "loading".into(), model_id: None, uptime_s }),
        )
            .into_response(),
    }
}

async fn segment(
    State(state): State<AppState>,
    req: axum::extract::Request,
) -> Result<Json<SegmentResponse>, ApiError> {
    let start = Instant::now();
    let loaded = state.model().ok_or_else(ApiError::not_ready)?;
    let parsed = SegmentRequest::from_http(req).await?;
    check_image_header(&parsed.image, state.config().max_pixels)?;
    let permit = state.try_acquire_worker().ok_or_else(ApiError::busy)?;
    let mut guidance = state.config().guidance;
    if let Some(kind) = parsed.guidance_kind {
        guidance.kind = kind;
    }
    let mut response = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        run_segment(&loaded, &parsed, &guidance)
    })
    .await
    .map_err(|e| ApiError::internal(format!("inference task failed: {e}")))??;
    response.elapsed_ms = start.elapsed().as_millis() as u64;
    Ok(Json(response))
}

/// Reads only the image header and rejects oversized or empty images before
/// any pixel data is decoded.
fn check_image_header(bytes: &[u8], max_pixels: u64) -> Result<(), ApiError> {
    let reader = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| ApiError::bad_request("image", format!("unreadable image: {e}")))?;
    let (w, h) = reader
        .into_dimensions()
        .map_err(|e| ApiError::bad_request("image", format!("undecodable image: {e}")))?;
    let pixels = w as u64 * h as u64;
    if pixels == 0 {
        return Err(ApiError::bad_request("image", "image has zero size"));
    }
    if pixels > max_pixels {
        return Err(ApiError::too_large(format!("{w}x{h} image exceeds the cap of {max_pixels} pixels")));
    }
    Ok(())
}

/// Decode, validate clicks, predict with the first click, binarize and
/// encode. Synchronous; callers run it off the async executor.
pub fn run_segment(
    loaded: &LoadedModel,
    req: &SegmentRequest,
    guidance: &GuidanceConfig,
) -> Result<SegmentResponse, ApiError> {
    let image = ColorImage::decode(&req.image)
        .map_err(|e| ApiError::bad_request("image", format!("undecodable image: {e}")))?;
    let clicks = req.validated_clicks(image.height, image.width)?;
    let prob = loaded
        .model
        .predict(&image, &clicks[..1], guidance)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let mask = binarize(&prob, req.threshold).map_err(|e| ApiError::bad_request("threshold", e.to_string()))?;
    let png = mask.to_png().map_err(|e| ApiError::internal(format!("mask encoding failed: {e}")))?;
    let (min, max, mean) = prob.stats();
    Ok(SegmentResponse {
        mask: base64::engine::general_purpose::STANDARD.encode(png),
        width: image.width,
        height: image.height,
        prob_stats: ProbStats { min, max, mean },
        model_id: loaded.id.clone(),
        elapsed_ms: 0,
    })
}

/// Binds `addr`, starts answering (health reports 503 while loading) and
/// loads the checkpoint in the background.
pub async fn serve(addr: SocketAddr, checkpoint: PathBuf, config: ServiceConfig) -> std::io::Result<()> {
    let state = AppState::new(config);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let loader = state.clone();
    tokio::task::spawn_blocking(move || {
        let loaded = std::fs::read(&checkpoint).map_err(|e| e.to_string()).and_then(|bytes| {
            let model = tapseg::checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
            Ok((model, tapseg::checkpoint::model_id(&bytes)))
        });
        match loaded {
            Ok((model, id)) => {
                log::info!("loaded model {id} from {}", checkpoint.display());
                loader.set_model(model, id);
            }
            Err(e) => log::error!("failed to load {}: {e}", checkpoint.display()),
        }
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
