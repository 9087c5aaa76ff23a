//! HTTP inference service.
//!
//! Images travel as base64 PNG inside JSON bodies. Inference runs on a
//! blocking thread behind one mutex, so requests are answered one at a time
//! and never see a half-updated model.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use candle_core::{Device, Tensor};
use exemplar_inpaint::checkpoint;
use exemplar_inpaint::data;
use exemplar_inpaint::inference::{self, InferenceOptions};
use exemplar_inpaint::masks::BinaryMask;
use exemplar_inpaint::styles::MixSelector;
use exemplar_inpaint::training::{Model, DTYPE};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintRequest {
    pub image: String,
    pub mask: String,
    pub exemplar: String,
    #[serde(default)]
    pub exemplar2: Option<String>,
    #[serde(default)]
    pub range: Option<(usize, usize)>,
    #[serde(default)]
    pub phi: Option<String>,
    #[serde(default)]
    pub psi: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Resample images and mask to the model resolution instead of rejecting them.
    #[serde(default)]
    pub resize: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InpaintResponse {
    pub image: String,
    pub seed: u64,
    pub psi: f64,
    pub phi: String,
    pub range: Option<(usize, usize)>,
    pub model_hash: String,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_hash: String,
    pub checkpoint: String,
    pub step: u64,
    pub resolution: usize,
    pub style_layers: usize,
    pub default_phi: String,
    pub config: String,
}

pub struct AppState {
    model: Mutex<Model>,
    info: ModelInfo,
    errors: AtomicU64,
}

impl AppState {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let state = checkpoint::load(path)?;
        let step = state.step;
        Self::new(state.model, step, path.display().to_string())
    }

    pub fn new(model: Model, step: u64, checkpoint: String) -> anyhow::Result<Self> {
        let info = ModelInfo {
            model_hash: model.parameter_hash()?,
            checkpoint,
            step,
            resolution: model.config.model.resolution,
            style_layers: model.config.model.num_layers(),
            default_phi: model.config.train.phi.to_string(),
            config: model.config.to_text(),
        };
        Ok(Self { model: Mutex::new(model), info, errors: AtomicU64::new(0) })
    }

    pub fn info(&self) -> &ModelInfo {
        &self.info
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model", get(model_info))
        .route("/inpaint", post(inpaint))
        .route("/mix", post(mix))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    Unprocessable(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, json!({ "error": m })),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": m })),
            ApiError::Internal(id) => {
                (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "inference failed", "id": id }))
            }
        };
        (status, Json(body)).into_response()
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn model_info(State(state): State<Arc<AppState>>) -> Result<Json<ModelInfo>, ApiError> {
    let s = state.clone();
    let current = tokio::task::spawn_blocking(move || {
        s.model.lock().map_err(|e| e.to_string())?.parameter_hash().map_err(|e| e.to_string())
    })
    .await
    .map_err(|e| internal(&state, &e.to_string()))?
    .map_err(|e| internal(&state, &e))?;
    let mut info = state.info.clone();
    info.model_hash = current;
    Ok(Json(info))
}

async fn inpaint(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<InpaintResponse>, ApiError> {
    let req: InpaintRequest = parse_body(&body)?;
    if req.exemplar2.is_some() != req.range.is_some() {
        return Err(ApiError::BadRequest("exemplar2 and range must be given together".into()));
    }
    run(state, req).await
}

async fn mix(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<InpaintResponse>, ApiError> {
    let req: InpaintRequest = parse_body(&body)?;
    if req.exemplar2.is_none() {
        return Err(ApiError::BadRequest("field `exemplar2`: required for /mix".into()));
    }
    if req.range.is_none() {
        return Err(ApiError::BadRequest("field `range`: required for /mix".into()));
    }
    run(state, req).await
}

fn parse_body(body: &[u8]) -> Result<InpaintRequest, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed request: {e}")))
}

fn internal(state: &AppState, detail: &str) -> ApiError {
    let n = state.errors.fetch_add(1, Ordering::Relaxed);
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    let id = format!("{:012x}-{n:04x}", nanos & 0xffff_ffff_ffff);
    log::error!("request {id} failed: {detail}");
    ApiError::Internal(id)
}

fn decode_b64(field: &str, value: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(value.trim()).map_err(|e| ApiError::BadRequest(format!("field `{field}`: invalid base64: {e}")))
}

fn load_rgb(field: &str, value: &str, side: usize, resize: bool) -> Result<Tensor, ApiError> {
    let bytes = decode_b64(field, value)?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| ApiError::BadRequest(format!("field `{field}`: not a decodable image: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let rgb = if (w, h) == (side, side) {
        img.to_rgb8()
    } else if resize {
        data::prepare(&img, side)
    } else {
        return Err(ApiError::Unprocessable(format!(
            "field `{field}`: image is {w}x{h}, the model expects {side}x{side}"
        )));
    };
    Tensor::from_vec(data::image_to_chw(&rgb), (1, 3, side, side), &Device::Cpu)
        .and_then(|t| t.to_dtype(DTYPE))
        .map_err(|e| ApiError::BadRequest(format!("field `{field}`: {e}")))
}

fn load_mask(value: &str, side: usize, resize: bool) -> Result<Tensor, ApiError> {
    let bytes = decode_b64("mask", value)?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| ApiError::BadRequest(format!("field `mask`: not a decodable image: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let luma = if (w, h) == (side, side) {
        img.to_luma8()
    } else if resize {
        image::imageops::resize(&img.to_luma8(), side as u32, side as u32, image::imageops::FilterType::Nearest)
    } else {
        return Err(ApiError::Unprocessable(format!("field `mask`: mask is {w}x{h}, the model expects {side}x{side}")));
    };
    let data = luma.into_raw().into_iter().map(|v| (v >= 128) as u8).collect();
    BinaryMask::from_vec(side, side, data)
        .and_then(|m| m.to_tensor(DTYPE, &Device::Cpu))
        .map_err(|e| ApiError::BadRequest(format!("field `mask`: {e}")))
}

struct Prepared {
    image: Tensor,
    mask: Tensor,
    exemplar: Tensor,
    exemplar2: Option<Tensor>,
    range: Option<(usize, usize)>,
    opts: InferenceOptions,
}

fn prepare(info: &ModelInfo, req: &InpaintRequest) -> Result<Prepared, ApiError> {
    let side = info.resolution;
    let layers = info.style_layers;
    let phi: MixSelector = req
        .phi
        .as_deref()
        .unwrap_or(&info.default_phi)
        .parse()
        .map_err(|e| ApiError::BadRequest(format!("field `phi`: {e}")))?;
    if phi.len() != layers {
        return Err(ApiError::BadRequest(format!("field `phi`: expected {layers} entries, got {}", phi.len())));
    }
    let psi = req.psi.unwrap_or(1.0);
    if !(0.0..=1.0).contains(&psi) {
        return Err(ApiError::BadRequest(format!("field `psi`: must lie in [0, 1], got {psi}")));
    }
    if let Some((i, j)) = req.range {
        if !(1 <= i && i <= j && j <= layers) {
            return Err(ApiError::BadRequest(format!("field `range`: need 1 <= i <= j <= {layers}, got ({i}, {j})")));
        }
    }
    Ok(Prepared {
        image: load_rgb("image", &req.image, side, req.resize)?,
        mask: load_mask(&req.mask, side, req.resize)?,
        exemplar: load_rgb("exemplar", &req.exemplar, side, req.resize)?,
        exemplar2: req.exemplar2.as_deref().map(|e| load_rgb("exemplar2", e, side, req.resize)).transpose()?,
        range: req.range,
        opts: InferenceOptions { phi, psi, seed: req.seed.unwrap_or(0) },
    })
}

fn infer(model: &Model, p: &Prepared) -> exemplar_inpaint::Result<Vec<u8>> {
    let out = match (&p.exemplar2, p.range) {
        (Some(e2), Some(range)) => inference::inpaint_mix(model, &p.image, &p.mask, &p.exemplar, e2, range, &p.opts)?,
        _ => inference::inpaint(model, &p.image, &p.mask, &p.exemplar, &p.opts)?,
    };
    let chw: Vec<f32> = out.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?;
    data::encode_png(&chw, model.config.model.resolution)
}

async fn run(state: Arc<AppState>, req: InpaintRequest) -> Result<Json<InpaintResponse>, ApiError> {
    let started = Instant::now();
    let prepared = prepare(&state.info, &req)?;
    let s = state.clone();
    let result = tokio::task::spawn_blocking(move || {
        let model = s.model.lock().map_err(|e| e.to_string())?;
        infer(&model, &prepared).map(|png| (png, prepared)).map_err(|e| e.to_string())
    })
    .await
    .map_err(|e| internal(&state, &e.to_string()))?;
    let (png, prepared) = result.map_err(|e| internal(&state, &e))?;
    Ok(Json(InpaintResponse {
        image: B64.encode(png),
        seed: prepared.opts.seed,
        psi: prepared.opts.psi,
        phi: prepared.opts.phi.to_string(),
        range: prepared.range,
        model_hash: state.info.model_hash.clone(),
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    }))
}
