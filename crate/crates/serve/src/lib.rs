//! JSON-over-HTTP synthesis service.
//!
//! Routes: `POST /synthesize`, `GET /styles?class=k`, `GET /health`,
//! `GET /meta`, and optional static files at `/`. Every error is a JSON body
//! `{code, message, field}`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use labelsynth_core::data::shapes::SIZE_MULTIPLE;
use labelsynth_core::data::{
    decode_instance_png, decode_label_png, encode_png, image_to_rgb8, DataError, InstanceMap, LabelMap, StyleVector,
};
use labelsynth_core::feature_encoder::{sample_styles, StyleCatalog, StyleError, StyleSelection};
use labelsynth_core::model::{ArchStrings, Models};
use labelsynth_core::training::{BundleError, ModelBundle};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

#[derive(Clone, Debug)]
pub struct ServeConfig {
    /// Largest accepted map, `(height, width)`.
    pub max_size: (usize, usize),
    /// Requests allowed to wait or run at once; more get 429.
    pub max_pending: usize,
    /// Requests synthesized concurrently.
    pub workers: usize,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { max_size: (256, 512), max_pending: 8, workers: 1, static_dir: None }
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("catalog: {0}")]
    Catalog(String),
    #[error(transparent)]
    Model(#[from] labelsynth_core::error::ModelError),
}

/// Immutable model state shared by all requests.
pub struct Loaded {
    pub models: Models,
    pub bundle: ModelBundle,
    pub catalog: Option<StyleCatalog>,
}

pub struct AppState {
    pub config: ServeConfig,
    loaded: RwLock<Option<Arc<Loaded>>>,
    pending: Arc<Semaphore>,
    workers: Arc<Semaphore>,
}

impl AppState {
    /// State without a model; `/health` reports `loading` until [`AppState::install`].
    pub fn new(config: ServeConfig) -> Arc<Self> {
        Arc::new(Self {
            pending: Arc::new(Semaphore::new(config.max_pending)),
            workers: Arc::new(Semaphore::new(config.workers.max(1))),
            config,
            loaded: RwLock::new(None),
        })
    }

    pub fn install(&self, bundle: ModelBundle, catalog: Option<StyleCatalog>) -> Result<(), LoadError> {
        let models = bundle.models()?;
        models.check_params(&bundle.params)?;
        *self.loaded.write().expect("state lock") = Some(Arc::new(Loaded { models, bundle, catalog }));
        Ok(())
    }

    pub fn load_files(&self, bundle: &Path, catalog: Option<&Path>) -> Result<(), LoadError> {
        let b = ModelBundle::load(bundle)?;
        let c = match catalog {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| LoadError::Catalog(format!("{}: {e}", p.display())))?;
                Some(StyleCatalog::from_json(&text).map_err(|e| LoadError::Catalog(e.to_string()))?)
            }
            None => None,
        };
        self.install(b, c)
    }

    pub fn loaded(&self) -> Option<Arc<Loaded>> {
        self.loaded.read().expect("state lock").clone()
    }
}

/// Machine-readable error body.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>, field: Option<&str>) -> Self {
        Self { status: status.as_u16(), code: code.into(), message: message.into(), field: field.map(str::to_string) }
    }

    fn bad(code: &str, message: impl Into<String>, field: &str) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message, Some(field))
    }

    fn unprocessable(code: &str, message: impl Into<String>, field: &str) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message, Some(field))
    }

    fn not_loaded() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "no model is loaded yet", None)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SynthesisRequest {
    /// Base64 8-bit gray PNG of class ids.
    pub label_png: String,
    /// Base64 8- or 16-bit gray PNG of instance ids; all zero when absent.
    #[serde(default)]
    pub instance_png: Option<String>,
    #[serde(default)]
    pub styles: BTreeMap<u16, StyleSelection>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthesisResponse {
    /// Base64 RGB PNG.
    pub image_png: String,
    pub height: usize,
    pub width: usize,
    pub timing_ms: f64,
    pub seed: u64,
    /// Style vector used for every instance.
    pub styles: BTreeMap<u16, StyleVector>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StylesResponse {
    pub class: u8,
    pub name: Option<String>,
    pub centers: Vec<StyleVector>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaResponse {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub arch: ArchStrings,
    pub use_encoder: bool,
    pub use_instance_maps: bool,
    /// Resolution the model was trained at, `(height, width)`.
    pub trained_resolution: (usize, usize),
    pub max_size: (usize, usize),
    pub size_multiple: usize,
    pub has_catalog: bool,
}

pub fn router(state: Arc<AppState>) -> Router {
    let mut r = Router::new()
        .route("/synthesize", post(synthesize))
        .route("/styles", get(styles))
        .route("/health", get(health))
        .route("/meta", get(meta));
    if let Some(dir) = &state.config.static_dir {
        r = r.fallback_service(tower_http::services::ServeDir::new(dir));
    }
    r.with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let status = if state.loaded().is_some() { "ready" } else { "loading" };
    Json(serde_json::json!({ "status": status }))
}

async fn meta(State(state): State<Arc<AppState>>) -> Result<Json<MetaResponse>, ApiError> {
    let l = state.loaded().ok_or_else(ApiError::not_loaded)?;
    let m = &l.bundle.manifest;
    Ok(Json(MetaResponse {
        num_classes: m.spec.num_classes,
        class_names: m.class_names.clone(),
        arch: m.spec.arch.clone(),
        use_encoder: m.spec.use_encoder,
        use_instance_maps: m.spec.use_instance_maps,
        trained_resolution: m.resolution,
        max_size: state.config.max_size,
        size_multiple: SIZE_MULTIPLE.max(l.models.generator.dims_multiple()),
        has_catalog: l.catalog.is_some(),
    }))
}

#[derive(Deserialize)]
struct StylesQuery {
    class: Option<String>,
}

async fn styles(State(state): State<Arc<AppState>>, Query(q): Query<StylesQuery>) -> Result<Json<StylesResponse>, ApiError> {
    let l = state.loaded().ok_or_else(ApiError::not_loaded)?;
    let raw = q.class.ok_or_else(|| ApiError::bad("missing_parameter", "query parameter `class` is required", "class"))?;
    let unknown = || ApiError::new(StatusCode::NOT_FOUND, "unknown_class", format!("no class `{raw}`"), Some("class"));
    let class: u8 = raw.parse().map_err(|_| unknown())?;
    if class as usize >= l.models.spec.num_classes {
        return Err(unknown());
    }
    let catalog = l
        .catalog
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no_catalog", "no style catalog is loaded", None))?;
    let entry = catalog.classes.get(&class).cloned().unwrap_or_default();
    Ok(Json(StylesResponse {
        class,
        name: l.bundle.manifest.class_names.get(class as usize).cloned(),
        centers: entry.centers,
        counts: entry.counts,
    }))
}

fn decode_b64(s: &str, field: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(s.trim()).map_err(|e| ApiError::bad("invalid_payload", format!("not base64: {e}"), field))
}

fn data_error(e: DataError, field: &str) -> ApiError {
    match e {
        DataError::InvalidLabel { .. } => ApiError::unprocessable("unknown_class", e.to_string(), field),
        DataError::InconsistentInstance { .. } => ApiError::bad("inconsistent_instance", e.to_string(), field),
        DataError::DimMismatch { .. } => ApiError::bad("invalid_dims", e.to_string(), field),
        _ => ApiError::bad("invalid_payload", e.to_string(), field),
    }
}

fn style_error(e: StyleError) -> ApiError {
    let code = match e {
        StyleError::ClusterOutOfRange { .. } => "bad_cluster",
        StyleError::NoStyles { .. } => "no_styles",
        StyleError::UnknownInstance(_) => "unknown_instance",
        StyleError::NonFinite(_) => "bad_vector",
    };
    ApiError::unprocessable(code, e.to_string(), "styles")
}

/// Decoded and validated maps of a request.
pub struct ParsedMaps {
    pub label: LabelMap,
    pub instance: InstanceMap,
}

/// Decode the request's maps and check them against the loaded model and size limits.
pub fn parse_maps(req: &SynthesisRequest, l: &Loaded, config: &ServeConfig) -> Result<ParsedMaps, ApiError> {
    let grid = decode_label_png(&decode_b64(&req.label_png, "label_png")?).map_err(|e| data_error(e, "label_png"))?;
    let (h, w) = grid.dim();
    let multiple = SIZE_MULTIPLE.max(l.models.generator.dims_multiple());
    if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
        return Err(ApiError::bad("invalid_dims", format!("maps are {h}x{w}; both dims must be multiples of {multiple}"), "label_png"));
    }
    let (mh, mw) = config.max_size;
    if h > mh || w > mw {
        return Err(ApiError::bad("invalid_dims", format!("maps are {h}x{w}; the limit is {mh}x{mw}"), "label_png"));
    }
    let label = LabelMap::new(grid, l.models.spec.num_classes).map_err(|e| data_error(e, "label_png"))?;
    let instance = match &req.instance_png {
        None => InstanceMap::new(Array2::zeros((h, w))),
        Some(s) => {
            let g = decode_instance_png(&decode_b64(s, "instance_png")?).map_err(|e| data_error(e, "instance_png"))?;
            if g.dim() != (h, w) {
                return Err(ApiError::bad(
                    "invalid_dims",
                    format!("instance map is {:?} but the label map is {:?}", g.dim(), (h, w)),
                    "instance_png",
                ));
            }
            InstanceMap::checked(g, &label).map_err(|e| data_error(e, "instance_png"))?
        }
    };
    Ok(ParsedMaps { label, instance })
}

/// Run one request to completion on the calling thread.
pub fn run_synthesis(req: &SynthesisRequest, l: &Loaded, config: &ServeConfig) -> Result<SynthesisResponse, ApiError> {
    let started = Instant::now();
    let maps = parse_maps(req, l, config)?;
    let seed = req.seed.unwrap_or_else(rand::random);
    let styles = if l.models.spec.use_encoder {
        let empty = StyleCatalog::default();
        let catalog = l.catalog.as_ref().unwrap_or(&empty);
        Some(sample_styles(catalog, &maps.instance, &maps.label, &req.styles, seed).map_err(style_error)?)
    } else {
        None
    };
    let image = l
        .models
        .synthesize::<f32>(&l.bundle.params, &maps.label, &maps.instance, styles.as_ref())
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "synthesis_failed", e.to_string(), None))?;
    let png = encode_png(&image_to_rgb8(&image))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "encode_failed", e.to_string(), None))?;
    let (_, height, width) = image.dim();
    Ok(SynthesisResponse {
        image_png: B64.encode(png),
        height,
        width,
        timing_ms: started.elapsed().as_secs_f64() * 1e3,
        seed,
        styles: styles.unwrap_or_default(),
    })
}

async fn synthesize(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SynthesisResponse>, ApiError> {
    let l = state.loaded().ok_or_else(ApiError::not_loaded)?;
    let req: SynthesisRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad("invalid_json", e.to_string(), "body"))?;
    let _pending = Arc::clone(&state.pending).try_acquire_owned().map_err(|_| {
        ApiError::new(StatusCode::TOO_MANY_REQUESTS, "busy", "too many requests in flight; retry later", None)
    })?;
    let _worker = Arc::clone(&state.workers).acquire_owned().await.expect("worker semaphore is never closed");
    let config = state.config.clone();
    let out = tokio::task::spawn_blocking(move || run_synthesis(&req, &l, &config))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "worker_failed", e.to_string(), None))??;
    Ok(Json(out))
}
