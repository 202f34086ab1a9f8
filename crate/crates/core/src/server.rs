//! HTTP API over a frozen checkpoint.
//!
//! | method | path         | body / query                                         |
//! |--------|--------------|------------------------------------------------------|
//! | GET    | `/model`     |                                                      |
//! | POST   | `/sample`    | `{seed, prompt, solver, steps?, atol?, rtol?}`       |
//! | POST   | `/invert`    | `{image (base64 PNG), prompt, solver...}`            |
//! | POST   | `/edit`      | `{noise_id or seed, prompt, attrs, t_edit, reweights, solver...}` |
//! | GET    | `/attention` | `?prompt=&block=&step=&seed=`                        |
//!
//! Images travel as base64 PNG. Errors are `{"error": {"category", "message"}}`.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use base64::engine::general_purpose::STANDARD as B64;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{AttentionMaps, Category, EditRequest, Engine, EngineError, SolverChoice};
use crate::io;
use crate::ode::SolverFamily;
use crate::tensor::Tensor;

pub const NOISE_CAPACITY: usize = 256;

#[derive(Clone, Debug)]
pub struct StoredNoise {
    pub noise: Tensor,
    pub prompt: String,
}

/// Least-recently-used map of inverted noises.
#[derive(Debug)]
pub struct NoiseStore {
    entries: IndexMap<String, StoredNoise>,
    capacity: usize,
}

impl NoiseStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: IndexMap::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: String, value: StoredNoise) {
        self.entries.shift_remove(&id);
        if self.entries.len() >= self.capacity {
            self.entries.shift_remove_index(0);
        }
        self.entries.insert(id, value);
    }

    pub fn get(&mut self, id: &str) -> Option<StoredNoise> {
        let (k, v) = self.entries.shift_remove_entry(id)?;
        self.entries.insert(k, v.clone());
        Some(v)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }
}

pub struct AppState {
    pub engine: Option<Arc<Engine>>,
    pub noises: Mutex<NoiseStore>,
}

impl AppState {
    pub fn new(engine: Option<Engine>) -> Arc<Self> {
        Arc::new(Self {
            engine: engine.map(Arc::new),
            noises: Mutex::new(NoiseStore::new(NOISE_CAPACITY)),
        })
    }

    fn engine(&self) -> Result<Arc<Engine>, ApiError> {
        self.engine.clone().ok_or(ApiError(EngineError::Unavailable))
    }
}

#[derive(Debug)]
pub struct ApiError(pub EngineError);

impl<E: Into<EngineError>> From<E> for ApiError {
    fn from(e: E) -> Self {
        ApiError(e.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let category = self.0.category();
        let status = match category {
            Category::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
            Category::NotFound => StatusCode::NOT_FOUND,
            Category::Solver | Category::Diverged | Category::Internal | Category::Io | Category::MissingFile => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            _ => StatusCode::BAD_REQUEST,
        };
        let body = json!({"error": {"category": category, "message": self.0.to_string()}});
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn bad_request(msg: impl ToString) -> ApiError {
    ApiError(EngineError::Invalid(msg.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(EngineError::Invalid(format!("worker failed: {e}"))))?
}

pub fn encode_image(image: &Tensor) -> Result<String, ApiError> {
    Ok(B64.encode(io::png_bytes(image)?))
}

pub fn decode_image(b64: &str) -> Result<Tensor, ApiError> {
    let bytes = B64.decode(b64.trim()).map_err(|e| bad_request(format!("image is not base64: {e}")))?;
    Ok(io::decode_png(&bytes)?)
}

fn first(batch: &Tensor) -> Result<Tensor, ApiError> {
    batch
        .unstack()
        .into_iter()
        .next()
        .ok_or_else(|| bad_request("empty batch"))
}

#[derive(Serialize, Deserialize)]
pub struct ModelInfo {
    pub arch: crate::model::ArchConfig,
    pub step: u64,
    pub latent_shape: Vec<usize>,
    pub depth: usize,
    pub prompt_length: usize,
    pub time_grid_n: usize,
    pub attributes: Vec<String>,
    pub bank_grid_n: Option<usize>,
    pub vocabulary: Vec<String>,
    pub solvers: Vec<String>,
}

async fn model_info(State(state): State<Arc<AppState>>) -> ApiResult<ModelInfo> {
    let e = state.engine()?;
    Ok(Json(ModelInfo {
        arch: e.meta.arch.clone(),
        step: e.meta.step,
        latent_shape: e.model.latent_shape(),
        depth: e.model.uvit().map_or(0, |u| u.config.depth),
        prompt_length: e.model.prompt_length(),
        time_grid_n: e.meta.flow.time_grid_n,
        attributes: e.bank.iter().flat_map(|b| b.names().map(str::to_string)).collect(),
        bank_grid_n: e.bank.as_ref().map(|b| b.grid_n),
        vocabulary: e.vocab.iter().flat_map(|v| v.words().map(str::to_string)).collect(),
        solvers: SolverFamily::ALL.iter().map(|f| f.name().to_string()).collect(),
    }))
}

#[derive(Serialize, Deserialize)]
pub struct SampleRequest {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub prompt: String,
    #[serde(flatten)]
    pub solver: SolverChoice,
}

#[derive(Serialize, Deserialize)]
pub struct ImageResponse {
    pub image: String,
    pub timing_ms: f64,
    pub evaluations: usize,
}

async fn sample(State(state): State<Arc<AppState>>, body: Result<Json<SampleRequest>, JsonRejection>) -> ApiResult<ImageResponse> {
    let Json(req) = body.map_err(bad_request)?;
    let engine = state.engine()?;
    let out = blocking(move || {
        let start = Instant::now();
        let (x, traj) = engine.sample(&[req.seed], &req.prompt, &req.solver)?;
        Ok(ImageResponse {
            image: encode_image(&first(&x)?)?,
            timing_ms: start.elapsed().as_secs_f64() * 1e3,
            evaluations: traj.evaluations,
        })
    })
    .await?;
    Ok(Json(out))
}

#[derive(Serialize, Deserialize)]
pub struct InvertRequest {
    pub image: String,
    #[serde(default)]
    pub prompt: String,
    #[serde(flatten)]
    pub solver: SolverChoice,
}

#[derive(Serialize, Deserialize)]
pub struct InvertResponse {
    pub noise_id: String,
    pub timing_ms: f64,
    pub evaluations: usize,
}

async fn invert(State(state): State<Arc<AppState>>, body: Result<Json<InvertRequest>, JsonRejection>) -> ApiResult<InvertResponse> {
    let Json(req) = body.map_err(bad_request)?;
    let engine = state.engine()?;
    let st = state.clone();
    let out = blocking(move || {
        let start = Instant::now();
        let image = decode_image(&req.image)?;
        let (noise, traj) = engine.invert(&image, &req.prompt, &req.solver)?;
        let noise = first(&noise)?;
        let mut key = noise.to_le_bytes();
        key.extend_from_slice(req.prompt.as_bytes());
        let noise_id = io::sha256_hex(&key)[..16].to_string();
        st.noises
            .lock()
            .expect("noise store poisoned")
            .insert(noise_id.clone(), StoredNoise { noise, prompt: req.prompt });
        Ok(InvertResponse {
            noise_id,
            timing_ms: start.elapsed().as_secs_f64() * 1e3,
            evaluations: traj.evaluations,
        })
    })
    .await?;
    Ok(Json(out))
}

#[derive(Serialize, Deserialize)]
pub struct EditBody {
    pub noise_id: Option<String>,
    pub seed: Option<u64>,
    /// Defaults to the prompt the noise was inverted under, else empty.
    pub prompt: Option<String>,
    #[serde(flatten)]
    pub edit: EditRequest,
}

#[derive(Serialize, Deserialize)]
pub struct EditResponse {
    pub image: String,
    pub baseline: String,
    pub relative_edit_error: f64,
    pub timing_ms: f64,
    pub evaluations: usize,
}

async fn edit(State(state): State<Arc<AppState>>, body: Result<Json<EditBody>, JsonRejection>) -> ApiResult<EditResponse> {
    let Json(req) = body.map_err(bad_request)?;
    let engine = state.engine()?;
    let (x0, prompt) = match (&req.noise_id, req.seed) {
        (Some(id), None) => {
            let stored = state
                .noises
                .lock()
                .expect("noise store poisoned")
                .get(id)
                .ok_or_else(|| ApiError(EngineError::NotFound(format!("unknown noise_id '{id}'"))))?;
            let mut shape = vec![1];
            shape.extend(stored.noise.shape());
            (stored.noise.reshape(shape)?, req.prompt.clone().unwrap_or(stored.prompt))
        }
        (None, Some(seed)) => (engine.noise(&[seed])?, req.prompt.clone().unwrap_or_default()),
        _ => return Err(bad_request("give exactly one of noise_id and seed")),
    };
    let out = blocking(move || {
        let start = Instant::now();
        let o = engine.edit(&x0, &prompt, &req.edit)?;
        Ok(EditResponse {
            image: encode_image(&first(&o.image)?)?,
            baseline: encode_image(&first(&o.baseline)?)?,
            relative_edit_error: o.relative_edit_error,
            timing_ms: start.elapsed().as_secs_f64() * 1e3,
            evaluations: o.evaluations,
        })
    })
    .await?;
    Ok(Json(out))
}

#[derive(Serialize, Deserialize)]
pub struct AttentionQuery {
    #[serde(default)]
    pub prompt: String,
    #[serde(default)]
    pub block: usize,
    #[serde(default)]
    pub step: usize,
    #[serde(default)]
    pub seed: u64,
}

async fn attention(
    State(state): State<Arc<AppState>>,
    query: Result<Query<AttentionQuery>, QueryRejection>,
) -> ApiResult<AttentionMaps> {
    let Query(q) = query.map_err(bad_request)?;
    let engine = state.engine()?;
    let maps = blocking(move || Ok(engine.attention(&q.prompt, q.block, q.step, q.seed)?)).await?;
    Ok(Json(maps))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/model", get(model_info))
        .route("/sample", post(sample))
        .route("/invert", post(invert))
        .route("/edit", post(edit))
        .route("/attention", get(attention))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
