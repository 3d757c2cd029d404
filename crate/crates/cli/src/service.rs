//! HTTP service for interactive teaching: register a class from a few sketches,
//! classify photos against every known class.
//!
//! Readers clone an `Arc` of the current snapshot; registrations go through a
//! single writer that builds the next snapshot, persists it, then swaps it in.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};

use fscil_core::checkpoint::{ClassEntry, Checkpoint, Origin};
use fscil_core::classifier::softmax;
use fscil_core::data::{decode_image, ClassId};
use fscil_core::model::Model;
use fscil_core::numeric::DenseArray;
use fscil_core::Error;

pub const MAX_EXEMPLARS: usize = 20;
pub const BIND_ENV: &str = "FSCIL_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug)]
pub enum ServiceError {
    BadRequest(String),
    Conflict(String),
    Internal(String),
}

impl std::fmt::Display for ServiceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ServiceError::BadRequest(m) | ServiceError::Conflict(m) | ServiceError::Internal(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for ServiceError {}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        match e {
            Error::ZeroEmbedding | Error::ZeroRow(_) | Error::Shape(_) | Error::Config(_) => ServiceError::BadRequest(e.to_string()),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_id: ClassId,
    pub display_name: String,
    pub probability: f64,
    pub origin: Origin,
}

/// One immutable published state.
pub struct Snapshot {
    pub checkpoint: Checkpoint,
    pub model: Model,
    pub hash: String,
}

impl Snapshot {
    fn new(checkpoint: Checkpoint) -> Result<Self, Error> {
        if checkpoint.current.num_classes() != checkpoint.registry.len()
            || checkpoint.current.class_ids() != checkpoint.registry.ids().as_slice()
        {
            return Err(Error::Alignment("classifier rows and class registry disagree".into()));
        }
        let model = checkpoint.model()?;
        let hash = checkpoint.hash()?;
        Ok(Self { checkpoint, model, hash })
    }
}

pub struct ServiceState {
    snapshot: RwLock<Arc<Snapshot>>,
    writer: Mutex<()>,
    path: Option<PathBuf>,
}

impl ServiceState {
    /// `path`, when given, receives the checkpoint after every registration.
    pub fn new(checkpoint: Checkpoint, path: Option<PathBuf>) -> Result<Self, Error> {
        Ok(Self { snapshot: RwLock::new(Arc::new(Snapshot::new(checkpoint)?)), writer: Mutex::new(()), path })
    }

    pub fn load(path: PathBuf) -> Result<Self, Error> {
        let ckpt = Checkpoint::load(&path)?;
        Self::new(ckpt, Some(path))
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn classes(&self) -> Vec<ClassEntry> {
        self.snapshot().checkpoint.registry.entries().to_vec()
    }

    /// Decodes base64 PNG (a `data:` URL prefix is accepted) to the backbone's input shape.
    pub fn decode(&self, encoded: &str) -> Result<DenseArray, ServiceError> {
        let shape = self.snapshot().checkpoint.backbone_config.input;
        let payload = encoded.split_once(";base64,").map_or(encoded, |(_, p)| p);
        let bytes = STANDARD.decode(payload.trim()).map_err(|e| ServiceError::BadRequest(format!("invalid base64: {e}")))?;
        decode_image(&bytes, Some((shape.height, shape.width))).map_err(|e| ServiceError::BadRequest(format!("undecodable image: {e}")))
    }

    pub fn register(&self, name: &str, images: &[DenseArray]) -> Result<ClassEntry, ServiceError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(ServiceError::BadRequest("class name must not be empty".into()));
        }
        if images.is_empty() || images.len() > MAX_EXEMPLARS {
            return Err(ServiceError::BadRequest(format!("need 1 to {MAX_EXEMPLARS} exemplar images, got {}", images.len())));
        }
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let snap = self.snapshot();
        let ckpt = &snap.checkpoint;
        if ckpt.registry.contains_name(name) {
            return Err(ServiceError::Conflict(format!("class `{name}` is already registered")));
        }
        let refs: Vec<&DenseArray> = images.iter().collect();
        let embeddings = snap.model.backbone.embed_batch(&refs)?;
        let id = ckpt.registry.next_id(ckpt.meta.dataset_classes);
        let current = snap.model.generator.generate(&ckpt.current, &[(id, embeddings)])?;
        let entry = ClassEntry { class_id: id, display_name: name.to_string(), origin: Origin::Incremental, exemplar_count: images.len() };
        let mut next = ckpt.clone();
        next.current = current;
        next.registry.push(entry.clone())?;
        let next = Snapshot::new(next)?;
        if let Some(path) = &self.path {
            next.checkpoint.save(path)?;
        }
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(next);
        log::info!("registered class {} `{}` from {} exemplars", entry.class_id, entry.display_name, entry.exemplar_count);
        Ok(entry)
    }

    /// Posterior over the full label space, most probable first.
    pub fn classify(&self, image: &DenseArray) -> Result<Vec<Prediction>, ServiceError> {
        let snap = self.snapshot();
        let emb = snap.model.backbone.embed(image)?;
        let weights = &snap.checkpoint.current;
        let probs = softmax(&weights.logits(emb.values())?);
        let mut out: Vec<Prediction> = snap
            .checkpoint
            .registry
            .entries()
            .iter()
            .zip(probs)
            .map(|(e, p)| Prediction { class_id: e.class_id, display_name: e.display_name.clone(), probability: p, origin: e.origin })
            .collect();
        out.sort_by(|a, b| b.probability.total_cmp(&a.probability));
        Ok(out)
    }
}

#[derive(Deserialize)]
pub struct RegisterRequest {
    pub name: String,
    pub images: Vec<String>,
}

#[derive(Serialize, Deserialize)]
pub struct RegisterResponse {
    pub class: ClassEntry,
    pub num_classes: usize,
}

#[derive(Deserialize)]
pub struct ClassifyRequest {
    pub image: String,
}

#[derive(Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub predictions: Vec<Prediction>,
}

#[derive(Serialize, Deserialize)]
pub struct ClassesResponse {
    pub classes: Vec<ClassEntry>,
}

#[derive(Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub num_classes: usize,
    pub checkpoint: String,
}

type Shared = Arc<ServiceState>;

fn body<T>(req: Result<Json<T>, JsonRejection>) -> Result<T, ServiceError> {
    req.map(|Json(v)| v).map_err(|e| ServiceError::BadRequest(e.body_text()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn register_handler(State(state): State<Shared>, req: Result<Json<RegisterRequest>, JsonRejection>) -> Result<Response, ServiceError> {
    let req = body(req)?;
    let resp = blocking(move || {
        let images = req.images.iter().map(|s| state.decode(s)).collect::<Result<Vec<_>, _>>()?;
        let class = state.register(&req.name, &images)?;
        Ok(RegisterResponse { class, num_classes: state.snapshot().checkpoint.registry.len() })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(resp)).into_response())
}

async fn classify_handler(State(state): State<Shared>, req: Result<Json<ClassifyRequest>, JsonRejection>) -> Result<Json<ClassifyResponse>, ServiceError> {
    let req = body(req)?;
    let predictions = blocking(move || state.classify(&state.decode(&req.image)?)).await?;
    Ok(Json(ClassifyResponse { predictions }))
}

async fn classes_handler(State(state): State<Shared>) -> Json<ClassesResponse> {
    Json(ClassesResponse { classes: state.classes() })
}

async fn health_handler(State(state): State<Shared>) -> Json<HealthResponse> {
    let snap = state.snapshot();
    Json(HealthResponse { status: "ok".into(), num_classes: snap.checkpoint.registry.len(), checkpoint: snap.hash.clone() })
}

pub fn router(state: Shared) -> Router {
    let cors = CorsLayer::new().allow_origin(Any).allow_methods([Method::GET, Method::POST]).allow_headers(Any);
    Router::new()
        .route("/classes", get(classes_handler).post(register_handler))
        .route("/classify", post(classify_handler))
        .route("/health", get(health_handler))
        .layer(DefaultBodyLimit::max(32 * 1024 * 1024))
        .layer(cors)
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
