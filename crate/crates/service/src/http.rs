//! HTTP API: `POST /v1/analyze` (WAV body) and `GET /v1/health`.

use std::sync::{Arc, OnceLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde_json::{json, Value};
use tower_http::cors::{Any, CorsLayer};
use vfp_core::audio::{self, AudioError};
use vfp_core::calibration::CalibrationMap;
use vfp_core::classifier::ModelBundle;
use vfp_core::pipeline::{self, PipelineConfig, PipelineError, VfpResult};

use crate::config::{ConfigError, ServiceConfig};

/// Model and calibration, immutable once loaded.
pub struct Loaded {
    pub model: ModelBundle,
    pub map: CalibrationMap,
    pub model_version: String,
    pub calibration_version: String,
}

impl Loaded {
    pub fn new(model: ModelBundle, map: CalibrationMap) -> Self {
        let model_version = model.version_tag();
        let calibration_version = calibration_tag(&map);
        Self { model, map, model_version, calibration_version }
    }
}

pub fn calibration_tag(map: &CalibrationMap) -> String {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for (x, y) in &map.knots {
        x.to_bits().hash(&mut h);
        y.to_bits().hash(&mut h);
    }
    format!("v{}-{:016x}", map.version, h.finish())
}

#[derive(Clone)]
pub struct AppState {
    loaded: Arc<OnceLock<Loaded>>,
    pipeline: Arc<PipelineConfig>,
    timeout: Duration,
}

impl AppState {
    /// State that answers 503 until [`AppState::set_loaded`] is called.
    pub fn empty(pipeline: PipelineConfig, timeout: Duration) -> Self {
        Self { loaded: Arc::new(OnceLock::new()), pipeline: Arc::new(pipeline), timeout }
    }

    pub fn ready(loaded: Loaded, pipeline: PipelineConfig, timeout: Duration) -> Self {
        let s = Self::empty(pipeline, timeout);
        s.set_loaded(loaded);
        s
    }

    /// First call wins; later calls are ignored.
    pub fn set_loaded(&self, loaded: Loaded) {
        let _ = self.loaded.set(loaded);
    }

    pub fn is_ready(&self) -> bool {
        self.loaded.get().is_some()
    }
}

fn error(status: StatusCode, code: &str, message: impl std::fmt::Display) -> Response {
    (status, axum::Json(json!({ "error": code, "message": message.to_string() }))).into_response()
}

/// Rounds every non-integer number to 3 decimals.
pub fn round_numbers(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64 number");
            if let Some(r) = serde_json::Number::from_f64((x * 1000.0).round() / 1000.0) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_numbers),
        Value::Object(map) => map.values_mut().for_each(round_numbers),
        _ => {}
    }
}

/// Response document for one analysis.
pub fn result_json(result: &VfpResult, loaded: &Loaded) -> Value {
    let mut v = serde_json::to_value(result).expect("serializable result");
    round_numbers(&mut v);
    let obj = v.as_object_mut().expect("object");
    obj.insert("model_version".into(), loaded.model_version.clone().into());
    obj.insert("calibration_version".into(), loaded.calibration_version.clone().into());
    v
}

enum AnalyzeError {
    Audio(AudioError),
    Pipeline(PipelineError),
}

fn analyze_bytes(bytes: &[u8], loaded: &Loaded, cfg: &PipelineConfig) -> Result<VfpResult, AnalyzeError> {
    let buf = audio::load_wav(bytes).map_err(AnalyzeError::Audio)?;
    pipeline::estimate_vfp(&buf, &loaded.model, &loaded.map, cfg).map_err(AnalyzeError::Pipeline)
}

async fn analyze(State(state): State<AppState>, body: Result<Bytes, BytesRejection>) -> Response {
    let body = match body {
        Ok(b) => b,
        Err(rej) if rej.status() == StatusCode::PAYLOAD_TOO_LARGE => {
            return error(StatusCode::PAYLOAD_TOO_LARGE, "too_large", rej.body_text())
        }
        Err(rej) => return error(StatusCode::BAD_REQUEST, "bad_body", rej.body_text()),
    };
    if body.is_empty() {
        return error(StatusCode::BAD_REQUEST, "malformed_container", "empty request body");
    }
    if !state.is_ready() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "loading", "model is still loading");
    }
    let worker = state.clone();
    let job = tokio::task::spawn_blocking(move || {
        let loaded = worker.loaded.get().expect("checked ready");
        analyze_bytes(&body, loaded, &worker.pipeline).map(|r| result_json(&r, loaded))
    });
    match tokio::time::timeout(state.timeout, job).await {
        Err(_) => error(StatusCode::INTERNAL_SERVER_ERROR, "timeout", "analysis timed out"),
        Ok(Err(join)) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", join),
        Ok(Ok(Ok(doc))) => (StatusCode::OK, axum::Json(doc)).into_response(),
        Ok(Ok(Err(AnalyzeError::Audio(e)))) => {
            let code = match e {
                AudioError::UnsupportedEncoding(_) => "unsupported_encoding",
                AudioError::MalformedContainer(_) => "malformed_container",
                AudioError::InvalidBuffer(_) | AudioError::Io(_) => "invalid_audio",
            };
            error(StatusCode::BAD_REQUEST, code, e)
        }
        Ok(Ok(Err(AnalyzeError::Pipeline(e @ PipelineError::InsufficientSpeech { .. })))) => {
            error(StatusCode::UNPROCESSABLE_ENTITY, "insufficient_speech", e)
        }
        Ok(Ok(Err(AnalyzeError::Pipeline(e)))) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e),
    }
}

async fn health(State(state): State<AppState>) -> Response {
    match state.loaded.get() {
        Some(l) => (
            StatusCode::OK,
            axum::Json(json!({
                "status": "ok",
                "model_version": l.model_version,
                "calibration_version": l.calibration_version,
            })),
        )
            .into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, axum::Json(json!({ "status": "loading" }))).into_response(),
    }
}

pub fn router(state: AppState, max_upload_bytes: usize, cors_origins: &[String]) -> Router {
    let origins: Vec<HeaderValue> = cors_origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
    let cors = CorsLayer::new().allow_origin(origins).allow_methods(Any).allow_headers(Any);
    Router::new()
        .route("/v1/analyze", post(analyze))
        .route("/v1/health", get(health))
        .layer(DefaultBodyLimit::max(max_upload_bytes))
        .layer(cors)
        .with_state(state)
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("failed to load model or calibration: {0}")]
    Load(#[from] vfp_core::Error),
    #[error("server i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub fn load(cfg: &ServiceConfig) -> Result<Loaded, vfp_core::Error> {
    let model = ModelBundle::load(&cfg.model_path)?;
    let map = CalibrationMap::load(&cfg.calibration_path)?;
    if !map.is_fitted() {
        return Err(vfp_core::calibration::CalibrationError::UnfittedMap.into());
    }
    Ok(Loaded::new(model, map))
}

/// Binds, serves 503 while the model loads, and runs until Ctrl-C.
pub async fn serve(cfg: ServiceConfig) -> Result<(), ServeError> {
    cfg.validate()?;
    let state = AppState::empty(cfg.pipeline.clone(), Duration::from_secs(cfg.request_timeout_s));
    let listener = tokio::net::TcpListener::bind((cfg.host.as_str(), cfg.port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let app = router(state.clone(), cfg.max_upload_bytes, &cfg.cors_origins);
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    });
    let loader_cfg = cfg.clone();
    match tokio::task::spawn_blocking(move || load(&loader_cfg)).await {
        Ok(Ok(loaded)) => {
            log::info!("loaded model {} and calibration {}", loaded.model_version, loaded.calibration_version);
            state.set_loaded(loaded);
        }
        Ok(Err(e)) => {
            server.abort();
            return Err(e.into());
        }
        Err(join) => {
            server.abort();
            return Err(std::io::Error::other(join.to_string()).into());
        }
    }
    server.await.map_err(|e| std::io::Error::other(e.to_string()))??;
    Ok(())
}
