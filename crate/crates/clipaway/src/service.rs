//! HTTP service: job submission, polling and result retrieval.
//!
//! Requests are accepted as soon as inputs validate. Work runs on two
//! dedicated threads fed in submission order: one computes embeddings, the
//! other runs diffusion, so at most one diffusion call is in flight per
//! device while the next job's embeddings are already being computed.

use std::panic::AssertUnwindSafe;
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clipaway_core::pipeline::PreparedRequest;
use clipaway_core::raster::{decode_mask, decode_rgb};
use clipaway_core::Error;
use serde_json::json;

use crate::config::{apply_overrides, ToolkitConfig};
use crate::jobs::{JobStore, StoreError};
use crate::models::Models;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub reason: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, reason: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            status,
            reason: reason.into(),
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "reason": self.reason, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::MaskShapeMismatch { .. }
            | Error::ImageDecode(_)
            | Error::InvalidRequest(_)
            | Error::DimensionMismatch { .. } => StatusCode::BAD_REQUEST,
            Error::BackendUnavailable(_) | Error::WeightsNotLoaded(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.reason(), e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Core(inner) => inner.into(),
            StoreError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, e.reason(), e.to_string()),
            StoreError::NotDone { .. } | StoreError::InvalidTransition { .. } => {
                ApiError::new(StatusCode::CONFLICT, e.reason(), e.to_string())
            }
        }
    }
}

enum ModelStatus {
    Loading,
    Ready(Arc<Models>),
    Failed(String),
}

pub struct AppState {
    config: ToolkitConfig,
    store: Arc<JobStore>,
    models: RwLock<ModelStatus>,
    queue: Mutex<mpsc::Sender<String>>,
    pending: Mutex<Option<mpsc::Receiver<String>>>,
}

impl AppState {
    /// State with models still loading. `requeue` holds recovered QUEUED job
    /// ids, which run first once models are installed.
    pub fn new(config: ToolkitConfig, store: Arc<JobStore>, requeue: Vec<String>) -> Arc<Self> {
        let (tx, rx) = mpsc::channel();
        for id in requeue {
            tx.send(id).expect("receiver held locally");
        }
        Arc::new(Self {
            config,
            store,
            models: RwLock::new(ModelStatus::Loading),
            queue: Mutex::new(tx),
            pending: Mutex::new(Some(rx)),
        })
    }

    pub fn store(&self) -> &Arc<JobStore> {
        &self.store
    }

    pub fn config(&self) -> &ToolkitConfig {
        &self.config
    }

    /// Mark models ready and start the worker threads.
    pub fn install_models(&self, models: Arc<Models>) {
        let Some(rx) = self.pending.lock().expect("queue poisoned").take() else {
            log::warn!("models already installed");
            return;
        };
        *self.models.write().expect("model status poisoned") = ModelStatus::Ready(models.clone());
        spawn_workers(self.store.clone(), models, rx);
    }

    pub fn fail_models(&self, message: String) {
        *self.models.write().expect("model status poisoned") = ModelStatus::Failed(message);
    }

    fn ready_models(&self) -> Result<Arc<Models>, ApiError> {
        match &*self.models.read().expect("model status poisoned") {
            ModelStatus::Ready(m) => Ok(m.clone()),
            ModelStatus::Loading => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "models_loading",
                "models are still loading",
            )),
            ModelStatus::Failed(msg) => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "models_failed",
                msg.clone(),
            )),
        }
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "worker panicked".into())
}

fn fail(store: &JobStore, id: &str, reason: &str, message: &str) {
    if let Err(e) = store.mark_failed(id, reason, message) {
        log::error!("could not mark job {id} failed: {e}");
    }
}

fn spawn_workers(store: Arc<JobStore>, models: Arc<Models>, rx: mpsc::Receiver<String>) {
    let (ready_tx, ready_rx) = mpsc::sync_channel::<(String, PreparedRequest)>(1);

    let (s, m) = (store.clone(), models.clone());
    std::thread::Builder::new()
        .name("clipaway-embed".into())
        .spawn(move || {
            for id in rx {
                if let Err(e) = s.mark_running(&id) {
                    log::warn!("skipping job {id}: {e}");
                    continue;
                }
                let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| {
                    let request = s.load_request(&id)?;
                    Ok::<_, StoreError>(m.pipeline.prepare(request)?)
                }));
                match outcome {
                    Ok(Ok(prepared)) => {
                        if ready_tx.send((id, prepared)).is_err() {
                            break;
                        }
                    }
                    Ok(Err(e)) => fail(&s, &id, e.reason(), &e.to_string()),
                    Err(p) => fail(&s, &id, "internal_error", &panic_message(p)),
                }
            }
        })
        .expect("spawn embedding worker");

    std::thread::Builder::new()
        .name("clipaway-diffusion".into())
        .spawn(move || {
            for (id, prepared) in ready_rx {
                let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| {
                    let backend = models.backend(prepared.request().options.backend)?;
                    let result = models.pipeline.generate(prepared, backend.as_ref())?;
                    let mut diag = serde_json::to_value(&result.diagnostics).map_err(Error::from)?;
                    diag["job_id"] = json!(id);
                    store.mark_done(&id, &result.output, &diag)
                }));
                match outcome {
                    Ok(Ok(_)) => log::info!("job {id} done"),
                    Ok(Err(e)) => fail(&store, &id, e.reason(), &e.to_string()),
                    Err(p) => fail(&store, &id, "internal_error", &panic_message(p)),
                }
            }
        })
        .expect("spawn diffusion worker");
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.service.max_upload_bytes;
    Router::new()
        .route("/api/v1/remove", post(submit))
        .route("/api/v1/jobs/{id}", get(job))
        .route("/api/v1/results/{id}", get(result))
        .route("/api/v1/results/{id}/diagnostics", get(diagnostics))
        .route("/api/v1/health", get(health))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    let status = e.status();
    let reason = if status == StatusCode::PAYLOAD_TOO_LARGE {
        "payload_too_large"
    } else {
        "invalid_multipart"
    };
    ApiError::new(status, reason, e.body_text())
}

async fn submit(State(state): State<Arc<AppState>>, mut form: Multipart) -> Result<Response, ApiError> {
    let models = state.ready_models()?;
    let (mut image, mut mask, mut options) = (None, None, None);
    while let Some(field) = form.next_field().await.map_err(multipart_error)? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(multipart_error)?;
        match name.as_str() {
            "image" => image = Some(bytes),
            "mask" => mask = Some(bytes),
            "options" => options = Some(bytes),
            other => log::debug!("ignoring multipart field '{other}'"),
        }
    }
    let missing = |f: &str| ApiError::new(StatusCode::BAD_REQUEST, "missing_field", format!("multipart field '{f}' is required"));
    let image = image.ok_or_else(|| missing("image"))?;
    let mask = mask.ok_or_else(|| missing("mask"))?;

    let st = state.clone();
    let job = tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let image = decode_rgb(&image)?;
        let mask = decode_mask(&mask)?;
        if mask.dimensions() != image.dimensions() {
            return Err(Error::MaskShapeMismatch {
                mask: mask.dimensions(),
                image: image.dimensions(),
            }
            .into());
        }
        let defaults = st.config.default_options();
        let opts = match options {
            Some(b) if !b.is_empty() => {
                let text = std::str::from_utf8(&b)
                    .map_err(|_| Error::InvalidRequest("options must be UTF-8 JSON".into()))?;
                apply_overrides(&defaults, text)?
            }
            _ => defaults,
        };
        models.backend(opts.backend)?;
        Ok(st.store.create(&image, &mask, opts, models.provenance().clone())?)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string()))??;

    state
        .queue
        .lock()
        .expect("queue poisoned")
        .send(job.id.clone())
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "queue_closed", "job queue is closed"))?;
    let body = json!({ "job_id": job.id, "state": job.state });
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

async fn job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(state.store.get(&id)?).into_response())
}

async fn result(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let bytes = state.store.result_png(&id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn diagnostics(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let bytes = state.store.diagnostics_json(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let cfg = &state.config;
    let (status, code, extra) = match &*state.models.read().expect("model status poisoned") {
        ModelStatus::Ready(m) => (
            "ready",
            StatusCode::OK,
            json!({
                "weights": m.weight_hashes,
                "backends": m.backends.values().map(|b| json!({"kind": b.kind(), "id": b.id()})).collect::<Vec<_>>(),
                "region_encoder": m.pipeline.region_encoder.id(),
                "provenance": m.provenance(),
            }),
        ),
        ModelStatus::Loading => ("loading", StatusCode::SERVICE_UNAVAILABLE, json!({})),
        ModelStatus::Failed(msg) => ("failed", StatusCode::SERVICE_UNAVAILABLE, json!({ "error": msg })),
    };
    let mut body = json!({
        "status": status,
        "mock": cfg.mock,
        "seed": cfg.seed,
        "config_sha256": cfg.snapshot_hash(),
    });
    if let (Some(b), Some(e)) = (body.as_object_mut(), extra.as_object()) {
        b.extend(e.clone());
    }
    (code, Json(body)).into_response()
}

/// Bind, load models in the background and serve until interrupted.
pub async fn serve(config: ToolkitConfig) -> anyhow::Result<()> {
    let (store, recovery) = JobStore::open(&config.service.jobs_dir)?;
    if !recovery.interrupted.is_empty() {
        log::warn!("{} interrupted job(s) marked FAILED", recovery.interrupted.len());
    }
    if !recovery.queued.is_empty() {
        log::info!("re-enqueuing {} queued job(s)", recovery.queued.len());
    }
    let store = Arc::new(store);
    let state = AppState::new(config.clone(), store.clone(), recovery.queued);

    let loader = state.clone();
    std::thread::spawn(move || match Models::from_config(&loader.config) {
        Ok(m) => {
            log::info!("models ready (mock = {})", m.mock);
            loader.install_models(Arc::new(m));
        }
        Err(e) => {
            log::error!("model loading failed: {e}");
            loader.fail_models(e.to_string());
        }
    });

    let retention = chrono::TimeDelta::from_std(Duration::from_secs(config.service.job_retention_secs))
        .unwrap_or(chrono::TimeDelta::MAX);
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let cutoff = chrono::Utc::now() - retention;
            let s = store.clone();
            let purged = tokio::task::spawn_blocking(move || s.purge_finished_before(cutoff))
                .await
                .unwrap_or(0);
            if purged > 0 {
                log::info!("purged {purged} expired job(s)");
            }
        }
    });

    let addr = format!("{}:{}", config.service.host, config.service.port);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
