//! HTTP JSON service behind the annotation UI.
//!
//! | route | purpose |
//! |---|---|
//! | `GET /api/queue?annotator=<id>[&limit=n]` | pending samples the annotator has not judged, label-masked, with dialogue context |
//! | `POST /api/verdict` | `{sample_id, annotator, label}` |
//! | `GET /api/progress` | pending/accepted/rejected counts overall, per emotion, per domain, per annotator |
//! | `GET /api/agreement` | round index, accept/reject tallies, targets and remaining deficit |
//!
//! Controller state is written back to disk after every accepted verdict.
//! Errors come back as `{"error": "..."}` with a 4xx status.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use erc_core::augmentation::{AgreementView, AnnotationError, AugmentationController, Progress, QueueItem, VerdictAck};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

pub struct AppState {
    controller: RwLock<AugmentationController>,
    state_path: Option<PathBuf>,
    save_lock: Mutex<()>,
}

impl AppState {
    /// `state_path`, when set, receives the controller state after each verdict.
    pub fn new(controller: AugmentationController, state_path: Option<PathBuf>) -> Arc<Self> {
        Arc::new(AppState {
            controller: RwLock::new(controller),
            state_path,
            save_lock: Mutex::new(()),
        })
    }

    pub fn with_controller<T>(&self, f: impl FnOnce(&AugmentationController) -> T) -> T {
        f(&self.controller.read().unwrap_or_else(|e| e.into_inner()))
    }

    fn persist(&self, controller: &AugmentationController) -> Result<(), ApiError> {
        let Some(path) = &self.state_path else { return Ok(()) };
        let _guard = self.save_lock.lock().unwrap_or_else(|e| e.into_inner());
        controller
            .save(path)
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("saving state: {e}")))
    }
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1}))).into_response()
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let status = match e {
            AnnotationError::UnknownSample(_) => StatusCode::NOT_FOUND,
            AnnotationError::ThirdAnnotator { .. } | AnnotationError::AlreadyResolved { .. } => StatusCode::CONFLICT,
            AnnotationError::EmptyAnnotator | AnnotationError::LabelOutsideSet(_) | AnnotationError::NotEnqueueable(_) => {
                StatusCode::BAD_REQUEST
            }
        };
        ApiError(status, e.to_string())
    }
}

#[derive(Debug, Deserialize)]
pub struct QueueQuery {
    annotator: Option<String>,
    limit: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictBody {
    pub sample_id: String,
    pub annotator: String,
    pub label: String,
}

async fn queue(State(app): State<Arc<AppState>>, Query(q): Query<QueueQuery>) -> Result<Json<Vec<QueueItem>>, ApiError> {
    let annotator = q.annotator.filter(|a| !a.trim().is_empty()).ok_or_else(|| {
        ApiError(StatusCode::BAD_REQUEST, "query parameter `annotator` is required".into())
    })?;
    Ok(Json(app.with_controller(|c| c.store().queue(annotator.trim(), q.limit))))
}

async fn verdict(State(app): State<Arc<AppState>>, Json(body): Json<VerdictBody>) -> Result<Json<VerdictAck>, ApiError> {
    tokio::task::spawn_blocking(move || {
        let controller = app.controller.read().unwrap_or_else(|e| e.into_inner());
        let ack = controller
            .store()
            .record_verdict(&body.sample_id, body.annotator.trim(), &body.label)?;
        app.persist(&controller)?;
        tracing::info!(sample = %ack.sample_id, annotator = %ack.annotator, status = ?ack.status, "verdict recorded");
        Ok(Json(ack))
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn progress(State(app): State<Arc<AppState>>) -> Json<Progress> {
    Json(app.with_controller(|c| c.store().progress()))
}

async fn agreement(State(app): State<Arc<AppState>>) -> Json<AgreementView> {
    Json(app.with_controller(|c| c.agreement()))
}

/// The API routes, plus static files from `static_dir` at `/` if given.
pub fn router(app: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/queue", get(queue))
        .route("/api/verdict", post(verdict))
        .route("/api/progress", get(progress))
        .route("/api/agreement", get(agreement))
        .with_state(app);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, app: Arc<AppState>, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "annotation service listening");
    axum::serve(listener, router(app, static_dir)).await
}
