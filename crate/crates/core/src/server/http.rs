//! JSON-over-HTTP front end for [`Collector`].
//!
//! | Route | Body | Reply |
//! |---|---|---|
//! | `POST /session` | `{worker_id, demographics?}` | `{session_id, task}` |
//! | `POST /session/{id}/answer` | `{pair_id, choice}` | `{status: "next", task}`, `{status: "completed" \| "rejected"}`, or 429 `{retry_after_ms}` |
//! | `GET /session/{id}/status` | | `{state, progress, total}` |
//! | `GET /export?accepted=true` | | CSV response log |
//! | `GET /shape/{id}` | | `{shape_id, resolution, srvox_base64}` |
//!
//! Errors are `{error}` with 400 (bad choice), 404 (unknown session or
//! shape), 409 (out-of-order pair, finished session, no batches left).

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AnswerOutcome, Collector, ServerError, SessionState, TaskView};
use crate::dataset::Demographics;
use crate::voxel::VoxelGrid;

#[derive(Clone)]
pub struct AppState {
    pub collector: Arc<Collector>,
    pub shapes: Arc<BTreeMap<String, VoxelGrid>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapePayload {
    pub shape_id: String,
    pub resolution: usize,
    /// The grid's SRVOX file bytes, base64-encoded.
    pub srvox_base64: String,
}

impl ShapePayload {
    pub fn encode(grid: &VoxelGrid) -> Self {
        ShapePayload {
            shape_id: grid.shape_id().to_string(),
            resolution: grid.resolution(),
            srvox_base64: BASE64.encode(grid.to_bytes().expect("valid grid encodes")),
        }
    }

    pub fn decode(&self) -> Option<VoxelGrid> {
        VoxelGrid::from_bytes(&BASE64.decode(&self.srvox_base64).ok()?).ok()
    }
}

/// A task together with the grids of both shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEnvelope {
    #[serde(flatten)]
    pub task: TaskView,
    pub payload_a: Option<ShapePayload>,
    pub payload_b: Option<ShapePayload>,
}

#[derive(Debug, Deserialize)]
pub struct StartRequest {
    pub worker_id: String,
    #[serde(default)]
    pub demographics: Option<Demographics>,
}

#[derive(Debug, Deserialize)]
pub struct AnswerRequest {
    pub pair_id: String,
    pub choice: String,
}

#[derive(Debug, Deserialize)]
pub struct ExportQuery {
    #[serde(default)]
    pub accepted: Option<bool>,
}

fn error(status: StatusCode, message: impl ToString) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

impl IntoResponse for ServerError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServerError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ServerError::BadChoice(_) => StatusCode::BAD_REQUEST,
            ServerError::NoBatches | ServerError::OutOfOrder { .. } | ServerError::SessionClosed(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        error(status, self)
    }
}

impl AppState {
    fn envelope(&self, task: TaskView) -> TaskEnvelope {
        let payload = |id: &str| self.shapes.get(id).map(ShapePayload::encode);
        TaskEnvelope {
            payload_a: payload(&task.shape_a),
            payload_b: payload(&task.shape_b),
            task,
        }
    }
}

async fn start_session(State(app): State<AppState>, Json(req): Json<StartRequest>) -> Response {
    let app2 = app.clone();
    let result = tokio::task::spawn_blocking(move || app2.collector.start_session(&req.worker_id, req.demographics)).await;
    match result {
        Ok(Ok((session_id, task))) => Json(json!({ "session_id": session_id, "task": app.envelope(task) })).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn answer(State(app): State<AppState>, Path(id): Path<String>, Json(req): Json<AnswerRequest>) -> Response {
    let app2 = app.clone();
    let result = tokio::task::spawn_blocking(move || app2.collector.submit(&id, &req.pair_id, &req.choice)).await;
    match result {
        Ok(Ok(AnswerOutcome::Retry { retry_after_ms })) => {
            (StatusCode::TOO_MANY_REQUESTS, Json(json!({ "retry_after_ms": retry_after_ms }))).into_response()
        }
        Ok(Ok(AnswerOutcome::Next(task))) => Json(json!({ "status": "next", "task": app.envelope(task) })).into_response(),
        Ok(Ok(AnswerOutcome::Finished(state))) => {
            let status = match state {
                SessionState::Completed => "completed",
                SessionState::Rejected => "rejected",
                SessionState::Active => "active",
            };
            Json(json!({ "status": status })).into_response()
        }
        Ok(Err(e)) => e.into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn status(State(app): State<AppState>, Path(id): Path<String>) -> Response {
    match app.collector.status(&id) {
        Ok(s) => Json(s).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn export(State(app): State<AppState>, Query(q): Query<ExportQuery>) -> Response {
    match app.collector.export_csv(q.accepted.unwrap_or(false)) {
        Ok(csv) => ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn shape(State(app): State<AppState>, Path(id): Path<String>) -> Response {
    match app.shapes.get(&id) {
        Some(g) => Json(ShapePayload::encode(g)).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown shape {id:?}")),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/session", post(start_session))
        .route("/session/{id}/answer", post(answer))
        .route("/session/{id}/status", get(status))
        .route("/export", get(export))
        .route("/shape/{id}", get(shape))
        .with_state(state)
}

/// Serves until Ctrl-C. `on_bound` receives the actual address (useful with port 0).
pub async fn serve(addr: SocketAddr, state: AppState, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
