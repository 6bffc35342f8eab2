//! JSON API for the annotation queue of one run.
//!
//! Endpoints:
//! - `GET /tasks?status=&backend=&context=&page=&page_size=` (status defaults to `pending`, `all` lists both)
//! - `GET /tasks/{id}`
//! - `POST /tasks/{id}/label` with `{"identification": "yes"|"no", "disease": "<class id>|Other", "annotator_id": "..."}`
//! - `GET /stats`
//!
//! Errors come back as `{"error": {"code": ..., "message": ...}}`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use mvp_core::orchestrator::{OrchestratorError, RunStore, TaskFilter, TaskStatus};
use mvp_core::parse::Identification;

pub const MAX_PAGE_SIZE: usize = 200;
const DEFAULT_PAGE_SIZE: usize = 20;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            message: message.into(),
        }
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let (status, code) = match &e {
            OrchestratorError::TaskNotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            OrchestratorError::AlreadyLabeled(_) => (StatusCode::CONFLICT, "already_labeled"),
            OrchestratorError::InvalidLabel(_) => (StatusCode::BAD_REQUEST, "invalid_label"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "store_error"),
        };
        if status.is_server_error() {
            log::error!("review api: {e}");
        }
        Self {
            status,
            code,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<String>,
    backend: Option<String>,
    context: Option<usize>,
    page: Option<usize>,
    page_size: Option<usize>,
}

#[derive(Debug, Deserialize)]
pub struct LabelRequest {
    pub identification: Identification,
    pub disease: String,
    pub annotator_id: String,
}

pub fn router(store: Arc<RunStore>) -> Router {
    Router::new()
        .route("/tasks", get(list_tasks))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/label", post(submit_label))
        .route("/stats", get(stats))
        .with_state(store)
}

async fn list_tasks(
    State(store): State<Arc<RunStore>>,
    query: Result<Query<ListQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let status = match q.status.as_deref().unwrap_or("pending") {
        "pending" => Some(TaskStatus::Pending),
        "labeled" => Some(TaskStatus::Labeled),
        "all" => None,
        other => return Err(ApiError::bad_request(format!("unknown status `{other}`"))),
    };
    let page = q.page.unwrap_or(1);
    let page_size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
    if page == 0 || page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(ApiError::bad_request(format!(
            "page must be >= 1 and page_size in 1..={MAX_PAGE_SIZE}"
        )));
    }
    let filter = TaskFilter {
        status,
        backend: q.backend,
        context: q.context,
    };
    Ok(Json(store.list_tasks(&filter, page, page_size)).into_response())
}

async fn get_task(State(store): State<Arc<RunStore>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(store.task_detail(&id)?).into_response())
}

async fn submit_label(
    State(store): State<Arc<RunStore>>,
    Path(id): Path<String>,
    body: Result<Json<LabelRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    // the store fsyncs before returning, so keep it off the async workers
    let task = tokio::task::spawn_blocking(move || store.submit_label(&id, req.identification, &req.disease, &req.annotator_id))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: e.to_string(),
        })??;
    Ok(Json(task).into_response())
}

async fn stats(State(store): State<Arc<RunStore>>) -> Json<mvp_core::orchestrator::RunStats> {
    Json(store.stats())
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(store: Arc<RunStore>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review api listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
