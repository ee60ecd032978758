//! HTTP/JSON front for a [`RetrievalService`].
//!
//! | method | path | success |
//! |---|---|---|
//! | POST | `/v1/sessions` | 201 session info |
//! | GET | `/v1/sessions` | 200 all sessions |
//! | GET | `/v1/sessions/{id}` | 200 session info |
//! | GET | `/v1/sessions/{id}/results?limit=n` | 200, or 202 before the first list |
//! | POST | `/v1/sessions/{id}/stop` | 200 session info with final stats |
//! | GET | `/v1/health` | 200 repository summary |
//!
//! Failures are `{"error": {"code", "message"}}`.

use std::future::Future;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use otf_core::service::{RetrievalService, SessionRequest};
use otf_core::Error;

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

/// An error response with its status.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Config(_) | Error::DimensionMismatch { .. } | Error::DegenerateInput(_) => {
                (StatusCode::BAD_REQUEST, "invalid_request")
            }
            Error::Resolution { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "unresolved_query"),
            Error::Capacity(_) => (StatusCode::TOO_MANY_REQUESTS, "capacity_exceeded"),
            Error::NotReady(_) => (StatusCode::CONFLICT, "not_ready"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status.is_server_error() {
            tracing::error!("request failed: {e}");
        }
        ApiError::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code.to_owned(),
                message: self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

type Shared = Arc<RetrievalService>;
type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Deserialize)]
struct ResultsQuery {
    limit: Option<usize>,
}

/// Runs a blocking service call off the async workers.
async fn blocking<T: Send + 'static>(
    svc: &Shared,
    f: impl FnOnce(&RetrievalService) -> otf_core::Result<T> + Send + 'static,
) -> ApiResult<T> {
    let svc = svc.clone();
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn create_session(
    State(svc): State<Shared>,
    body: Result<Json<SessionRequest>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(req) = body?;
    let info = blocking(&svc, move |s| s.create_session(&req)).await?;
    Ok((StatusCode::CREATED, Json(info)))
}

async fn list_sessions(State(svc): State<Shared>) -> impl IntoResponse {
    Json(svc.list_sessions())
}

async fn session_info(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.session_info(&id)?))
}

async fn results(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    query: Result<Query<ResultsQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let Query(q) = query?;
    let view = svc.get_results(&id, q.limit)?;
    let status = if view.model_version.is_some() {
        StatusCode::OK
    } else {
        StatusCode::ACCEPTED
    };
    Ok((status, Json(view)))
}

async fn stop_session(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(&svc, move |s| s.stop_session(&id)).await?))
}

async fn health(State(svc): State<Shared>) -> impl IntoResponse {
    Json(svc.health())
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(service: Arc<RetrievalService>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session).get(list_sessions))
        .route("/v1/sessions/{id}", get(session_info))
        .route("/v1/sessions/{id}/results", get(results))
        .route("/v1/sessions/{id}/stop", post(stop_session))
        .route("/v1/health", get(health))
        .fallback(fallback)
        .with_state(service)
}

/// Serves until `shutdown` resolves, then stops every session.
pub async fn serve(
    listener: TcpListener,
    service: Arc<RetrievalService>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    tokio::task::spawn_blocking(move || service.shutdown())
        .await
        .map_err(std::io::Error::other)?;
    Ok(())
}
