//! Serves any [`Backend`] over the HTTP protocol. Used to expose the stubs
//! as a reference implementation and to test the HTTP client.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};

use super::protocol::{
    BackendError, BackendRequest, BackendResponse, BatchItem, BatchRequest, BatchResponse,
    Capability, ErrorCode, ErrorEnvelope,
};
use super::Backend;

#[derive(Clone)]
struct AppState {
    backend: Arc<dyn Backend>,
    max_batch: usize,
}

fn error_response(err: &BackendError, request_id: Option<String>) -> Response {
    let status = StatusCode::from_u16(err.code.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, Json(ErrorEnvelope::from_error(err, request_id))).into_response()
}

fn bad_request(message: String) -> BackendError {
    BackendError::new(ErrorCode::BadRequest, message)
}

fn parse_capability(name: &str) -> Result<Capability, BackendError> {
    Capability::parse(name).ok_or_else(|| bad_request(format!("unknown capability `{name}`")))
}

async fn single(
    State(state): State<AppState>,
    Path(name): Path<String>,
    body: Bytes,
) -> Response {
    let capability = match parse_capability(&name) {
        Ok(c) => c,
        Err(e) => return error_response(&e, None),
    };
    let request: BackendRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(&bad_request(format!("malformed request: {e}")), None),
    };
    let request_id = request.request_id.clone();
    if request.capability() != capability {
        let e = bad_request(format!(
            "payload is {} but endpoint is {capability}",
            request.capability()
        ));
        return error_response(&e, Some(request_id));
    }
    if let Err(e) = request.validate() {
        return error_response(&e, Some(request_id));
    }
    let backend = state.backend.clone();
    let outcome = tokio::task::spawn_blocking(move || backend.call(&request))
        .await
        .unwrap_or_else(|e| Err(BackendError::new(ErrorCode::Internal, e.to_string())));
    match outcome {
        Ok(output) => Json(BackendResponse { request_id, output }).into_response(),
        Err(e) => error_response(&e, Some(request_id)),
    }
}

async fn batch(
    State(state): State<AppState>,
    Path(name): Path<String>,
    body: Bytes,
) -> Response {
    let capability = match parse_capability(&name) {
        Ok(c) => c,
        Err(e) => return error_response(&e, None),
    };
    let batch: BatchRequest = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error_response(&bad_request(format!("malformed batch: {e}")), None),
    };
    if batch.requests.len() > state.max_batch {
        let e = bad_request(format!(
            "batch of {} exceeds limit {}",
            batch.requests.len(),
            state.max_batch
        ));
        return error_response(&e, None);
    }
    if batch.requests.iter().any(|r| r.capability() != capability) {
        return error_response(&bad_request("batch must be homogeneous".into()), None);
    }
    let backend = state.backend.clone();
    let requests = batch.requests;
    let responses = tokio::task::spawn_blocking(move || {
        requests
            .into_iter()
            .map(|req| match req.validate().and_then(|_| backend.call(&req)) {
                Ok(output) => BatchItem::Ok(BackendResponse {
                    request_id: req.request_id,
                    output,
                }),
                Err(e) => BatchItem::Err(ErrorEnvelope::from_error(&e, Some(req.request_id))),
            })
            .collect::<Vec<_>>()
    })
    .await;
    match responses {
        Ok(responses) => Json(BatchResponse { responses }).into_response(),
        Err(e) => error_response(&BackendError::new(ErrorCode::Internal, e.to_string()), None),
    }
}

pub fn router(backend: Arc<dyn Backend>, max_batch: usize) -> Router {
    Router::new()
        .route("/v1/batch/{capability}", post(batch))
        .route("/v1/{capability}", post(single))
        .with_state(AppState { backend, max_batch })
}

pub async fn serve(
    listener: tokio::net::TcpListener,
    backend: Arc<dyn Backend>,
    max_batch: usize,
) -> std::io::Result<()> {
    axum::serve(listener, router(backend, max_batch)).await
}
