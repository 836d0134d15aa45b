//! HTTP/JSON client for the backend protocol: `POST {base}/v1/{capability}`
//! and `POST {base}/v1/batch/{capability}`.

use std::time::Duration;

use super::protocol::{
    BackendError, BackendRequest, BackendResponse, BatchItem, BatchRequest, BatchResponse,
    ErrorCode, ErrorEnvelope, Output,
};
use super::Backend;

pub struct HttpBackend {
    base: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(base: &str) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| BackendError::new(ErrorCode::Internal, e.to_string()))?;
        Ok(Self {
            base: base.trim_end_matches('/').to_owned(),
            client,
        })
    }

    fn post(&self, path: &str, body: Vec<u8>) -> Result<(u16, Vec<u8>), BackendError> {
        let resp = self
            .client
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .map_err(|e| BackendError::new(ErrorCode::Unavailable, e.to_string()))?;
        let status = resp.status().as_u16();
        let bytes = resp
            .bytes()
            .map_err(|e| BackendError::new(ErrorCode::Unavailable, e.to_string()))?;
        Ok((status, bytes.to_vec()))
    }
}

fn error_from_body(status: u16, body: &[u8]) -> BackendError {
    match serde_json::from_slice::<ErrorEnvelope>(body) {
        Ok(env) => env.into_error(),
        Err(_) => BackendError::new(
            ErrorCode::Unavailable,
            format!("http {status}: {}", String::from_utf8_lossy(body)),
        ),
    }
}

fn check_response(request: &BackendRequest, resp: BackendResponse) -> Result<Output, BackendError> {
    if resp.request_id != request.request_id {
        return Err(BackendError::protocol(format!(
            "response for {} answered request {}",
            resp.request_id, request.request_id
        )));
    }
    Ok(resp.output)
}

impl Backend for HttpBackend {
    fn call(&self, request: &BackendRequest) -> Result<Output, BackendError> {
        let body = serde_json::to_vec(request).expect("request serializes");
        let (status, bytes) = self.post(&format!("/v1/{}", request.capability()), body)?;
        if status != 200 {
            return Err(error_from_body(status, &bytes));
        }
        let resp: BackendResponse = serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::protocol(format!("malformed response: {e}")))?;
        check_response(request, resp)
    }

    fn call_batch(&self, requests: &[BackendRequest]) -> Vec<Result<Output, BackendError>> {
        let Some(first) = requests.first() else {
            return Vec::new();
        };
        let capability = first.capability();
        if requests.iter().any(|r| r.capability() != capability) {
            return requests.iter().map(|r| self.call(r)).collect();
        }
        let body = serde_json::to_vec(&BatchRequest {
            requests: requests.to_vec(),
        })
        .expect("batch serializes");
        let fail_all = |e: BackendError| requests.iter().map(|_| Err(e.clone())).collect();
        let (status, bytes) = match self.post(&format!("/v1/batch/{capability}"), body) {
            Ok(r) => r,
            Err(e) => return fail_all(e),
        };
        if status != 200 {
            return fail_all(error_from_body(status, &bytes));
        }
        let batch: BatchResponse = match serde_json::from_slice(&bytes) {
            Ok(b) => b,
            Err(e) => return fail_all(BackendError::protocol(format!("malformed batch: {e}"))),
        };
        if batch.responses.len() != requests.len() {
            return fail_all(BackendError::protocol(format!(
                "batch of {} answered with {} items",
                requests.len(),
                batch.responses.len()
            )));
        }
        requests
            .iter()
            .zip(batch.responses)
            .map(|(req, item)| match item {
                BatchItem::Ok(resp) => check_response(req, resp),
                BatchItem::Err(env) => Err(env.into_error()),
            })
            .collect()
    }
}
