use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pairdiff_core::dataset::{load_dataset, LoadError, Message};
use pairdiff_core::model::{BBox, SampleKind};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::report::{build_report, Report};
use crate::votes::{AnnotationVote, Metric, Score, VoteStore};

/// One reviewable sample: the concatenated image and what annotators judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub sample_id: String,
    pub kind: SampleKind,
    /// Relative to the catalogue's image root.
    pub image: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub conversations: Vec<Message>,
    pub provenance: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleView {
    pub sample_id: String,
    pub kind: SampleKind,
    pub image_url: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub conversations: Vec<Message>,
    pub provenance: Value,
    pub votes: BTreeMap<Metric, Score>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextSample {
    pub sample_id: String,
    /// Samples still lacking this annotator's full vote triple, this one
    /// included.
    pub remaining: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("dataset line {0} has no provenance")]
    MissingProvenance(String),
    #[error("vote store: {0}")]
    Store(#[from] std::io::Error),
}

pub struct Catalogue {
    pub image_root: PathBuf,
    order: Vec<SampleEntry>,
    index: HashMap<String, usize>,
}

impl Catalogue {
    pub fn new(image_root: PathBuf, samples: Vec<SampleEntry>) -> Self {
        let index = samples.iter().enumerate().map(|(i, s)| (s.sample_id.clone(), i)).collect();
        Self {
            image_root,
            order: samples,
            index,
        }
    }

    /// Reads an emitted dataset directory (digests verified).
    pub fn from_dataset(root: &Path) -> Result<Self, ReviewError> {
        let d = load_dataset(root)?;
        let prov: HashMap<&str, _> = d.provenance.iter().map(|p| (p.id.as_str(), p)).collect();
        let mut samples = Vec::with_capacity(d.lines.len());
        for line in &d.lines {
            let p = prov
                .get(line.id.as_str())
                .ok_or_else(|| ReviewError::MissingProvenance(line.id.clone()))?;
            samples.push(SampleEntry {
                sample_id: line.id.clone(),
                kind: p.kind,
                image: line.image.clone(),
                bbox: p.bbox,
                conversations: line.conversations.clone(),
                provenance: serde_json::to_value(&p.provenance).expect("provenance serializes"),
            });
        }
        Ok(Self::new(d.root.clone(), samples))
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SampleEntry> {
        self.index.get(id).map(|&i| &self.order[i])
    }

    pub fn samples(&self) -> &[SampleEntry] {
        &self.order
    }
}

pub struct ReviewService {
    pub catalogue: Catalogue,
    pub annotators: BTreeSet<String>,
    pub store: VoteStore,
}

impl ReviewService {
    pub fn new(catalogue: Catalogue, annotators: impl IntoIterator<Item = String>, store: VoteStore) -> Self {
        Self {
            catalogue,
            annotators: annotators.into_iter().collect(),
            store,
        }
    }

    pub fn next_for(&self, annotator: &str) -> Option<NextSample> {
        let pending: Vec<&SampleEntry> = self
            .catalogue
            .samples()
            .iter()
            .filter(|s| self.store.votes_of(&s.sample_id, annotator).len() < Metric::ALL.len())
            .collect();
        pending.first().map(|s| NextSample {
            sample_id: s.sample_id.clone(),
            remaining: pending.len() as u64,
        })
    }

    pub fn view(&self, id: &str, annotator: Option<&str>) -> Option<SampleView> {
        let s = self.catalogue.get(id)?;
        Some(SampleView {
            sample_id: s.sample_id.clone(),
            kind: s.kind,
            image_url: format!("/api/samples/{}/image", s.sample_id),
            bbox: s.bbox,
            conversations: s.conversations.clone(),
            provenance: s.provenance.clone(),
            votes: annotator.map(|a| self.store.votes_of(id, a)).unwrap_or_default(),
        })
    }

    pub fn report(&self) -> Report {
        let annotators: Vec<String> = self.annotators.iter().cloned().collect();
        build_report(self.catalogue.len() as u64, &annotators, &self.store.live())
    }

    /// Validates and stores one vote, stamping it when no timestamp is given.
    pub fn submit(&self, mut vote: AnnotationVote) -> Result<AnnotationVote, ApiError> {
        if !self.annotators.contains(&vote.annotator_id) {
            return Err(ApiError::forbidden(&vote.annotator_id));
        }
        if self.catalogue.get(&vote.sample_id).is_none() {
            return Err(ApiError::not_found(&vote.sample_id));
        }
        if vote.timestamp.is_none() {
            let ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
            vote.timestamp = Some(ms);
        }
        self.store.put(vote.clone()).map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: format!("vote not persisted: {e}"),
        })?;
        Ok(vote)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn forbidden(who: &str) -> Self {
        Self {
            status: StatusCode::FORBIDDEN,
            message: format!("unknown annotator {who:?}"),
        }
    }

    fn not_found(id: &str) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: format!("unknown sample {id:?}"),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

#[derive(Debug, Deserialize)]
struct AnnotatorQuery {
    annotator: Option<String>,
}

type Shared = Arc<ReviewService>;

fn known(svc: &ReviewService, q: &AnnotatorQuery) -> Result<Option<String>, ApiError> {
    match &q.annotator {
        Some(a) if !svc.annotators.contains(a) => Err(ApiError::forbidden(a)),
        other => Ok(other.clone()),
    }
}

async fn next(State(svc): State<Shared>, Query(q): Query<AnnotatorQuery>) -> Result<Response, ApiError> {
    let who = known(&svc, &q)?.ok_or_else(|| ApiError::bad("annotator query parameter is required"))?;
    Ok(match svc.next_for(&who) {
        Some(n) => Json(n).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn sample(
    State(svc): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<AnnotatorQuery>,
) -> Result<Json<SampleView>, ApiError> {
    let who = known(&svc, &q)?;
    svc.view(&id, who.as_deref()).map(Json).ok_or_else(|| ApiError::not_found(&id))
}

async fn image(State(svc): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let s = svc.catalogue.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let path = svc.catalogue.image_root.join(&s.image);
    let bytes = tokio::fs::read(&path).await.map_err(|e| ApiError {
        status: StatusCode::NOT_FOUND,
        message: format!("image for {id:?}: {e}"),
    })?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn vote(State(svc): State<Shared>, body: Bytes) -> Result<Json<AnnotationVote>, ApiError> {
    let v: AnnotationVote = serde_json::from_slice(&body).map_err(|e| ApiError::bad(format!("malformed vote: {e}")))?;
    let svc = svc.clone();
    // The store fsyncs; keep that off the async workers.
    tokio::task::spawn_blocking(move || svc.submit(v))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        })?
        .map(Json)
}

async fn report(State(svc): State<Shared>) -> Json<Report> {
    Json(svc.report())
}

pub fn router(svc: Shared) -> Router {
    Router::new()
        .route("/api/samples/next", get(next))
        .route("/api/samples/{id}", get(sample))
        .route("/api/samples/{id}/image", get(image))
        .route("/api/votes", post(vote))
        .route("/api/report", get(report))
        .with_state(svc)
}

pub async fn serve(listener: tokio::net::TcpListener, svc: Shared) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), samples = svc.catalogue.len(), "review service up");
    axum::serve(listener, router(svc)).await
}
