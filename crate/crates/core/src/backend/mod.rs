//! Every neural capability the pipeline uses sits behind one [`Backend`]
//! trait and one wire protocol. [`BackendClient`] wraps a backend with typed
//! calls and the output checks each stage relies on.

pub mod conformance;
pub mod http;
pub mod protocol;
pub mod scene;
pub mod server;
pub mod transcript;

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use protocol::{
    BackendError, BackendRequest, BackendResponse, Capability, ErrorCode, ErrorEnvelope, Output,
    Payload, SegmentRegion,
};

use crate::geometry::suppress_by_confidence;
use crate::model::{BBox, CaptionPair, ImagePair, Mask, RegionCandidate, Side};
use crate::raster::RasterImage;
use crate::similarity::Embedding;

/// Environment variable naming the backend URI used by the CLI.
pub const BACKEND_ENV: &str = "PAIRDIFF_BACKEND";

pub trait Backend: Send + Sync {
    fn call(&self, request: &BackendRequest) -> Result<Output, BackendError>;

    /// Homogeneous batch; results are in request order.
    fn call_batch(&self, requests: &[BackendRequest]) -> Vec<Result<Output, BackendError>> {
        requests.iter().map(|r| self.call(r)).collect()
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn call(&self, request: &BackendRequest) -> Result<Output, BackendError> {
        (**self).call(request)
    }

    fn call_batch(&self, requests: &[BackendRequest]) -> Vec<Result<Output, BackendError>> {
        (**self).call_batch(requests)
    }
}

/// Resolves a backend URI:
///
/// - `stub:scene`, the synthetic-scene stub
/// - `stub:scripted:<path>`, answers from a fixture/transcript file
/// - `http://host:port`, the HTTP protocol
pub fn from_uri(uri: &str) -> Result<Arc<dyn Backend>, BackendError> {
    if uri == "stub:scene" {
        return Ok(Arc::new(scene::SceneBackend::new()));
    }
    if let Some(path) = uri.strip_prefix("stub:scripted:") {
        let scripted = transcript::ScriptedBackend::load(Path::new(path))
            .map_err(|e| BackendError::new(ErrorCode::Unavailable, e.to_string()))?;
        return Ok(Arc::new(scripted));
    }
    if uri.starts_with("http://") || uri.starts_with("https://") {
        return Ok(Arc::new(http::HttpBackend::new(uri)?));
    }
    Err(BackendError::new(
        ErrorCode::BadRequest,
        format!("unrecognized backend uri `{uri}`"),
    ))
}

/// Why a single item could not be processed. Every variant quarantines the
/// item rather than failing the run.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CallError {
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("rewrite returned the input caption unchanged")]
    NoopRewrite,
    #[error("rewrite did not report the replaced and replacement objects")]
    MissingMetadata,
    #[error("backend returned an empty response")]
    EmptyResponse,
    #[error("invalid backend output: {0}")]
    InvalidOutput(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl CallError {
    /// Stable reason code recorded in quarantine logs.
    pub fn code(&self) -> &'static str {
        match self {
            CallError::Backend(e) => match e.code {
                ErrorCode::ProtocolViolation => "protocol_violation",
                ErrorCode::MissingFixture => "missing_fixture",
                _ => "backend_failure",
            },
            CallError::NoopRewrite => "noop_rewrite",
            CallError::MissingMetadata => "missing_metadata",
            CallError::EmptyResponse => "empty_response",
            CallError::InvalidOutput(_) => "protocol_violation",
            CallError::InvalidInput(_) => "invalid_input",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentResult {
    pub regions: Vec<SegmentRegion>,
}

impl SegmentResult {
    pub fn into_candidates(self, side: Side) -> Vec<RegionCandidate> {
        self.regions
            .into_iter()
            .map(|r| RegionCandidate {
                mask: Some(r.mask),
                ..RegionCandidate::new(r.bbox, r.confidence, side)
            })
            .collect()
    }
}

/// A backend plus a run-scoped request-id sequence.
pub struct BackendClient {
    backend: Arc<dyn Backend>,
    next_id: AtomicU64,
}

impl BackendClient {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            next_id: AtomicU64::new(1),
        }
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn request(&self, seed: Option<u64>, payload: Payload) -> BackendRequest {
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        BackendRequest {
            request_id: format!("req-{n:010}"),
            seed,
            payload,
        }
    }

    pub fn call(&self, seed: Option<u64>, payload: Payload) -> Result<Output, BackendError> {
        let request = self.request(seed, payload);
        let capability = request.capability();
        let output = self.backend.call(&request)?;
        if output.capability() != capability {
            return Err(BackendError::protocol(format!(
                "requested {capability}, got {}",
                output.capability()
            )));
        }
        Ok(output)
    }

    /// Rewrites `caption` with `template` (which must contain `{caption}`).
    pub fn rewrite_caption(
        &self,
        source_id: &str,
        caption: &str,
        template: &str,
        seed: u64,
    ) -> Result<CaptionPair, CallError> {
        if caption.trim().is_empty() {
            return Err(CallError::InvalidInput("empty caption".into()));
        }
        let payload = Payload::RewriteCaption {
            prompt: template.replace("{caption}", caption),
            caption: caption.to_owned(),
        };
        let Output::RewriteCaption {
            edited,
            replaced_object,
            replacement_object,
        } = self.call(Some(seed), payload)?
        else {
            unreachable!("capability checked in call")
        };
        if edited.trim() == caption.trim() {
            return Err(CallError::NoopRewrite);
        }
        let (Some(replaced_object), Some(replacement_object)) = (replaced_object, replacement_object)
        else {
            return Err(CallError::MissingMetadata);
        };
        if replaced_object.trim().is_empty() || replacement_object.trim().is_empty() {
            return Err(CallError::MissingMetadata);
        }
        let pair = CaptionPair {
            source_id: source_id.to_owned(),
            original: caption.to_owned(),
            edited,
            replaced_object,
            replacement_object,
        };
        pair.validate()
            .map_err(|e| CallError::InvalidOutput(e.to_string()))?;
        Ok(pair)
    }

    pub fn generate_pair(
        &self,
        pair_id: &str,
        captions: &CaptionPair,
        seed: u64,
    ) -> Result<ImagePair, CallError> {
        let payload = Payload::GeneratePair {
            original: captions.original.clone(),
            edited: captions.edited.clone(),
            replaced_object: captions.replaced_object.clone(),
            replacement_object: captions.replacement_object.clone(),
        };
        let Output::GeneratePair { image_a, image_b } = self.call(Some(seed), payload)? else {
            unreachable!("capability checked in call")
        };
        if image_a.dimensions() != image_b.dimensions() {
            return Err(CallError::Backend(BackendError::protocol(format!(
                "pair images differ in size: {:?} vs {:?}",
                image_a.dimensions(),
                image_b.dimensions()
            ))));
        }
        Ok(ImagePair {
            pair_id: pair_id.to_owned(),
            image_a,
            image_b,
            captions: captions.clone(),
            seed,
        })
    }

    pub fn embed_image(&self, image: &RasterImage) -> Result<Embedding, CallError> {
        let Output::EmbedImage { embedding } = self.call(
            None,
            Payload::EmbedImage {
                image: image.clone(),
            },
        )?
        else {
            unreachable!("capability checked in call")
        };
        Embedding::new(embedding).map_err(|e| CallError::InvalidOutput(e.to_string()))
    }

    pub fn embed_text(&self, text: &str) -> Result<Embedding, CallError> {
        if text.trim().is_empty() {
            return Err(CallError::InvalidInput("empty text".into()));
        }
        let Output::EmbedText { embedding } = self.call(
            None,
            Payload::EmbedText {
                text: text.to_owned(),
            },
        )?
        else {
            unreachable!("capability checked in call")
        };
        Embedding::new(embedding).map_err(|e| CallError::InvalidOutput(e.to_string()))
    }

    pub fn itm(&self, image: &RasterImage, text: &str) -> Result<f64, CallError> {
        if text.trim().is_empty() {
            return Err(CallError::InvalidInput("empty text".into()));
        }
        let Output::Itm { score } = self.call(
            None,
            Payload::Itm {
                image: image.clone(),
                text: text.to_owned(),
            },
        )?
        else {
            unreachable!("capability checked in call")
        };
        if !(0.0..=1.0).contains(&score) {
            return Err(CallError::InvalidOutput(format!("itm score {score} outside [0, 1]")));
        }
        Ok(score)
    }

    /// Segments `image`, keeping regions with confidence above `seg_conf_thr`
    /// and suppressing overlaps above `iou_thr` by confidence.
    pub fn segment(
        &self,
        image: &RasterImage,
        seg_conf_thr: f64,
        iou_thr: f64,
    ) -> Result<SegmentResult, CallError> {
        let Output::Segment { regions } = self.call(
            None,
            Payload::Segment {
                image: image.clone(),
            },
        )?
        else {
            unreachable!("capability checked in call")
        };
        for r in &regions {
            if !(0.0..=1.0).contains(&r.confidence) {
                return Err(CallError::InvalidOutput(format!(
                    "segment confidence {} outside [0, 1]",
                    r.confidence
                )));
            }
            if !r.bbox.within(image.width(), image.height()) {
                return Err(CallError::InvalidOutput(format!(
                    "segment box {:?} outside image",
                    r.bbox
                )));
            }
            r.mask
                .fits(&r.bbox)
                .map_err(|e| CallError::InvalidOutput(e.to_string()))?;
        }
        let candidates: Vec<RegionCandidate> = regions
            .into_iter()
            .filter(|r| r.confidence > seg_conf_thr)
            .map(|r| RegionCandidate {
                mask: Some(r.mask),
                ..RegionCandidate::new(r.bbox, r.confidence, Side::A)
            })
            .collect();
        let kept = suppress_by_confidence(&candidates, iou_thr);
        Ok(SegmentResult {
            regions: kept
                .into_iter()
                .map(|c| SegmentRegion {
                    bbox: c.bbox,
                    mask: c.mask.expect("mask attached above"),
                    confidence: c.seg_confidence,
                })
                .collect(),
        })
    }

    pub fn mllm_complete(&self, image: &RasterImage, prompt: &str, seed: u64) -> Result<String, CallError> {
        if prompt.trim().is_empty() {
            return Err(CallError::InvalidInput("empty prompt".into()));
        }
        let Output::MllmComplete { text } = self.call(
            Some(seed),
            Payload::MllmComplete {
                image: image.clone(),
                prompt: prompt.to_owned(),
            },
        )?
        else {
            unreachable!("capability checked in call")
        };
        if text.trim().is_empty() {
            return Err(CallError::EmptyResponse);
        }
        Ok(text)
    }

    pub fn inpaint(
        &self,
        image: &RasterImage,
        bbox: &BBox,
        mask: &Mask,
        prompt: &str,
        seed: u64,
    ) -> Result<RasterImage, CallError> {
        mask.fits(bbox)
            .map_err(|e| CallError::InvalidInput(e.to_string()))?;
        if !bbox.within(image.width(), image.height()) {
            return Err(CallError::InvalidInput(format!("mask box {bbox:?} outside image")));
        }
        let Output::Inpaint { image: out } = self.call(
            Some(seed),
            Payload::Inpaint {
                image: image.clone(),
                bbox: *bbox,
                mask: mask.clone(),
                prompt: prompt.to_owned(),
            },
        )?
        else {
            unreachable!("capability checked in call")
        };
        if out.dimensions() != image.dimensions() {
            return Err(CallError::Backend(BackendError::protocol(format!(
                "inpaint changed size {:?} -> {:?}",
                image.dimensions(),
                out.dimensions()
            ))));
        }
        Ok(out)
    }
}
