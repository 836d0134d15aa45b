//! Wire types shared by every backend.
//!
//! A request serializes as
//! `{"request_id": .., "seed": .., "capability": "<name>", "payload": {..}}`
//! and a successful response as
//! `{"request_id": .., "capability": "<name>", "result": {..}}`. Failures use
//! the envelope `{"code": .., "message": .., "request_id": ..}`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{BBox, Mask};
use crate::raster::RasterImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    RewriteCaption,
    GeneratePair,
    Inpaint,
    EmbedImage,
    EmbedText,
    Itm,
    Segment,
    MllmComplete,
}

impl Capability {
    pub const ALL: [Capability; 8] = [
        Capability::RewriteCaption,
        Capability::GeneratePair,
        Capability::Inpaint,
        Capability::EmbedImage,
        Capability::EmbedText,
        Capability::Itm,
        Capability::Segment,
        Capability::MllmComplete,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Capability::RewriteCaption => "rewrite_caption",
            Capability::GeneratePair => "generate_pair",
            Capability::Inpaint => "inpaint",
            Capability::EmbedImage => "embed_image",
            Capability::EmbedText => "embed_text",
            Capability::Itm => "itm",
            Capability::Segment => "segment",
            Capability::MllmComplete => "mllm_complete",
        }
    }

    pub fn parse(name: &str) -> Option<Capability> {
        Self::ALL.into_iter().find(|c| c.as_str() == name)
    }

    /// Generative capabilities must carry a seed.
    pub fn is_generative(self) -> bool {
        matches!(
            self,
            Capability::RewriteCaption
                | Capability::GeneratePair
                | Capability::Inpaint
                | Capability::MllmComplete
        )
    }
}

impl std::fmt::Display for Capability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "capability", content = "payload", rename_all = "snake_case")]
pub enum Payload {
    RewriteCaption {
        /// The fully substituted prompt.
        prompt: String,
        caption: String,
    },
    GeneratePair {
        original: String,
        edited: String,
        replaced_object: String,
        replacement_object: String,
    },
    Inpaint {
        image: RasterImage,
        #[serde(rename = "box")]
        bbox: BBox,
        /// Aligned to `box`.
        mask: Mask,
        prompt: String,
    },
    EmbedImage {
        image: RasterImage,
    },
    EmbedText {
        text: String,
    },
    Itm {
        image: RasterImage,
        text: String,
    },
    Segment {
        image: RasterImage,
    },
    MllmComplete {
        image: RasterImage,
        prompt: String,
    },
}

impl Payload {
    pub fn capability(&self) -> Capability {
        match self {
            Payload::RewriteCaption { .. } => Capability::RewriteCaption,
            Payload::GeneratePair { .. } => Capability::GeneratePair,
            Payload::Inpaint { .. } => Capability::Inpaint,
            Payload::EmbedImage { .. } => Capability::EmbedImage,
            Payload::EmbedText { .. } => Capability::EmbedText,
            Payload::Itm { .. } => Capability::Itm,
            Payload::Segment { .. } => Capability::Segment,
            Payload::MllmComplete { .. } => Capability::MllmComplete,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub request_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub payload: Payload,
}

#[derive(Serialize)]
struct DigestView<'a> {
    seed: Option<u64>,
    #[serde(flatten)]
    payload: &'a Payload,
}

impl BackendRequest {
    pub fn capability(&self) -> Capability {
        self.payload.capability()
    }

    /// Content digest over `(capability, seed, payload)`. The request id is
    /// excluded so that identical work maps to the same transcript entry.
    pub fn digest(&self) -> String {
        let view = DigestView {
            seed: self.seed,
            payload: &self.payload,
        };
        let json = serde_json::to_vec(&view).expect("payload serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.capability().is_generative() && self.seed.is_none() {
            return Err(BackendError::new(
                ErrorCode::BadRequest,
                format!("{} requires a seed", self.capability()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRegion {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub mask: Mask,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "capability", content = "result", rename_all = "snake_case")]
pub enum Output {
    RewriteCaption {
        edited: String,
        #[serde(default)]
        replaced_object: Option<String>,
        #[serde(default)]
        replacement_object: Option<String>,
    },
    GeneratePair {
        image_a: RasterImage,
        image_b: RasterImage,
    },
    Inpaint {
        image: RasterImage,
    },
    EmbedImage {
        embedding: Vec<f64>,
    },
    EmbedText {
        embedding: Vec<f64>,
    },
    Itm {
        score: f64,
    },
    Segment {
        regions: Vec<SegmentRegion>,
    },
    MllmComplete {
        text: String,
    },
}

impl Output {
    pub fn capability(&self) -> Capability {
        match self {
            Output::RewriteCaption { .. } => Capability::RewriteCaption,
            Output::GeneratePair { .. } => Capability::GeneratePair,
            Output::Inpaint { .. } => Capability::Inpaint,
            Output::EmbedImage { .. } => Capability::EmbedImage,
            Output::EmbedText { .. } => Capability::EmbedText,
            Output::Itm { .. } => Capability::Itm,
            Output::Segment { .. } => Capability::Segment,
            Output::MllmComplete { .. } => Capability::MllmComplete,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub request_id: String,
    #[serde(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    Unsupported,
    MissingFixture,
    ProtocolViolation,
    Unavailable,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::BadRequest => "bad_request",
            ErrorCode::Unsupported => "unsupported",
            ErrorCode::MissingFixture => "missing_fixture",
            ErrorCode::ProtocolViolation => "protocol_violation",
            ErrorCode::Unavailable => "unavailable",
            ErrorCode::Internal => "internal",
        }
    }

    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::BadRequest => 400,
            ErrorCode::MissingFixture => 404,
            ErrorCode::Unsupported => 501,
            ErrorCode::ProtocolViolation => 502,
            ErrorCode::Unavailable => 503,
            ErrorCode::Internal => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {message}")]
pub struct BackendError {
    pub code: ErrorCode,
    pub message: String,
}

impl BackendError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn protocol(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::ProtocolViolation, message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub code: ErrorCode,
    pub message: String,
    pub request_id: Option<String>,
}

impl ErrorEnvelope {
    pub fn from_error(err: &BackendError, request_id: Option<String>) -> Self {
        Self {
            code: err.code,
            message: err.message.clone(),
            request_id,
        }
    }

    pub fn into_error(self) -> BackendError {
        BackendError::new(self.code, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRequest {
    pub requests: Vec<BackendRequest>,
}

/// One entry per request, in request order: either a response or an error
/// envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchItem {
    Ok(BackendResponse),
    Err(ErrorEnvelope),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResponse {
    pub responses: Vec<BatchItem>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_shape() {
        let req = BackendRequest {
            request_id: "r1".into(),
            seed: None,
            payload: Payload::EmbedText { text: "a cat".into() },
        };
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"request_id": "r1", "capability": "embed_text", "payload": {"text": "a cat"}})
        );
        let back: BackendRequest = serde_json::from_value(v).unwrap();
        assert_eq!(back, req);
    }

    #[test]
    fn digest_ignores_request_id_but_not_seed() {
        let mk = |id: &str, seed| BackendRequest {
            request_id: id.into(),
            seed,
            payload: Payload::EmbedText { text: "x".into() },
        };
        assert_eq!(mk("a", Some(1)).digest(), mk("b", Some(1)).digest());
        assert_ne!(mk("a", Some(1)).digest(), mk("a", Some(2)).digest());
    }

    #[test]
    fn response_wire_shape() {
        let resp = BackendResponse {
            request_id: "r9".into(),
            output: Output::Itm { score: 0.25 },
        };
        let v = serde_json::to_value(&resp).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"request_id": "r9", "capability": "itm", "result": {"score": 0.25}})
        );
    }

    #[test]
    fn generative_requests_need_seeds() {
        let req = BackendRequest {
            request_id: "r".into(),
            seed: None,
            payload: Payload::RewriteCaption {
                prompt: "p".into(),
                caption: "c".into(),
            },
        };
        assert_eq!(req.validate().unwrap_err().code, ErrorCode::BadRequest);
    }

    #[test]
    fn capability_names_round_trip() {
        for c in Capability::ALL {
            assert_eq!(Capability::parse(c.as_str()), Some(c));
            assert_eq!(serde_json::to_value(c).unwrap(), c.as_str());
        }
    }
}
