//! Protocol conformance checks against a live HTTP backend.
//!
//! The suite sends raw requests built from the synthetic scene world and
//! checks status codes, envelopes, request-id echo, batch ordering and
//! seeded determinism. It is backend-agnostic: the stubs and any sidecar
//! run the same checks.

use std::time::Duration;

use serde_json::{json, Value};

use super::protocol::{BackendRequest, BackendResponse, BatchResponse, Capability, ErrorEnvelope, Payload};
use crate::model::{BBox, Mask};
use crate::scene::render_pair;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Raw bodies seen during the run, for schema validation by callers.
#[derive(Debug, Default)]
pub struct Transcript {
    pub requests: Vec<Value>,
    pub responses: Vec<Value>,
    pub errors: Vec<Value>,
}

/// One request per capability, built from a rendered scene pair.
pub fn sample_requests() -> Vec<BackendRequest> {
    let (a, _) = render_pair("a red circle and a blue square", "a red circle and a green square", 5);
    let bbox = BBox::new(2, 2, 10, 10).expect("static box");
    let payloads = vec![
        Payload::RewriteCaption {
            prompt: "Here is a sentence: 'a red circle'. Please only replace one of the objects in this sentence with another object.".into(),
            caption: "a red circle".into(),
        },
        Payload::GeneratePair {
            original: "a red circle".into(),
            edited: "a blue circle".into(),
            replaced_object: "red circle".into(),
            replacement_object: "blue circle".into(),
        },
        Payload::Inpaint {
            image: a.clone(),
            bbox,
            mask: Mask::full(bbox.width(), bbox.height()),
            prompt: crate::config::REMOVAL_PROMPT.into(),
        },
        Payload::EmbedImage { image: a.clone() },
        Payload::EmbedText { text: "a red circle".into() },
        Payload::Itm {
            image: a.clone(),
            text: "red circle".into(),
        },
        Payload::Segment { image: a.clone() },
        Payload::MllmComplete {
            image: a,
            prompt: "Describe the main object in this image in a few words.".into(),
        },
    ];
    payloads
        .into_iter()
        .enumerate()
        .map(|(i, payload)| BackendRequest {
            request_id: format!("conf-{i:03}"),
            seed: payload.capability().is_generative().then_some(17),
            payload,
        })
        .collect()
}

struct Runner {
    base: String,
    http: reqwest::blocking::Client,
    checks: Vec<Check>,
    seen: Transcript,
}

impl Runner {
    fn post(&mut self, path: &str, body: Vec<u8>) -> Result<(u16, Value), String> {
        let resp = self
            .http
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let bytes = resp.bytes().map_err(|e| e.to_string())?;
        let value: Value = serde_json::from_slice(&bytes).map_err(|e| format!("non-JSON body: {e}"))?;
        if status == 200 {
            self.seen.responses.push(value.clone());
        } else {
            self.seen.errors.push(value.clone());
        }
        Ok((status, value))
    }

    fn check(&mut self, name: &str, result: Result<(), String>) {
        self.checks.push(Check {
            name: name.to_owned(),
            passed: result.is_ok(),
            detail: result.err().unwrap_or_default(),
        });
    }

    fn expect_error(&mut self, name: &str, path: &str, body: Vec<u8>, status: u16, code: &str) {
        let r = self.post(path, body).and_then(|(s, v)| {
            if s != status {
                return Err(format!("status {s}, expected {status}"));
            }
            let env: ErrorEnvelope = serde_json::from_value(v).map_err(|e| format!("bad envelope: {e}"))?;
            if env.code.as_str() != code {
                return Err(format!("code {}, expected {code}", env.code.as_str()));
            }
            Ok(())
        });
        self.check(name, r);
    }
}

fn single(r: &mut Runner, req: &BackendRequest) -> Result<BackendResponse, String> {
    let body = serde_json::to_vec(req).expect("request serializes");
    r.seen.requests.push(serde_json::from_slice(&body).expect("round trip"));
    let (status, v) = r.post(&format!("/v1/{}", req.capability()), body)?;
    if status != 200 {
        return Err(format!("status {status}: {v}"));
    }
    let resp: BackendResponse = serde_json::from_value(v).map_err(|e| format!("undecodable response: {e}"))?;
    if resp.request_id != req.request_id {
        return Err(format!("request id {} echoed as {}", req.request_id, resp.request_id));
    }
    if resp.output.capability() != req.capability() {
        return Err(format!("asked {}, answered {}", req.capability(), resp.output.capability()));
    }
    Ok(resp)
}

/// Runs every check against `base` (e.g. `http://127.0.0.1:8080`).
pub fn run_conformance(base: &str) -> (Vec<Check>, Transcript) {
    let mut r = Runner {
        base: base.trim_end_matches('/').to_owned(),
        http: reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("http client"),
        checks: Vec::new(),
        seen: Transcript::default(),
    };
    let requests = sample_requests();
    for req in &requests {
        let first = single(&mut r, req);
        let name = format!("{}: answers", req.capability());
        let res = first.as_ref().map(|_| ()).map_err(Clone::clone);
        r.check(&name, res);
        if let Ok(first) = first {
            let again = single(&mut r, req).and_then(|second| {
                if second.output == first.output {
                    Ok(())
                } else {
                    Err("same request, different result".into())
                }
            });
            r.check(&format!("{}: deterministic", req.capability()), again);
        }
    }

    let mut unseeded = serde_json::to_value(&requests[0]).expect("serializes");
    unseeded.as_object_mut().expect("object").remove("seed");
    r.expect_error(
        "generative request without seed",
        "/v1/rewrite_caption",
        serde_json::to_vec(&unseeded).expect("serializes"),
        400,
        "bad_request",
    );
    r.expect_error(
        "unknown capability",
        "/v1/teleport",
        serde_json::to_vec(&json!({"request_id": "x"})).expect("serializes"),
        400,
        "bad_request",
    );
    r.expect_error("malformed body", "/v1/itm", b"{not json".to_vec(), 400, "bad_request");
    r.expect_error(
        "payload and endpoint disagree",
        "/v1/itm",
        serde_json::to_vec(&requests[4]).expect("serializes"),
        400,
        "bad_request",
    );

    let texts: Vec<BackendRequest> = ["a red circle", "a blue square", "a green triangle"]
        .iter()
        .enumerate()
        .map(|(i, t)| BackendRequest {
            request_id: format!("batch-{i}"),
            seed: None,
            payload: Payload::EmbedText { text: (*t).into() },
        })
        .collect();
    let batch = json!({ "requests": texts });
    let res = r
        .post("/v1/batch/embed_text", serde_json::to_vec(&batch).expect("serializes"))
        .and_then(|(s, v)| {
            if s != 200 {
                return Err(format!("status {s}"));
            }
            let b: BatchResponse = serde_json::from_value(v).map_err(|e| e.to_string())?;
            let ids: Vec<String> = b
                .responses
                .iter()
                .map(|i| match i {
                    super::protocol::BatchItem::Ok(r) => r.request_id.clone(),
                    super::protocol::BatchItem::Err(e) => e.request_id.clone().unwrap_or_default(),
                })
                .collect();
            if ids == ["batch-0", "batch-1", "batch-2"] {
                Ok(())
            } else {
                Err(format!("batch order {ids:?}"))
            }
        });
    r.check("batch keeps request order", res);
    let mixed = json!({ "requests": [texts[0].clone(), requests[3].clone()] });
    r.expect_error(
        "mixed batch rejected",
        "/v1/batch/embed_text",
        serde_json::to_vec(&mixed).expect("serializes"),
        400,
        "bad_request",
    );
    debug_assert_eq!(Capability::ALL.len(), requests.len());
    (r.checks, r.seen)
}
