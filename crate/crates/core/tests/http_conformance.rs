mod common;

use std::sync::Arc;

use pairdiff_core::backend::conformance::{run_conformance, sample_requests};
use pairdiff_core::backend::http::HttpBackend;
use pairdiff_core::backend::scene::SceneBackend;
use pairdiff_core::backend::transcript::{Recorder, ScriptedBackend};
use pairdiff_core::backend::{Backend, ErrorCode};

#[test]
fn scene_stub_passes_the_suite() {
    let base = common::spawn_backend(Arc::new(SceneBackend::new()));
    let (checks, seen) = run_conformance(&base);
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(checks.len() >= 20);

    let req = common::schema("backend-request");
    let resp = common::schema("backend-response");
    let err = common::schema("backend-error");
    for v in &seen.requests {
        common::assert_valid(&req, v);
    }
    for v in &seen.responses {
        if v.get("responses").is_none() {
            common::assert_valid(&resp, v);
        }
    }
    for v in &seen.errors {
        common::assert_valid(&err, v);
    }
    assert_eq!(seen.requests.len(), 16);
}

#[test]
fn http_client_matches_in_process_backend() {
    let direct = SceneBackend::with_noise(0.05);
    let base = common::spawn_backend(Arc::new(direct.clone()));
    let http = HttpBackend::new(&base).unwrap();
    for r in sample_requests() {
        assert_eq!(http.call(&r).unwrap(), direct.call(&r).unwrap(), "{}", r.capability());
    }
    let embeds: Vec<_> = sample_requests().into_iter().filter(|r| r.capability().as_str() == "embed_text").collect();
    let batched = http.call_batch(&embeds);
    assert_eq!(batched[0].as_ref().unwrap(), &direct.call(&embeds[0]).unwrap());
}

#[test]
fn scripted_stub_passes_after_recording() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let rec = Recorder::open(Arc::new(SceneBackend::new()), &path).unwrap();
    for r in sample_requests() {
        rec.call(&r).unwrap();
    }
    let base = common::spawn_backend(Arc::new(ScriptedBackend::load(&path).unwrap()));
    let (checks, _) = run_conformance(&base);
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    let http = HttpBackend::new(&base).unwrap();
    let mut unknown = sample_requests().remove(4);
    unknown.payload = pairdiff_core::backend::Payload::EmbedText { text: "never recorded".into() };
    assert_eq!(http.call(&unknown).unwrap_err().code, ErrorCode::MissingFixture);
}
