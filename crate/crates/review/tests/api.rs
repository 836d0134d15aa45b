use std::path::PathBuf;
use std::sync::Arc;

use pairdiff_core::backend::scene::SceneBackend;
use pairdiff_core::config::RunConfig;
use pairdiff_core::dataset::Message;
use pairdiff_core::model::{BBox, SampleKind};
use pairdiff_core::pipeline::{run, RunOptions};
use pairdiff_core::scene::synthetic_captions;
use pairdiff_core::synthesis::CaptionSource;
use pairdiff_review::{AnnotationVote, Catalogue, Metric, ReviewService, SampleEntry, Score, VoteStore};
use reqwest::blocking::Client;
use serde_json::{json, Value};

fn schema(name: &str) -> jsonschema::Validator {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../core/schemas/{name}.schema.json"));
    let value: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&value).unwrap()
}

fn valid(name: &str, v: &Value) {
    let s = schema(name);
    let errors: Vec<String> = s.iter_errors(v).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}\n{v}");
}

fn spawn(svc: ReviewService) -> String {
    let svc = Arc::new(svc);
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let l = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(l.local_addr().unwrap()).unwrap();
            pairdiff_review::serve(l, svc).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

fn synthetic_catalogue(n: usize) -> Catalogue {
    let samples = (0..n)
        .map(|i| SampleEntry {
            sample_id: format!("s{i:04}"),
            kind: SampleKind::ObjectReplacement,
            image: format!("images/s{i:04}.png"),
            bbox: BBox::new(0, 0, 4, 4).unwrap(),
            conversations: vec![
                Message {
                    from: "human".into(),
                    value: "<image>\nq".into(),
                },
                Message {
                    from: "gpt".into(),
                    value: "a".into(),
                },
            ],
            provenance: json!({}),
        })
        .collect();
    Catalogue::new(PathBuf::from("/nonexistent"), samples)
}

fn post(c: &Client, base: &str, body: &Value) -> (u16, Value) {
    let r = c.post(format!("{base}/api/votes")).json(body).send().unwrap();
    (r.status().as_u16(), r.json().unwrap())
}

#[test]
fn api_over_an_emitted_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let src = CaptionSource::from_pairs(synthetic_captions(12, 5)).unwrap();
    run(dir.path(), &RunConfig::default(), &src, Arc::new(SceneBackend::new()), &RunOptions::default()).unwrap();
    let cat = Catalogue::from_dataset(&dir.path().join("dataset")).unwrap();
    let n = cat.len() as u64;
    assert!(n >= 2);
    let store_path = dir.path().join("votes.jsonl");
    let base = spawn(ReviewService::new(
        cat,
        ["ann".to_string(), "bob".to_string()],
        VoteStore::open(&store_path).unwrap(),
    ));
    let c = Client::new();

    let r = c.get(format!("{base}/api/samples/next?annotator=ann")).send().unwrap();
    assert_eq!(r.status(), 200);
    let next: Value = r.json().unwrap();
    valid("review-next", &next);
    assert_eq!(next["remaining"], n);
    let id = next["sample_id"].as_str().unwrap().to_owned();

    let view: Value = c.get(format!("{base}/api/samples/{id}?annotator=ann")).send().unwrap().json().unwrap();
    valid("review-sample", &view);
    assert_eq!(view["votes"], json!({}));
    let img = c.get(format!("{base}{}", view["image_url"].as_str().unwrap())).send().unwrap();
    assert_eq!(img.status(), 200);
    let png = pairdiff_core::raster::RasterImage::from_encoded(&img.bytes().unwrap()).unwrap();
    assert!(png.width() > 20);

    for (m, s) in [("bbox_difference", "high"), ("content_caption_accuracy", "medium")] {
        let body = json!({"sample_id": id, "annotator_id": "ann", "metric": m, "score": s});
        valid("review-vote", &body);
        let (st, stored) = post(&c, &base, &body);
        assert_eq!(st, 200);
        valid("review-vote", &stored);
        assert!(stored["timestamp"].is_u64());
    }
    // Two of three metrics: still this annotator's next sample.
    let again: Value = c.get(format!("{base}/api/samples/next?annotator=ann")).send().unwrap().json().unwrap();
    assert_eq!(again["sample_id"], id.as_str());
    let body = json!({"sample_id": id, "annotator_id": "ann", "metric": "difference_caption_accuracy", "score": "low", "timestamp": 5});
    assert_eq!(post(&c, &base, &body).0, 200);
    let moved: Value = c.get(format!("{base}/api/samples/next?annotator=ann")).send().unwrap().json().unwrap();
    assert_ne!(moved["sample_id"], id.as_str());
    assert_eq!(moved["remaining"], n - 1);
    let bob: Value = c.get(format!("{base}/api/samples/next?annotator=bob")).send().unwrap().json().unwrap();
    assert_eq!(bob["remaining"], n);

    let view: Value = c.get(format!("{base}/api/samples/{id}?annotator=ann")).send().unwrap().json().unwrap();
    assert_eq!(
        view["votes"],
        json!({"bbox_difference": "high", "content_caption_accuracy": "medium", "difference_caption_accuracy": "low"})
    );
    // Resubmission overwrites.
    let body = json!({"sample_id": id, "annotator_id": "ann", "metric": "bbox_difference", "score": "low"});
    assert_eq!(post(&c, &base, &body).0, 200);
    let report: Value = c.get(format!("{base}/api/report")).send().unwrap().json().unwrap();
    valid("review-report", &report);
    assert_eq!(report["votes"], 3);
    assert_eq!(report["samples"], n);
    assert_eq!(report["metrics"]["bbox_difference"]["counts"]["low"], 1);
    assert_eq!(report["metrics"]["bbox_difference"]["percent"]["low"], 100.0);

    let reopened = VoteStore::open(&store_path).unwrap();
    assert_eq!(reopened.len(), 3);
    assert_eq!(reopened.votes_of(&id, "ann")[&Metric::BboxDifference], Score::Low);

    // Errors.
    let err = |r: reqwest::blocking::Response, status: u16| {
        assert_eq!(r.status().as_u16(), status);
        let v: Value = r.json().unwrap();
        valid("review-error", &v);
    };
    err(c.get(format!("{base}/api/samples/next?annotator=mallory")).send().unwrap(), 403);
    err(c.get(format!("{base}/api/samples/next")).send().unwrap(), 400);
    err(c.get(format!("{base}/api/samples/nope")).send().unwrap(), 404);
    err(c.get(format!("{base}/api/samples/nope/image")).send().unwrap(), 404);
    err(c.get(format!("{base}/api/samples/{id}?annotator=mallory")).send().unwrap(), 403);
    let send = |body: &str| {
        c.post(format!("{base}/api/votes"))
            .header("content-type", "application/json")
            .body(body.to_owned())
            .send()
            .unwrap()
    };
    err(send("{not json"), 400);
    err(send(&json!({"sample_id": id, "annotator_id": "ann", "metric": "vibes", "score": "high"}).to_string()), 400);
    err(send(&json!({"sample_id": id, "annotator_id": "ann", "metric": "bbox_difference", "score": "great"}).to_string()), 400);
    err(send(&json!({"sample_id": id, "annotator_id": "ann", "metric": "bbox_difference"}).to_string()), 400);
    err(send(&json!({"sample_id": id, "annotator_id": "mallory", "metric": "bbox_difference", "score": "high"}).to_string()), 403);
    err(send(&json!({"sample_id": "nope", "annotator_id": "ann", "metric": "bbox_difference", "score": "high"}).to_string()), 404);
    assert_eq!(VoteStore::open(&store_path).unwrap().len(), 3);
}

#[test]
fn finished_annotator_gets_no_content() {
    let base = spawn(ReviewService::new(synthetic_catalogue(1), ["a".to_string()], VoteStore::in_memory()));
    let c = Client::new();
    for m in Metric::ALL {
        post(&c, &base, &json!({"sample_id": "s0000", "annotator_id": "a", "metric": m, "score": "high"}));
    }
    let r = c.get(format!("{base}/api/samples/next?annotator=a")).send().unwrap();
    assert_eq!(r.status(), 204);
    assert!(r.bytes().unwrap().is_empty());
}

fn oracle_resolution(votes: &[&str]) -> &'static str {
    for s in ["high", "medium", "low"] {
        if votes.iter().filter(|v| **v == s).count() * 2 > votes.len() {
            return s;
        }
    }
    "unresolved"
}

#[test]
fn all_three_vote_combinations() {
    let scores = ["high", "medium", "low"];
    let mut combos: Vec<[&str; 3]> = Vec::new();
    for a in scores {
        for b in scores {
            for c in scores {
                combos.push([a, b, c]);
            }
        }
    }
    assert_eq!(combos.len(), 27);
    let people = ["p1", "p2", "p3"].map(String::from);
    let base = spawn(ReviewService::new(synthetic_catalogue(27), people.clone(), VoteStore::in_memory()));
    let c = Client::new();
    let mut want = std::collections::BTreeMap::<&str, u64>::new();
    for (i, combo) in combos.iter().enumerate() {
        for (p, s) in people.iter().zip(combo) {
            let (st, _) = post(&c, &base, &json!({"sample_id": format!("s{i:04}"), "annotator_id": p, "metric": "bbox_difference", "score": s}));
            assert_eq!(st, 200);
        }
        *want.entry(oracle_resolution(combo)).or_default() += 1;
    }
    let report: Value = c.get(format!("{base}/api/report")).send().unwrap().json().unwrap();
    valid("review-report", &report);
    let m = &report["metrics"]["bbox_difference"];
    for bucket in ["high", "medium", "low", "unresolved"] {
        assert_eq!(m["counts"][bucket], want.get(bucket).copied().unwrap_or(0), "{bucket}");
    }
    // Each score wins 1 unanimous + 6 two-to-one combinations; 6 are all distinct.
    assert_eq!(want["high"], 7);
    assert_eq!(want["unresolved"], 6);
    let sum: f64 = ["high", "medium", "low", "unresolved"].iter().map(|b| m["percent"][b].as_f64().unwrap()).sum();
    assert!((sum - 100.0).abs() < 1e-9);
    for (i, combo) in combos.iter().enumerate() {
        let scored: Vec<Score> = combo.iter().map(|s| serde_json::from_value(json!(s)).unwrap()).collect();
        let r = pairdiff_review::resolve(&scored).unwrap();
        let got = match r {
            pairdiff_review::Resolution::Majority(s) => serde_json::to_value(s).unwrap().as_str().unwrap().to_owned(),
            pairdiff_review::Resolution::Unresolved => "unresolved".into(),
        };
        assert_eq!(got, oracle_resolution(combo), "combo {i}: {combo:?}");
    }
}

#[test]
fn concurrent_resubmissions_leave_one_live_vote() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("votes.jsonl");
    let base = spawn(ReviewService::new(synthetic_catalogue(2), ["a".to_string()], VoteStore::open(&path).unwrap()));
    let handles: Vec<_> = (0..24)
        .map(|i| {
            let base = base.clone();
            std::thread::spawn(move || {
                let s = ["high", "medium", "low"][i % 3];
                post(&Client::new(), &base, &json!({"sample_id": "s0001", "annotator_id": "a", "metric": "bbox_difference", "score": s}))
            })
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap().0, 200);
    }
    let report: Value = Client::new().get(format!("{base}/api/report")).send().unwrap().json().unwrap();
    assert_eq!(report["votes"], 1);
    let last: AnnotationVote = serde_json::from_str(std::fs::read_to_string(&path).unwrap().lines().last().unwrap()).unwrap();
    let store = VoteStore::open(&path).unwrap();
    assert_eq!(store.len(), 1);
    assert_eq!(store.votes_of("s0001", "a")[&Metric::BboxDifference], last.score);
}
