//! Object removal: find regions holding an object, erase it by inpainting,
//! describe it, verify the erasure, and ask which side still has it.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backend::{BackendClient, CallError};
use crate::captions::RenderedSample;
use crate::config::{PromptTemplates, ThresholdConfig, ANSWER_LEFT, ANSWER_RIGHT, REMOVAL_PROMPT};
use crate::funnel::{Counts, Quarantine, Rejection};
use crate::geometry::{crop, highlight_and_concat, rank_order};
use crate::hash::derive_seed;
use crate::model::{
    AnswerSide, BBox, DifferenceSample, ImagePair, Mask, Provenance, RegionCandidate, Role, SampleKind, Side, Turn,
};
use crate::raster::RasterImage;
use crate::similarity::{image_similarity, itm_score};

pub const STAGE_REMOVAL: &str = "object-removal";

#[derive(Debug, Clone, PartialEq)]
pub struct ExistAbsentPair {
    pub pair_id: String,
    /// Side of the source pair the original image came from.
    pub source_side: Side,
    pub original: RasterImage,
    pub erased: RasterImage,
    pub bbox: BBox,
    pub mask: Mask,
    pub description: String,
    pub object_side_after_shuffle: Option<AnswerSide>,
}

fn invalid(e: impl ToString) -> CallError {
    CallError::InvalidInput(e.to_string())
}

#[derive(Debug, Default)]
pub struct DetectOutcome {
    /// Kept regions with their cross-image sub-similarity.
    pub kept: Vec<(RegionCandidate, f64)>,
    pub dropped: Vec<(RegionCandidate, f64)>,
    pub quarantined: Vec<(RegionCandidate, CallError)>,
}

/// Segments `a` and keeps regions whose sub-images in `a` and `b` have
/// similarity below `cfg.rm_contains_sim`. Masks are retained. Fails only
/// when segmentation does.
pub fn detect_object_regions(
    a: &RasterImage,
    b: &RasterImage,
    cfg: &ThresholdConfig,
    client: &BackendClient,
) -> Result<DetectOutcome, CallError> {
    let regions = client.segment(a, cfg.seg_conf, cfg.iou)?.into_candidates(Side::A);
    let sims: Vec<_> = regions
        .into_par_iter()
        .map(|c| {
            let s = crop(a, &c.bbox)
                .and_then(|sa| crop(b, &c.bbox).map(|sb| (sa, sb)))
                .map_err(invalid)
                .and_then(|(sa, sb)| image_similarity(&sa, &sb, client));
            (c, s)
        })
        .collect();
    let mut out = DetectOutcome::default();
    for (mut c, s) in sims {
        match s {
            Ok(sim) if sim < cfg.rm_contains_sim => {
                c.difference = 1.0 - sim;
                out.kept.push((c, sim));
            }
            Ok(sim) => out.dropped.push((c, sim)),
            Err(e) => out.quarantined.push((c, e)),
        }
    }
    Ok(out)
}

/// Inpaints `mask` (placed at `bbox`) with the fixed removal prompt.
pub fn erase(
    image: &RasterImage,
    bbox: &BBox,
    mask: &Mask,
    client: &BackendClient,
    seed: u64,
) -> Result<RasterImage, CallError> {
    client.inpaint(image, bbox, mask, REMOVAL_PROMPT, seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verification {
    pub passed: bool,
    pub itm_pos: f64,
    pub itm_neg: f64,
}

/// The original sub-image must match the description (ITM > rm_itm_pos) and
/// the erased one must not (ITM < rm_itm_neg).
pub fn verify_removal(
    sub_original: &RasterImage,
    sub_erased: &RasterImage,
    description: &str,
    cfg: &ThresholdConfig,
    client: &BackendClient,
) -> Result<Verification, CallError> {
    let itm_pos = itm_score(sub_original, description, client)?;
    let itm_neg = itm_score(sub_erased, description, client)?;
    Ok(Verification {
        passed: itm_pos > cfg.rm_itm_pos && itm_neg < cfg.rm_itm_neg,
        itm_pos,
        itm_neg,
    })
}

pub fn removal_sample_id(pair_id: &str, side: Side, bbox: &BBox) -> String {
    format!("{pair_id}-rm-{}-{}", side.as_str(), bbox.slug())
}

/// Chooses the side the original goes on, red-boxes both images and builds
/// the multiple-choice sample. The chosen side is also recorded on `pair`.
pub fn build_mcq_sample<R: Rng>(
    pair: &mut ExistAbsentPair,
    captions: &crate::model::CaptionPair,
    scores: BTreeMap<String, f64>,
    cfg: &ThresholdConfig,
    prompts: &PromptTemplates,
    rng: &mut R,
) -> Result<(RenderedSample, AnswerSide), CallError> {
    let side = if rng.random_bool(0.5) {
        AnswerSide::Left
    } else {
        AnswerSide::Right
    };
    pair.object_side_after_shuffle = Some(side);
    let (left, right) = match side {
        AnswerSide::Left => (&pair.original, &pair.erased),
        AnswerSide::Right => (&pair.erased, &pair.original),
    };
    let image = highlight_and_concat(left, right, &pair.bbox, cfg.box_thickness_px, cfg.divider_px).map_err(invalid)?;
    let sample_id = removal_sample_id(&pair.pair_id, pair.source_side, &pair.bbox);
    let answer = match side {
        AnswerSide::Left => ANSWER_LEFT,
        AnswerSide::Right => ANSWER_RIGHT,
    };
    let sample = DifferenceSample {
        concat_image_ref: format!("images/{sample_id}.png"),
        sample_id,
        pair_id: pair.pair_id.clone(),
        bbox: pair.bbox,
        kind: SampleKind::ObjectRemoval,
        conversation: vec![
            Turn {
                role: Role::Human,
                text: prompts.removal_question.replace("{description}", &pair.description),
            },
            Turn {
                role: Role::Assistant,
                text: answer.to_owned(),
            },
        ],
        provenance: Provenance {
            captions: captions.clone(),
            content_caption_a: None,
            content_caption_b: None,
            difference_caption: None,
            description: Some(pair.description.clone()),
            answer_side: Some(side),
            source_side: Some(pair.source_side),
            scores,
        },
    };
    Ok((RenderedSample { sample, image }, side))
}

#[derive(Debug)]
pub struct RemovalOutcome {
    pub samples: Vec<RenderedSample>,
    pub rejections: Vec<Rejection>,
    pub quarantined: Vec<Quarantine>,
    pub items: Counts,
}

fn item_id(pair_id: &str, side: Side, bbox: &BBox) -> String {
    format!("{pair_id}/{}/{}", side.as_str(), bbox.slug())
}

fn erase_and_verify(
    pair: &ImagePair,
    side: Side,
    region: &RegionCandidate,
    contains_sim: f64,
    cfg: &ThresholdConfig,
    prompts: &PromptTemplates,
    client: &BackendClient,
) -> Result<Result<RenderedSample, Verification>, CallError> {
    let original = pair.image(side);
    let mask = region
        .mask
        .clone()
        .ok_or_else(|| CallError::InvalidOutput("segment region without mask".into()))?;
    let id = removal_sample_id(&pair.pair_id, side, &region.bbox);
    let seed = derive_seed(pair.seed, &id);
    let erased = erase(original, &region.bbox, &mask, client, seed)?;
    let prompt = prompts.removal_description.replace("{box}", &region.bbox.to_prompt_string());
    let description = client.mllm_complete(original, &prompt, seed)?;
    let sub_o = crop(original, &region.bbox).map_err(invalid)?;
    let sub_e = crop(&erased, &region.bbox).map_err(invalid)?;
    let v = verify_removal(&sub_o, &sub_e, &description, cfg, client)?;
    if !v.passed {
        return Ok(Err(v));
    }
    let mut ea = ExistAbsentPair {
        pair_id: pair.pair_id.clone(),
        source_side: side,
        original: original.clone(),
        erased,
        bbox: region.bbox,
        mask,
        description,
        object_side_after_shuffle: None,
    };
    let mut scores = BTreeMap::new();
    scores.insert("contains_sim".to_owned(), contains_sim);
    scores.insert("itm_pos".to_owned(), v.itm_pos);
    scores.insert("itm_neg".to_owned(), v.itm_neg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sample, _) = build_mcq_sample(&mut ea, &pair.captions, scores, cfg, prompts, &mut rng)?;
    Ok(Ok(sample))
}

/// Both sides of `pair` as originals, capped at `cfg.top_n` regions ranked
/// by cross-image difference. Fails only when segmentation does.
pub fn remove_objects(
    pair: &ImagePair,
    cfg: &ThresholdConfig,
    prompts: &PromptTemplates,
    client: &BackendClient,
) -> Result<RemovalOutcome, CallError> {
    let mut items = Counts::new("region");
    let mut rejections = Vec::new();
    let mut quarantined = Vec::new();
    let mut found: Vec<(Side, RegionCandidate, f64)> = Vec::new();
    for side in [Side::A, Side::B] {
        let d = detect_object_regions(pair.image(side), pair.image(side.other()), cfg, client)?;
        items.input += (d.kept.len() + d.dropped.len() + d.quarantined.len()) as u64;
        items.drop("contains_sim", d.dropped.len() as u64);
        for (c, sim) in d.dropped {
            rejections.push(Rejection::new(STAGE_REMOVAL, item_id(&pair.pair_id, side, &c.bbox), "contains_sim").score("similarity", sim));
        }
        items.quarantined += d.quarantined.len() as u64;
        for (c, e) in d.quarantined {
            quarantined.push(Quarantine::new(STAGE_REMOVAL, item_id(&pair.pair_id, side, &c.bbox), &e));
        }
        found.extend(d.kept.into_iter().map(|(c, s)| (side, c, s)));
    }
    found.sort_by(|(sa, a, _), (sb, b, _)| rank_order(a.difference, &a.bbox, b.difference, &b.bbox).then(sa.cmp(sb)));
    for (side, c, _) in found.iter().skip(cfg.top_n) {
        rejections.push(Rejection::new(STAGE_REMOVAL, item_id(&pair.pair_id, *side, &c.bbox), "not_selected").score("difference", c.difference));
    }
    items.drop("not_selected", found.len().saturating_sub(cfg.top_n) as u64);
    found.truncate(cfg.top_n);

    let results: Vec<_> = found
        .par_iter()
        .map(|(side, c, sim)| (side, c, erase_and_verify(pair, *side, c, *sim, cfg, prompts, client)))
        .collect();
    let mut samples = Vec::new();
    for (side, c, r) in results {
        let id = item_id(&pair.pair_id, *side, &c.bbox);
        match r {
            Ok(Ok(s)) => samples.push(s),
            Ok(Err(v)) => {
                items.drop("verify_fail", 1);
                rejections.push(
                    Rejection::new(STAGE_REMOVAL, id, "verify_fail")
                        .score("itm_pos", v.itm_pos)
                        .score("itm_neg", v.itm_neg),
                );
            }
            Err(e) => {
                items.quarantined += 1;
                quarantined.push(Quarantine::new(STAGE_REMOVAL, id, &e));
            }
        }
    }
    items.kept = samples.len() as u64;
    Ok(RemovalOutcome {
        samples,
        rejections,
        quarantined,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::protocol::{Output, Payload};
    use crate::backend::scene::SceneBackend;
    use crate::backend::transcript::ScriptedBackend;
    use crate::model::CaptionPair;
    use crate::scene::{render_pair, rewrite, Scene, BACKGROUND};
    use std::sync::Arc;

    fn scene_client() -> BackendClient {
        BackendClient::new(Arc::new(SceneBackend::new()))
    }

    fn scene_pair(caption: &str, seed: u64) -> ImagePair {
        let (edited, old, new) = rewrite(caption, seed).unwrap();
        let (image_a, image_b) = render_pair(caption, &edited, seed);
        ImagePair {
            pair_id: "r".into(),
            image_a,
            image_b,
            captions: CaptionPair {
                source_id: "r".into(),
                original: caption.into(),
                edited,
                replaced_object: old,
                replacement_object: new,
            },
            seed,
        }
    }

    #[test]
    fn detection_keeps_only_the_swapped_object() {
        let caption = "a red square and a blue circle";
        let pair = scene_pair(caption, 0);
        let out = detect_object_regions(&pair.image_a, &pair.image_b, &ThresholdConfig::default(), &scene_client()).unwrap();
        let truth = Scene::from_caption(caption, 0, 2).objects[0].1;
        let kept: Vec<BBox> = out.kept.iter().map(|(c, _)| c.bbox).collect();
        assert_eq!(kept, [truth]);
        assert!(out.kept[0].0.mask.is_some());
        assert_eq!(out.dropped.len(), 1);
        assert_eq!(out.dropped[0].1, 1.0);
    }

    #[test]
    fn erase_fills_with_background() {
        let pair = scene_pair("a red square and a blue circle", 1);
        let client = scene_client();
        let seg = client.segment(&pair.image_a, 0.05, 0.5).unwrap();
        let r = &seg.regions[0];
        let out = erase(&pair.image_a, &r.bbox, &r.mask, &client, 9).unwrap();
        assert_eq!(out, erase(&pair.image_a, &r.bbox, &r.mask, &client, 9).unwrap());
        for y in r.bbox.y0..r.bbox.y1 {
            for x in r.bbox.x0..r.bbox.x1 {
                assert_eq!(out.get(x, y), BACKGROUND);
            }
        }
        let empty = Mask::empty(r.bbox.width(), r.bbox.height());
        assert_eq!(erase(&pair.image_a, &r.bbox, &empty, &client, 9).unwrap(), pair.image_a);
    }

    fn scripted_verification(pos: f64, neg: f64) -> bool {
        let o = RasterImage::filled(2, 2, [1, 1, 1]).unwrap();
        let e = RasterImage::filled(2, 2, [2, 2, 2]).unwrap();
        let b = ScriptedBackend::new()
            .with(None, Payload::Itm { image: o.clone(), text: "a cat".into() }, Output::Itm { score: pos })
            .with(None, Payload::Itm { image: e.clone(), text: "a cat".into() }, Output::Itm { score: neg });
        verify_removal(&o, &e, "a cat", &ThresholdConfig::default(), &BackendClient::new(Arc::new(b)))
            .unwrap()
            .passed
    }

    #[test]
    fn verification_gates() {
        assert!(scripted_verification(0.6, 0.1));
        assert!(!scripted_verification(0.6, 0.25));
        assert!(!scripted_verification(0.35, 0.1));
    }

    fn ea_pair() -> ExistAbsentPair {
        let pair = scene_pair("a red square", 0);
        let b = Scene::from_caption("a red square", 0, 1).objects[0].1;
        ExistAbsentPair {
            pair_id: "r".into(),
            source_side: Side::A,
            original: pair.image_a.clone(),
            erased: RasterImage::filled(pair.image_a.width(), pair.image_a.height(), BACKGROUND).unwrap(),
            bbox: b,
            mask: Mask::full(b.width(), b.height()),
            description: "red square".into(),
            object_side_after_shuffle: None,
        }
    }

    #[test]
    fn mcq_answer_tracks_shuffle() {
        let mut ea = ea_pair();
        let caps = scene_pair("a red square", 0).captions;
        let cfg = ThresholdConfig::default();
        let prompts = PromptTemplates::default();
        let mut left = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let (s, side) = build_mcq_sample(&mut ea, &caps, BTreeMap::new(), &cfg, &prompts, &mut rng).unwrap();
            let want = if side == AnswerSide::Left { ANSWER_LEFT } else { ANSWER_RIGHT };
            assert_eq!(s.sample.conversation[1].text, want);
            if side == AnswerSide::Left {
                left += 1;
            }
        }
        assert!((450..=550).contains(&left), "{left}");
        let (s, _) = build_mcq_sample(&mut ea, &caps, BTreeMap::new(), &cfg, &prompts, &mut rng).unwrap();
        assert_eq!(
            s.sample.conversation[0].text,
            "which image has the object related to 'red square' within the red bounding box? A. the left image B. the right image."
        );
    }

    #[test]
    fn left_answer_means_original_on_left() {
        let mut ea = ea_pair();
        let caps = scene_pair("a red square", 0).captions;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, side) =
                build_mcq_sample(&mut ea, &caps, BTreeMap::new(), &ThresholdConfig::default(), &PromptTemplates::default(), &mut rng)
                    .unwrap();
            let w = ea.original.width();
            let left = crop(&s.image, &BBox::new(0, 0, w, ea.original.height()).unwrap()).unwrap();
            let has_object = crate::scene::describe(&left).is_some();
            assert_eq!(has_object, side == AnswerSide::Left);
        }
    }

    #[test]
    fn scene_removal_samples_pass_audit() {
        let pair = scene_pair("a red square, a green circle and a yellow triangle", 2);
        let client = scene_client();
        let cfg = ThresholdConfig::default();
        let out = remove_objects(&pair, &cfg, &PromptTemplates::default(), &client).unwrap();
        assert_eq!(out.samples.len(), 2);
        assert!(out.items.is_conserved());
        let w = pair.image_a.width() + cfg.divider_px;
        for s in &out.samples {
            let sample = &s.sample;
            let desc = sample.provenance.description.as_deref().unwrap();
            let b = sample.bbox;
            let left = crop(&s.image, &b).unwrap();
            let right = crop(&s.image, &BBox::new(b.x0 + w, b.y0, b.x1 + w, b.y1).unwrap()).unwrap();
            let (yes, no) = match sample.provenance.answer_side.unwrap() {
                AnswerSide::Left => (left, right),
                AnswerSide::Right => (right, left),
            };
            assert!(itm_score(&yes, desc, &client).unwrap() > cfg.rm_itm_pos);
            assert!(itm_score(&no, desc, &client).unwrap() < cfg.rm_itm_neg);
            assert_eq!(sample.kind, SampleKind::ObjectRemoval);
        }
    }
}
