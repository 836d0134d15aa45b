//! Difference captions: label the top regions on each side, gate the labels,
//! then caption the difference on the red-boxed concatenation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::areas::{DifferenceAreas, ScoredRegion};
use crate::backend::{BackendClient, CallError};
use crate::config::{PromptTemplates, ThresholdConfig};
use crate::funnel::{Counts, Quarantine, Rejection};
use crate::geometry::{crop, highlight_and_concat, rank_order};
use crate::hash::derive_seed;
use crate::model::{BBox, DifferenceSample, ImagePair, Provenance, Role, SampleKind, Side, Turn};
use crate::raster::RasterImage;
use crate::similarity::{caption_similarity_gate, itm_score};

pub const STAGE_CAPTIONS: &str = "diff-captions";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionLabel {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub caption_a: String,
    pub caption_b: String,
    pub citm_a: f64,
    pub citm_b: f64,
    /// Absent when a CITM failure stopped evaluation before the CS gate.
    pub cs: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRejection {
    CitmFail { side: Side },
    CsFail,
}

impl LabelRejection {
    pub fn reason(&self) -> &'static str {
        match self {
            LabelRejection::CitmFail { .. } => "citm_fail",
            LabelRejection::CsFail => "cs_fail",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelOutcome {
    Accepted(RegionLabel),
    Rejected(LabelRejection, RegionLabel),
}

/// The `n` regions of largest difference, in rank order.
pub fn select_regions(areas: &DifferenceAreas, n: usize) -> Vec<ScoredRegion> {
    let mut regions = areas.regions.clone();
    regions.sort_by(|a, b| rank_order(a.difference, &a.bbox, b.difference, &b.bbox));
    regions.truncate(n);
    regions
}

fn region_seed(pair: &ImagePair, bbox: &BBox, tag: &str) -> u64 {
    derive_seed(pair.seed, &format!("{}/{tag}", bbox.slug()))
}

fn invalid(e: impl ToString) -> CallError {
    CallError::InvalidInput(e.to_string())
}

/// Captions the region on each side and applies both gates: each caption
/// must match its sub-image (ITM > citm, A checked first), and the two
/// captions must differ (cosine < cs).
pub fn label_region(
    pair: &ImagePair,
    bbox: &BBox,
    cfg: &ThresholdConfig,
    prompts: &PromptTemplates,
    client: &BackendClient,
) -> Result<LabelOutcome, CallError> {
    let sub_a = crop(&pair.image_a, bbox).map_err(invalid)?;
    let sub_b = crop(&pair.image_b, bbox).map_err(invalid)?;
    let caption_a = client.mllm_complete(&sub_a, &prompts.region_caption, region_seed(pair, bbox, "a"))?;
    let caption_b = client.mllm_complete(&sub_b, &prompts.region_caption, region_seed(pair, bbox, "b"))?;
    let citm_a = itm_score(&sub_a, &caption_a, client)?;
    let citm_b = itm_score(&sub_b, &caption_b, client)?;
    let mut label = RegionLabel {
        bbox: *bbox,
        caption_a,
        caption_b,
        citm_a,
        citm_b,
        cs: None,
    };
    if citm_a <= cfg.citm {
        return Ok(LabelOutcome::Rejected(LabelRejection::CitmFail { side: Side::A }, label));
    }
    if citm_b <= cfg.citm {
        return Ok(LabelOutcome::Rejected(LabelRejection::CitmFail { side: Side::B }, label));
    }
    let (different, cs) = caption_similarity_gate(&label.caption_a, &label.caption_b, cfg.cs, client)?;
    label.cs = Some(cs);
    if different {
        Ok(LabelOutcome::Accepted(label))
    } else {
        Ok(LabelOutcome::Rejected(LabelRejection::CsFail, label))
    }
}

pub fn render_difference_prompt(template: &str, label: &RegionLabel) -> String {
    template
        .replace("{caption_a}", &label.caption_a)
        .replace("{caption_b}", &label.caption_b)
}

/// Red-boxes both images, joins them and asks for the difference. Returns
/// the caption and the image it was asked about.
pub fn difference_caption(
    pair: &ImagePair,
    label: &RegionLabel,
    cfg: &ThresholdConfig,
    prompts: &PromptTemplates,
    client: &BackendClient,
) -> Result<(String, RasterImage), CallError> {
    let concat = highlight_and_concat(
        &pair.image_a,
        &pair.image_b,
        &label.bbox,
        cfg.box_thickness_px,
        cfg.divider_px,
    )
    .map_err(invalid)?;
    let prompt = render_difference_prompt(&prompts.difference_caption, label);
    let text = client.mllm_complete(&concat, &prompt, region_seed(pair, &label.bbox, "diff"))?;
    Ok((text, concat))
}

pub fn replacement_sample_id(pair_id: &str, bbox: &BBox) -> String {
    format!("{pair_id}-rep-{}", bbox.slug())
}

pub fn build_sample(
    pair: &ImagePair,
    region: &ScoredRegion,
    label: &RegionLabel,
    diff_caption: &str,
    prompts: &PromptTemplates,
) -> DifferenceSample {
    let sample_id = replacement_sample_id(&pair.pair_id, &label.bbox);
    let q = &prompts.replacement_questions;
    let question = &q[(derive_seed(pair.seed, &sample_id) % q.len() as u64) as usize];
    let mut scores = BTreeMap::new();
    scores.insert("itm".to_owned(), region.itm);
    scores.insert("difference".to_owned(), region.difference);
    scores.insert("citm_a".to_owned(), label.citm_a);
    scores.insert("citm_b".to_owned(), label.citm_b);
    if let Some(cs) = label.cs {
        scores.insert("cs".to_owned(), cs);
    }
    DifferenceSample {
        concat_image_ref: format!("images/{sample_id}.png"),
        sample_id,
        pair_id: pair.pair_id.clone(),
        bbox: label.bbox,
        kind: SampleKind::ObjectReplacement,
        conversation: vec![
            Turn {
                role: Role::Human,
                text: question.clone(),
            },
            Turn {
                role: Role::Assistant,
                text: diff_caption.to_owned(),
            },
        ],
        provenance: Provenance {
            captions: pair.captions.clone(),
            content_caption_a: Some(label.caption_a.clone()),
            content_caption_b: Some(label.caption_b.clone()),
            difference_caption: Some(diff_caption.to_owned()),
            description: None,
            answer_side: None,
            source_side: None,
            scores,
        },
    }
}

/// A sample together with the image its conversation is about.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSample {
    pub sample: DifferenceSample,
    pub image: RasterImage,
}

#[derive(Debug)]
pub struct CaptionsOutcome {
    pub samples: Vec<RenderedSample>,
    pub rejections: Vec<Rejection>,
    pub quarantined: Vec<Quarantine>,
    /// Region-level accounting; `in` is every region the areas stage kept.
    pub items: Counts,
}

fn item_id(pair: &ImagePair, bbox: &BBox) -> String {
    format!("{}/{}", pair.pair_id, bbox.slug())
}

/// Runs both caption stages over one pair's regions.
pub fn caption_pair(
    pair: &ImagePair,
    areas: &DifferenceAreas,
    cfg: &ThresholdConfig,
    prompts: &PromptTemplates,
    client: &BackendClient,
) -> CaptionsOutcome {
    let mut items = Counts::new("region");
    items.input = areas.regions.len() as u64;
    let selected = select_regions(areas, cfg.top_n);
    items.drop("not_selected", (areas.regions.len() - selected.len()) as u64);
    let mut rejections = Vec::new();
    let mut ranked: Vec<&ScoredRegion> = areas.regions.iter().collect();
    ranked.sort_by(|a, b| rank_order(a.difference, &a.bbox, b.difference, &b.bbox));
    for r in ranked.iter().skip(selected.len()) {
        rejections.push(Rejection::new(STAGE_CAPTIONS, item_id(pair, &r.bbox), "not_selected").score("difference", r.difference));
    }

    let results: Vec<_> = selected
        .par_iter()
        .map(|region| {
            let outcome = label_region(pair, &region.bbox, cfg, prompts, client).and_then(|l| match l {
                LabelOutcome::Accepted(label) => {
                    let (text, image) = difference_caption(pair, &label, cfg, prompts, client)?;
                    let sample = build_sample(pair, region, &label, &text, prompts);
                    Ok(Ok(RenderedSample { sample, image }))
                }
                LabelOutcome::Rejected(why, label) => Ok(Err((why, label))),
            });
            (region, outcome)
        })
        .collect();

    let mut samples = Vec::new();
    let mut quarantined = Vec::new();
    for (region, r) in results {
        match r {
            Ok(Ok(s)) => samples.push(s),
            Ok(Err((why, label))) => {
                items.drop(why.reason(), 1);
                let mut rej = Rejection::new(STAGE_CAPTIONS, item_id(pair, &region.bbox), why.reason())
                    .score("citm_a", label.citm_a)
                    .score("citm_b", label.citm_b);
                if let Some(cs) = label.cs {
                    rej = rej.score("cs", cs);
                }
                rejections.push(rej);
            }
            Err(e) => {
                items.quarantined += 1;
                quarantined.push(Quarantine::new(STAGE_CAPTIONS, item_id(pair, &region.bbox), &e));
            }
        }
    }
    items.kept = samples.len() as u64;
    CaptionsOutcome {
        samples,
        rejections,
        quarantined,
        items,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::areas::AreaStageCounts;
    use crate::backend::protocol::{Output, Payload};
    use crate::backend::scene::SceneBackend;
    use crate::backend::transcript::ScriptedBackend;
    use crate::model::CaptionPair;
    use std::sync::Arc;

    fn region(x: u32, diff: f64) -> ScoredRegion {
        ScoredRegion {
            bbox: BBox::new(x, 0, x + 4, 4).unwrap(),
            side: Side::A,
            seg_confidence: 0.9,
            itm: 0.5,
            difference: diff,
        }
    }

    fn areas(regions: Vec<ScoredRegion>) -> DifferenceAreas {
        DifferenceAreas {
            pair_id: "p".into(),
            regions,
            stage_counts: AreaStageCounts::default(),
        }
    }

    #[test]
    fn select_takes_largest_differences() {
        let a = areas((0..7).map(|i| region(i * 4, [0.3, 0.9, 0.1, 0.5, 0.7, 0.2, 0.8][i as usize])).collect());
        let got: Vec<f64> = select_regions(&a, 5).iter().map(|r| r.difference).collect();
        assert_eq!(got, [0.9, 0.8, 0.7, 0.5, 0.3]);
        let small = areas(vec![region(0, 0.1), region(4, 0.2), region(8, 0.3)]);
        assert_eq!(select_regions(&small, 5).len(), 3);
    }

    #[test]
    fn select_breaks_ties_by_geometry() {
        let mut wide = region(0, 0.5);
        wide.bbox = BBox::new(0, 0, 8, 4).unwrap();
        let a = areas(vec![wide.clone(), region(12, 0.5), region(8, 0.5)]);
        let got: Vec<u32> = select_regions(&a, 3).iter().map(|r| r.bbox.x0).collect();
        assert_eq!(got, [8, 12, 0]);
    }

    fn fixture_pair() -> ImagePair {
        let mut image_a = RasterImage::filled(8, 8, [9, 9, 9]).unwrap();
        let mut image_b = image_a.clone();
        image_a.put(1, 1, [200, 30, 30]);
        image_b.put(1, 1, [40, 60, 200]);
        ImagePair {
            pair_id: "p".into(),
            image_a,
            image_b,
            captions: CaptionPair {
                source_id: "p".into(),
                original: "a red square".into(),
                edited: "a blue circle".into(),
                replaced_object: "red square".into(),
                replacement_object: "blue circle".into(),
            },
            seed: 3,
        }
    }

    /// Scripts the stage-1 calls for `bbox`.
    fn script_label(
        backend: &mut ScriptedBackend,
        pair: &ImagePair,
        bbox: &BBox,
        captions: (&str, &str),
        citm: (f64, f64),
        embeddings: Option<(Vec<f64>, Vec<f64>)>,
    ) {
        let prompts = PromptTemplates::default();
        for (side, caption, score) in [(Side::A, captions.0, citm.0), (Side::B, captions.1, citm.1)] {
            let sub = crop(pair.image(side), bbox).unwrap();
            backend.script(
                Some(region_seed(pair, bbox, side.as_str())),
                Payload::MllmComplete {
                    image: sub.clone(),
                    prompt: prompts.region_caption.clone(),
                },
                Ok(Output::MllmComplete { text: caption.into() }),
            );
            backend.script(
                None,
                Payload::Itm {
                    image: sub,
                    text: caption.into(),
                },
                Ok(Output::Itm { score }),
            );
        }
        if let Some((ea, eb)) = embeddings {
            for (text, embedding) in [(captions.0, ea), (captions.1, eb)] {
                backend.script(
                    None,
                    Payload::EmbedText { text: text.into() },
                    Ok(Output::EmbedText { embedding }),
                );
            }
        }
    }

    #[test]
    fn scripted_label_accepted() {
        let pair = fixture_pair();
        let bbox = BBox::new(0, 0, 4, 4).unwrap();
        let mut b = ScriptedBackend::new();
        let s = (1.0f64 - 0.16).sqrt();
        script_label(&mut b, &pair, &bbox, ("red square", "blue circle"), (0.6, 0.7), Some((vec![1.0, 0.0], vec![0.4, s])));
        let client = BackendClient::new(Arc::new(b));
        let out = label_region(&pair, &bbox, &ThresholdConfig::default(), &PromptTemplates::default(), &client).unwrap();
        let LabelOutcome::Accepted(label) = out else { panic!("{out:?}") };
        assert!((label.cs.unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(label.caption_b, "blue circle");
    }

    #[test]
    fn citm_boundary_fails_on_b() {
        let pair = fixture_pair();
        let bbox = BBox::new(0, 0, 4, 4).unwrap();
        let mut b = ScriptedBackend::new();
        script_label(&mut b, &pair, &bbox, ("red square", "blue circle"), (0.41, 0.39), None);
        let client = BackendClient::new(Arc::new(b));
        let out = label_region(&pair, &bbox, &ThresholdConfig::default(), &PromptTemplates::default(), &client).unwrap();
        assert!(matches!(out, LabelOutcome::Rejected(LabelRejection::CitmFail { side: Side::B }, _)));
    }

    #[test]
    fn identical_captions_fail_cs() {
        let pair = fixture_pair();
        let bbox = BBox::new(0, 0, 4, 4).unwrap();
        let mut b = ScriptedBackend::new();
        script_label(&mut b, &pair, &bbox, ("a square", "a square"), (0.9, 0.9), Some((vec![1.0, 2.0], vec![1.0, 2.0])));
        let client = BackendClient::new(Arc::new(b));
        let out = label_region(&pair, &bbox, &ThresholdConfig::default(), &PromptTemplates::default(), &client).unwrap();
        let LabelOutcome::Rejected(LabelRejection::CsFail, label) = out else { panic!("{out:?}") };
        assert_eq!(label.cs, Some(1.0));
    }

    #[test]
    fn scripted_difference_caption_is_verbatim() {
        let pair = fixture_pair();
        let cfg = ThresholdConfig::default();
        let prompts = PromptTemplates::default();
        let label = RegionLabel {
            bbox: BBox::new(0, 0, 4, 4).unwrap(),
            caption_a: "a horse".into(),
            caption_b: "a motorcycle".into(),
            citm_a: 0.9,
            citm_b: 0.9,
            cs: Some(0.2),
        };
        let concat = highlight_and_concat(&pair.image_a, &pair.image_b, &label.bbox, 3, 20).unwrap();
        let b = ScriptedBackend::new().with(
            Some(region_seed(&pair, &label.bbox, "diff")),
            Payload::MllmComplete {
                image: concat,
                prompt: render_difference_prompt(&prompts.difference_caption, &label),
            },
            Output::MllmComplete {
                text: "The horse is replaced by a motorcycle.".into(),
            },
        );
        let (text, image) = difference_caption(&pair, &label, &cfg, &prompts, &BackendClient::new(Arc::new(b))).unwrap();
        assert_eq!(text, "The horse is replaced by a motorcycle.");
        assert_eq!(image.width(), 8 + 20 + 8);
    }

    #[test]
    fn scene_pair_end_to_end() {
        let caption = "a red square and a green circle";
        let (edited, old, new) = crate::scene::rewrite(caption, 0).unwrap();
        let (image_a, image_b) = crate::scene::render_pair(caption, &edited, 0);
        let pair = ImagePair {
            pair_id: "s".into(),
            image_a,
            image_b,
            captions: CaptionPair {
                source_id: "s".into(),
                original: caption.into(),
                edited,
                replaced_object: old.clone(),
                replacement_object: new.clone(),
            },
            seed: 0,
        };
        let client = BackendClient::new(Arc::new(SceneBackend::new()));
        let cfg = ThresholdConfig::default();
        let prompts = PromptTemplates::default();
        let a = crate::areas::generate(&pair, &cfg, &client).unwrap().areas;
        let out = caption_pair(&pair, &a, &cfg, &prompts, &client);
        assert_eq!(out.samples.len(), 1);
        assert!(out.items.is_conserved());
        let s = &out.samples[0].sample;
        assert!(s.conversation_is_well_formed());
        assert_eq!(s.conversation.len(), 2);
        assert_eq!(s.conversation[1].text, format!("LEFT: {old}; RIGHT: {new}"));
        assert_eq!(s.sample_id, format!("s-rep-{}", s.bbox.slug()));
    }

    #[test]
    fn two_labels_two_samples() {
        let pair = fixture_pair();
        let prompts = PromptTemplates::default();
        let mk = |x| RegionLabel {
            bbox: BBox::new(x, 0, x + 2, 2).unwrap(),
            caption_a: "a".into(),
            caption_b: "b".into(),
            citm_a: 1.0,
            citm_b: 1.0,
            cs: Some(0.0),
        };
        let s1 = build_sample(&pair, &region(0, 0.5), &mk(0), "d", &prompts);
        let s2 = build_sample(&pair, &region(4, 0.5), &mk(4), "d", &prompts);
        assert_eq!(s1.pair_id, s2.pair_id);
        assert_ne!(s1.bbox, s2.bbox);
        assert_ne!(s1.sample_id, s2.sample_id);
        assert_eq!(s1.conversation[0].role, Role::Human);
    }
}
