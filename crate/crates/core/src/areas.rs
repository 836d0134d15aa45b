//! Difference areas: segment both images, keep sub-images that show one of
//! the swapped objects, keep those that differ across the pair, suppress
//! overlaps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendClient, CallError};
use crate::config::ThresholdConfig;
use crate::funnel::{Counts, Quarantine, Rejection};
use crate::geometry::{crop, suppress_indices};
use crate::model::{BBox, ImagePair, RegionCandidate, Side};
use crate::similarity::{itm_score, region_similarity};

pub const STAGE_AREAS: &str = "diff-areas";

/// A region that passed every gate, with the scores it passed them by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRegion {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub side: Side,
    pub seg_confidence: f64,
    /// Best ITM over the replaced and replacement object names.
    pub itm: f64,
    pub difference: f64,
}

impl ScoredRegion {
    pub fn similarity(&self) -> f64 {
        1.0 - self.difference
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AreaStageCounts {
    pub itm_gate: Counts,
    pub difference: Counts,
    pub suppression: Counts,
}

impl AreaStageCounts {
    /// All three gates folded into one region-level row.
    pub fn items(&self) -> Counts {
        let mut c = Counts::new("region");
        c.input = self.itm_gate.input;
        c.kept = self.suppression.kept;
        c.quarantined = self.itm_gate.quarantined + self.difference.quarantined + self.suppression.quarantined;
        for g in [&self.itm_gate, &self.difference, &self.suppression] {
            for (k, v) in &g.dropped {
                c.drop(k, *v);
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceAreas {
    pub pair_id: String,
    pub regions: Vec<ScoredRegion>,
    pub stage_counts: AreaStageCounts,
}

#[derive(Debug)]
pub struct AreasOutcome {
    pub areas: DifferenceAreas,
    pub rejections: Vec<Rejection>,
    pub quarantined: Vec<Quarantine>,
}

fn item_id(pair: &ImagePair, c: &RegionCandidate) -> String {
    format!("{}/{}/{}", pair.pair_id, c.side.as_str(), c.bbox.slug())
}

/// Segmentation regions of both images, side A first.
pub fn candidate_boxes(
    pair: &ImagePair,
    cfg: &ThresholdConfig,
    client: &BackendClient,
) -> Result<Vec<RegionCandidate>, CallError> {
    let mut out = Vec::new();
    for side in [Side::A, Side::B] {
        let seg = client.segment(pair.image(side), cfg.seg_conf, cfg.iou)?;
        out.extend(seg.into_candidates(side));
    }
    Ok(out)
}

/// ITM of the candidate's sub-image (from its own side) against both object
/// names; returns the larger score.
pub fn object_itm(pair: &ImagePair, c: &RegionCandidate, client: &BackendClient) -> Result<f64, CallError> {
    let sub = crop(pair.image(c.side), &c.bbox).map_err(|e| CallError::InvalidInput(e.to_string()))?;
    let a = itm_score(&sub, &pair.captions.replaced_object, client)?;
    let b = itm_score(&sub, &pair.captions.replacement_object, client)?;
    Ok(a.max(b))
}

#[derive(Debug, Default)]
pub struct GateOutcome {
    pub kept: Vec<(RegionCandidate, f64)>,
    pub dropped: Vec<(RegionCandidate, f64)>,
    pub quarantined: Vec<(RegionCandidate, CallError)>,
}

/// Keeps candidates whose best object-name ITM exceeds `cfg.bitm`.
pub fn gate_valid_objects(
    pair: &ImagePair,
    candidates: Vec<RegionCandidate>,
    cfg: &ThresholdConfig,
    client: &BackendClient,
) -> GateOutcome {
    let scored: Vec<_> = candidates
        .into_par_iter()
        .map(|c| {
            let s = object_itm(pair, &c, client);
            (c, s)
        })
        .collect();
    let mut out = GateOutcome::default();
    for (c, s) in scored {
        match s {
            Ok(s) if s > cfg.bitm => out.kept.push((c, s)),
            Ok(s) => out.dropped.push((c, s)),
            Err(e) => out.quarantined.push((c, e)),
        }
    }
    out
}

fn gate_counts(unit: &str, input: usize, kept: usize, reason: &str, dropped: usize, quarantined: usize) -> Counts {
    let mut c = Counts::new(unit);
    c.input = input as u64;
    c.kept = kept as u64;
    c.drop(reason, dropped as u64);
    c.quarantined = quarantined as u64;
    c
}

/// Candidates, then the ITM gate, the difference detector and suppression.
/// An empty region list is a valid result. Fails only when segmentation does.
pub fn generate(pair: &ImagePair, cfg: &ThresholdConfig, client: &BackendClient) -> Result<AreasOutcome, CallError> {
    let candidates = candidate_boxes(pair, cfg, client)?;
    let n_candidates = candidates.len();
    let mut rejections = Vec::new();
    let mut quarantined = Vec::new();

    let gated = gate_valid_objects(pair, candidates, cfg, client);
    for (c, s) in &gated.dropped {
        rejections.push(Rejection::new(STAGE_AREAS, item_id(pair, c), "bitm").score("itm", *s));
    }
    for (c, e) in &gated.quarantined {
        quarantined.push(Quarantine::new(STAGE_AREAS, item_id(pair, c), e));
    }
    let itm_gate = gate_counts(
        "region",
        n_candidates,
        gated.kept.len(),
        "bitm",
        gated.dropped.len(),
        gated.quarantined.len(),
    );

    let n_gated = gated.kept.len();
    let sims: Vec<_> = gated
        .kept
        .into_par_iter()
        .map(|(c, itm)| {
            let s = region_similarity(pair, &c, client);
            (c, itm, s)
        })
        .collect();
    let mut differing = Vec::new();
    let mut n_dropped = 0;
    let mut n_quarantined = 0;
    for (c, itm, s) in sims {
        match s {
            Ok(sim) if sim < cfg.diff_sim => differing.push(ScoredRegion {
                bbox: c.bbox,
                side: c.side,
                seg_confidence: c.seg_confidence,
                itm,
                difference: 1.0 - sim,
            }),
            Ok(sim) => {
                n_dropped += 1;
                rejections.push(Rejection::new(STAGE_AREAS, item_id(pair, &c), "diff_sim").score("similarity", sim));
            }
            Err(e) => {
                n_quarantined += 1;
                quarantined.push(Quarantine::new(STAGE_AREAS, item_id(pair, &c), &e));
            }
        }
    }
    let difference = gate_counts("region", n_gated, differing.len(), "diff_sim", n_dropped, n_quarantined);

    let scored: Vec<(f64, BBox)> = differing.iter().map(|r| (r.difference, r.bbox)).collect();
    let keep = suppress_indices(&scored, cfg.iou);
    let mut accepted = vec![false; differing.len()];
    for &i in &keep {
        accepted[i] = true;
    }
    for (r, _) in differing.iter().zip(&accepted).filter(|(_, a)| !**a) {
        let c = RegionCandidate::new(r.bbox, r.seg_confidence, r.side);
        rejections.push(Rejection::new(STAGE_AREAS, item_id(pair, &c), "iou").score("difference", r.difference));
    }
    let regions: Vec<ScoredRegion> = keep.iter().map(|&i| differing[i].clone()).collect();
    let suppression = gate_counts(
        "region",
        differing.len(),
        regions.len(),
        "iou",
        differing.len() - regions.len(),
        0,
    );

    Ok(AreasOutcome {
        areas: DifferenceAreas {
            pair_id: pair.pair_id.clone(),
            regions,
            stage_counts: AreaStageCounts {
                itm_gate,
                difference,
                suppression,
            },
        },
        rejections,
        quarantined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::protocol::{Output, Payload};
    use crate::backend::scene::SceneBackend;
    use crate::backend::transcript::ScriptedBackend;
    use crate::geometry::iou;
    use crate::model::CaptionPair;
    use crate::raster::RasterImage;
    use crate::scene::{render_pair, rewrite, Scene};
    use std::sync::Arc;

    fn scene_client() -> BackendClient {
        BackendClient::new(Arc::new(SceneBackend::new()))
    }

    fn scene_pair(original: &str, seed: u64) -> ImagePair {
        let (edited, old, new) = rewrite(original, seed).unwrap();
        let (image_a, image_b) = render_pair(original, &edited, seed);
        ImagePair {
            pair_id: format!("p{seed}"),
            image_a,
            image_b,
            captions: CaptionPair {
                source_id: format!("p{seed}"),
                original: original.into(),
                edited,
                replaced_object: old,
                replacement_object: new,
            },
            seed,
        }
    }

    #[test]
    fn candidates_cover_both_sides() {
        let pair = scene_pair("a red square and a blue circle", 4);
        let c = candidate_boxes(&pair, &ThresholdConfig::default(), &scene_client()).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c.iter().filter(|r| r.side == Side::A).count(), 2);
        assert!(c.iter().all(|r| r.seg_confidence > 0.05));
    }

    #[test]
    fn blank_pair_has_no_candidates() {
        let mut pair = scene_pair("a red square", 0);
        pair.image_a = RasterImage::filled(64, 64, crate::scene::BACKGROUND).unwrap();
        pair.image_b = pair.image_a.clone();
        let c = candidate_boxes(&pair, &ThresholdConfig::default(), &scene_client()).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn single_swap_yields_the_ground_truth_box() {
        for seed in 0..12 {
            let original = "a red square, a green circle and a yellow triangle";
            let pair = scene_pair(original, seed);
            let out = generate(&pair, &ThresholdConfig::default(), &scene_client()).unwrap();
            let idx = (seed % 3) as usize;
            let truth = Scene::from_caption(original, seed, 3).objects[idx].1;
            let boxes: Vec<BBox> = out.areas.regions.iter().map(|r| r.bbox).collect();
            assert_eq!(boxes, [truth], "seed {seed}");
            assert!(out.areas.stage_counts.items().is_conserved());
        }
    }

    #[test]
    fn identical_images_yield_nothing() {
        let mut pair = scene_pair("a red square and a blue circle", 2);
        pair.image_b = pair.image_a.clone();
        let out = generate(&pair, &ThresholdConfig::default(), &scene_client()).unwrap();
        assert!(out.areas.regions.is_empty());
        let items = out.areas.stage_counts.items();
        assert!(items.is_conserved());
        assert_eq!(items.kept, 0);
    }

    #[test]
    fn itm_gate_is_strict() {
        // Six candidates over distinct 4x4 tiles; scripted ITM against the
        // replaced object only, the replacement scoring 0.
        let pair = {
            let mut p = scene_pair("a red square", 0);
            p.image_a = RasterImage::filled(24, 4, [1, 1, 1]).unwrap();
            for x in 0..24 {
                for y in 0..4 {
                    p.image_a.put(x, y, [(x / 4) as u8 * 10, 0, 0]);
                }
            }
            p.image_b = p.image_a.clone();
            p
        };
        let scores = [0.1, 0.2, 0.35, 0.36, 0.5, 0.9];
        let mut backend = ScriptedBackend::new();
        let mut cands = Vec::new();
        for (i, s) in scores.iter().enumerate() {
            let b = BBox::new(i as u32 * 4, 0, i as u32 * 4 + 4, 4).unwrap();
            let sub = crop(&pair.image_a, &b).unwrap();
            for (text, score) in [
                (&pair.captions.replaced_object, *s),
                (&pair.captions.replacement_object, 0.0),
            ] {
                backend.script(
                    None,
                    Payload::Itm {
                        image: sub.clone(),
                        text: text.clone(),
                    },
                    Ok(Output::Itm { score }),
                );
            }
            cands.push(RegionCandidate::new(b, 0.9, Side::A));
        }
        let client = BackendClient::new(Arc::new(backend));
        let out = gate_valid_objects(&pair, cands, &ThresholdConfig::default(), &client);
        let kept: Vec<f64> = out.kept.iter().map(|(_, s)| *s).collect();
        assert_eq!(kept, [0.36, 0.5, 0.9]);
        assert_eq!(out.dropped.len(), 3);
    }

    #[test]
    fn final_regions_recheck() {
        let cfg = ThresholdConfig::default();
        let client = scene_client();
        for (i, (_, caption)) in crate::scene::synthetic_captions(30, 9).iter().enumerate() {
            let Some(_) = rewrite(caption, i as u64) else { continue };
            let pair = scene_pair(caption, i as u64);
            let out = generate(&pair, &cfg, &client).unwrap();
            let r = &out.areas.regions;
            for (a, x) in r.iter().enumerate() {
                for y in &r[a + 1..] {
                    assert!(iou(&x.bbox, &y.bbox) <= cfg.iou);
                }
                let c = RegionCandidate::new(x.bbox, x.seg_confidence, x.side);
                assert!(region_similarity(&pair, &c, &client).unwrap() < cfg.diff_sim);
                assert!(object_itm(&pair, &c, &client).unwrap() > cfg.bitm);
            }
        }
    }
}
