//! Threshold sweeps over a shared candidate pool.
//!
//! Every score a gate could look at is computed once per candidate, with
//! the same backend calls the pipeline makes. Evaluating a config is then a
//! pure function of the pool, so configs are compared on identical inputs.
//!
//! Survivor sets are reported per level. `pairs`, `bitm` and `diff_sim`
//! only lose members when any of IS, BITM or diff_sim tightens. Everything
//! after suppression (`areas`, `selected`, `citm`, `samples`) is monotone in
//! IS, CITM and CS, but not in BITM or diff_sim: dropping a box can let a
//! box it used to suppress through.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::areas::{candidate_boxes, object_itm};
use crate::backend::BackendClient;
use crate::captions::{label_region, replacement_sample_id, LabelOutcome};
use crate::config::{PromptTemplates, ThresholdConfig};
use crate::geometry::{rank_order, suppress_indices};
use crate::model::{BBox, ImagePair, Side};
use crate::similarity::{image_similarity, region_similarity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub citm_a: f64,
    pub citm_b: f64,
    pub cs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScores {
    pub id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub side: Side,
    /// `None` wherever the backend call failed; the pipeline would have
    /// quarantined the region there.
    pub itm: Option<f64>,
    pub sub_sim: Option<f64>,
    pub label: Option<LabelScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub pair_id: String,
    pub similarity: Option<f64>,
    /// `None` when segmentation failed.
    pub candidates: Option<Vec<CandidateScores>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub seg_conf: f64,
    pub iou: f64,
    pub top_n: usize,
    pub pairs: Vec<PairScores>,
}

impl CandidatePool {
    pub fn candidate_count(&self) -> usize {
        self.pairs.iter().filter_map(|p| p.candidates.as_ref()).map(Vec::len).sum()
    }

    /// Whether `cfg` can be evaluated on this pool: the settings that shape
    /// the candidates must match.
    pub fn compatible(&self, cfg: &ThresholdConfig) -> bool {
        cfg.seg_conf == self.seg_conf && cfg.iou == self.iou && cfg.top_n == self.top_n
    }
}

/// Scores every candidate of every pair. Only `seg_conf`, `iou` and `top_n`
/// of `cfg` matter.
pub fn build_pool(
    pairs: &[ImagePair],
    cfg: &ThresholdConfig,
    prompts: &PromptTemplates,
    client: &BackendClient,
) -> CandidatePool {
    let open = ThresholdConfig {
        citm: f64::NEG_INFINITY,
        cs: f64::INFINITY,
        ..cfg.clone()
    };
    let scored = pairs
        .par_iter()
        .map(|pair| {
            let similarity = image_similarity(&pair.image_a, &pair.image_b, client).ok();
            let candidates = candidate_boxes(pair, cfg, client).ok().map(|cands| {
                cands
                    .par_iter()
                    .map(|c| {
                        let label = match label_region(pair, &c.bbox, &open, prompts, client) {
                            Ok(LabelOutcome::Accepted(l)) => l.cs.map(|cs| LabelScores {
                                citm_a: l.citm_a,
                                citm_b: l.citm_b,
                                cs,
                            }),
                            _ => None,
                        };
                        CandidateScores {
                            id: format!("{}/{}/{}", pair.pair_id, c.side.as_str(), c.bbox.slug()),
                            bbox: c.bbox,
                            side: c.side,
                            itm: object_itm(pair, c, client).ok(),
                            sub_sim: region_similarity(pair, c, client).ok(),
                            label,
                        }
                    })
                    .collect()
            });
            PairScores {
                pair_id: pair.pair_id.clone(),
                similarity,
                candidates,
            }
        })
        .collect();
    CandidatePool {
        seg_conf: cfg.seg_conf,
        iou: cfg.iou,
        top_n: cfg.top_n,
        pairs: scored,
    }
}

pub const LEVELS: [&str; 7] = ["pairs", "bitm", "diff_sim", "areas", "selected", "citm", "samples"];

/// Survivors per level. Region levels hold candidate ids, `samples` holds
/// replacement sample ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Survivors {
    pub levels: BTreeMap<String, BTreeSet<String>>,
}

impl Survivors {
    pub fn level(&self, name: &str) -> &BTreeSet<String> {
        static EMPTY: BTreeSet<String> = BTreeSet::new();
        self.levels.get(name).unwrap_or(&EMPTY)
    }

    fn add(&mut self, level: &str, id: impl Into<String>) {
        self.levels.entry(level.to_owned()).or_default().insert(id.into());
    }
}

/// Replays the gate logic of the pipeline over pooled scores.
pub fn evaluate(pool: &CandidatePool, cfg: &ThresholdConfig) -> Survivors {
    let mut out = Survivors::default();
    for l in LEVELS {
        out.levels.insert(l.to_owned(), BTreeSet::new());
    }
    for p in &pool.pairs {
        let Some(sim) = p.similarity else { continue };
        if !(cfg.is_low <= sim && sim <= cfg.is_high) {
            continue;
        }
        out.add("pairs", &p.pair_id);
        let Some(cands) = &p.candidates else { continue };
        let mut differing: Vec<&CandidateScores> = Vec::new();
        for c in cands {
            let Some(itm) = c.itm else { continue };
            if itm <= cfg.bitm {
                continue;
            }
            out.add("bitm", &c.id);
            let Some(s) = c.sub_sim else { continue };
            if s < cfg.diff_sim {
                out.add("diff_sim", &c.id);
                differing.push(c);
            }
        }
        let scored: Vec<(f64, BBox)> = differing
            .iter()
            .map(|c| (1.0 - c.sub_sim.expect("checked"), c.bbox))
            .collect();
        let mut kept: Vec<(f64, &CandidateScores)> = suppress_indices(&scored, pool.iou)
            .into_iter()
            .map(|i| (scored[i].0, differing[i]))
            .collect();
        for (_, c) in &kept {
            out.add("areas", &c.id);
        }
        kept.sort_by(|(da, a), (db, b)| rank_order(*da, &a.bbox, *db, &b.bbox));
        kept.truncate(pool.top_n);
        for (_, c) in kept {
            out.add("selected", &c.id);
            let Some(l) = &c.label else { continue };
            if l.citm_a > cfg.citm && l.citm_b > cfg.citm {
                out.add("citm", &c.id);
                if l.cs < cfg.cs {
                    out.add("samples", replacement_sample_id(&p.pair_id, &c.bbox));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    pub name: String,
    pub counts: BTreeMap<String, usize>,
}

/// `strict` is at least as strict as `loose`; `contained` says, per level,
/// whether its survivors are a subset of the looser config's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Containment {
    pub strict: String,
    pub loose: String,
    pub contained: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub candidates: usize,
    pub configs: Vec<ConfigResult>,
    pub containment: Vec<Containment>,
}

impl SweepReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<20}", "config");
        for l in LEVELS {
            s += &format!(" {l:>9}");
        }
        s.push('\n');
        for c in &self.configs {
            s += &format!("{:<20}", c.name);
            for l in LEVELS {
                s += &format!(" {:>9}", c.counts.get(l).copied().unwrap_or(0));
            }
            s.push('\n');
        }
        for c in &self.containment {
            let bad: Vec<&str> = c.contained.iter().filter(|(_, ok)| !**ok).map(|(k, _)| k.as_str()).collect();
            s += &format!(
                "{} within {}: {}\n",
                c.strict,
                c.loose,
                if bad.is_empty() { "all levels".to_owned() } else { format!("not at {}", bad.join(", ")) }
            );
        }
        s
    }
}

/// Evaluates named configs and checks containment for every ordered pair
/// where one is at least as strict as the other.
pub fn sweep(pool: &CandidatePool, configs: &[(String, ThresholdConfig)]) -> (SweepReport, Vec<Survivors>) {
    let survivors: Vec<Survivors> = configs.iter().map(|(_, c)| evaluate(pool, c)).collect();
    let results = configs
        .iter()
        .zip(&survivors)
        .map(|((name, _), s)| ConfigResult {
            name: name.clone(),
            counts: s.levels.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
        })
        .collect();
    let mut containment = Vec::new();
    for (i, (ni, ci)) in configs.iter().enumerate() {
        for (j, (nj, cj)) in configs.iter().enumerate() {
            if i == j || !ci.at_least_as_strict_as(cj) {
                continue;
            }
            let contained = LEVELS
                .iter()
                .map(|l| (l.to_string(), survivors[i].level(l).is_subset(survivors[j].level(l))))
                .collect();
            containment.push(Containment {
                strict: ni.clone(),
                loose: nj.clone(),
                contained,
            });
        }
    }
    (
        SweepReport {
            candidates: pool.candidate_count(),
            configs: results,
            containment,
        },
        survivors,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::areas::generate;
    use crate::backend::scene::SceneBackend;
    use crate::captions::caption_pair;
    use crate::hash::derive_seed;
    use crate::synthesis::{prefilter_pairs, synthesize_caption_pairs, synthesize_image_pairs, CaptionSource};
    use std::sync::Arc;

    fn fixture(n: usize) -> (Vec<ImagePair>, BackendClient) {
        let client = BackendClient::new(Arc::new(SceneBackend::with_noise(0.05)));
        let src = CaptionSource::from_pairs(crate::scene::synthetic_captions(n, 3)).unwrap();
        let caps = synthesize_caption_pairs(&src, &client, &PromptTemplates::default().rewrite, 9);
        let pairs = synthesize_image_pairs(&caps.kept, &client, derive_seed(9, "pairs"));
        (pairs.kept, client)
    }

    #[test]
    fn pool_matches_pipeline() {
        let (pairs, client) = fixture(40);
        let prompts = PromptTemplates::default();
        for cfg in [
            ThresholdConfig::default(),
            ThresholdConfig {
                is_low: 0.5,
                bitm: 0.2,
                citm: 0.3,
                ..ThresholdConfig::default()
            },
        ] {
            let pool = build_pool(&pairs, &cfg, &prompts, &client);
            let s = evaluate(&pool, &cfg);
            let pf = prefilter_pairs(pairs.clone(), &cfg, &client);
            let mut kept_pairs = BTreeSet::new();
            let mut areas = BTreeSet::new();
            let mut samples = BTreeSet::new();
            for sp in &pf.kept {
                kept_pairs.insert(sp.pair.pair_id.clone());
                let out = generate(&sp.pair, &cfg, &client).unwrap();
                for r in &out.areas.regions {
                    areas.insert(format!("{}/{}/{}", sp.pair.pair_id, r.side.as_str(), r.bbox.slug()));
                }
                for r in caption_pair(&sp.pair, &out.areas, &cfg, &prompts, &client).samples {
                    samples.insert(r.sample.sample_id);
                }
            }
            assert_eq!(s.level("pairs"), &kept_pairs);
            assert_eq!(s.level("areas"), &areas);
            assert_eq!(s.level("samples"), &samples);
        }
    }

    #[test]
    fn tightening_shrinks_gate_levels() {
        let (pairs, client) = fixture(30);
        let base = ThresholdConfig {
            is_low: 0.5,
            bitm: 0.1,
            citm: 0.1,
            ..ThresholdConfig::default()
        };
        let pool = build_pool(&pairs, &base, &PromptTemplates::default(), &client);
        let tight_areas = ThresholdConfig {
            is_low: 0.9,
            bitm: 0.35,
            diff_sim: 0.8,
            ..base.clone()
        };
        let tight_labels = ThresholdConfig {
            is_low: 0.9,
            citm: 0.4,
            cs: 0.8,
            ..base.clone()
        };
        let (report, _) = sweep(
            &pool,
            &[
                ("base".into(), base.clone()),
                ("tight-areas".into(), tight_areas),
                ("tight-labels".into(), tight_labels),
                ("same".into(), base),
            ],
        );
        let within = |strict: &str| report.containment.iter().find(|c| c.strict == strict && c.loose == "base").unwrap();
        for l in ["pairs", "bitm", "diff_sim"] {
            assert!(within("tight-areas").contained[l], "{l}");
        }
        for l in LEVELS {
            assert!(within("tight-labels").contained[l], "{l}");
        }
        assert_eq!(report.configs[0].counts, report.configs[3].counts);
        assert!(report.to_table().contains("tight-labels within base: all levels"));
    }
}
