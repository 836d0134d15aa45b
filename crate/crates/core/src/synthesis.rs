//! Caption ingestion, object-replacement rewriting, pair generation and the
//! similarity-band prefilter.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::BackendClient;
use crate::config::ThresholdConfig;
use crate::funnel::{Counts, Quarantine, Rejection, StageCounts};
use crate::hash::derive_seed;
use crate::io::{atomic_write, read_json, write_json};
use crate::model::{CaptionPair, ImagePair};
use crate::raster::RasterImage;
use crate::similarity::{band_filter_pairs, ScoredPair};

#[derive(Debug, thiserror::Error)]
pub enum SourceError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate source id `{0}`")]
    DuplicateId(String),
    #[error("source id `{0}` must match [A-Za-z0-9._-]+")]
    UnsafeId(String),
}

/// Ids double as file names, so they are restricted.
pub fn is_safe_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub id: String,
    pub caption: String,
}

/// Captions keyed by unique source id, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionSource {
    records: Vec<CaptionRecord>,
}

impl CaptionSource {
    pub fn new(records: Vec<CaptionRecord>) -> Result<Self, SourceError> {
        let mut seen = HashSet::new();
        for r in &records {
            if !is_safe_id(&r.id) {
                return Err(SourceError::UnsafeId(r.id.clone()));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(SourceError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self { records })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self, SourceError> {
        Self::new(pairs.into_iter().map(|(id, caption)| CaptionRecord { id, caption }).collect())
    }

    /// Parses `{"id": .., "caption": ..}` lines; blank lines are skipped.
    pub fn parse_jsonl(text: &str) -> Result<Self, SourceError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: CaptionRecord = serde_json::from_str(line).map_err(|e| SourceError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(r);
        }
        Self::new(records)
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, SourceError> {
        let text = std::fs::read_to_string(path).map_err(|source| SourceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_jsonl(&text)
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn records(&self) -> &[CaptionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Survivors of a per-item stage plus the items set aside. Both lists keep
/// input order.
#[derive(Debug)]
pub struct Staged<T> {
    pub kept: Vec<T>,
    pub quarantined: Vec<Quarantine>,
}

impl<T> Staged<T> {
    pub fn counts(&self, unit: &str) -> Counts {
        let mut c = Counts::new(unit);
        c.kept = self.kept.len() as u64;
        c.quarantined = self.quarantined.len() as u64;
        c.input = c.kept + c.quarantined;
        c
    }
}

fn split<T>(stage: &str, results: Vec<(String, Result<T, crate::backend::CallError>)>) -> Staged<T> {
    let mut out = Staged {
        kept: Vec::new(),
        quarantined: Vec::new(),
    };
    for (id, r) in results {
        match r {
            Ok(v) => out.kept.push(v),
            Err(e) => out.quarantined.push(Quarantine::new(stage, id, &e)),
        }
    }
    out
}

pub const STAGE_CAPTIONS: &str = "synth-captions";
pub const STAGE_PAIRS: &str = "synth-pairs";
pub const STAGE_PREFILTER: &str = "prefilter";

pub fn synthesize_caption_pairs(
    source: &CaptionSource,
    client: &BackendClient,
    template: &str,
    run_seed: u64,
) -> Staged<CaptionPair> {
    let results = source
        .records()
        .par_iter()
        .map(|r| {
            let seed = derive_seed(run_seed, &r.id);
            (r.id.clone(), client.rewrite_caption(&r.id, &r.caption, template, seed))
        })
        .collect();
    split(STAGE_CAPTIONS, results)
}

pub fn synthesize_image_pairs(pairs: &[CaptionPair], client: &BackendClient, run_seed: u64) -> Staged<ImagePair> {
    let results = pairs
        .par_iter()
        .map(|p| {
            let seed = derive_seed(run_seed, &p.source_id);
            (p.source_id.clone(), client.generate_pair(&p.source_id, p, seed))
        })
        .collect();
    split(STAGE_PAIRS, results)
}

#[derive(Debug)]
pub struct Prefiltered {
    pub kept: Vec<ScoredPair>,
    pub rejections: Vec<Rejection>,
    pub quarantined: Vec<Quarantine>,
    pub counts: StageCounts,
}

/// Keeps pairs whose whole-image similarity is inside `[is_low, is_high]`.
pub fn prefilter_pairs(pairs: Vec<ImagePair>, cfg: &ThresholdConfig, client: &BackendClient) -> Prefiltered {
    let n = pairs.len() as u64;
    let band = band_filter_pairs(pairs, cfg.is_low, cfg.is_high, client);
    let mut counts = Counts::new("pair");
    counts.input = n;
    counts.kept = band.kept.len() as u64;
    counts.drop("dropped_low", band.dropped_low.len() as u64);
    counts.drop("dropped_high", band.dropped_high.len() as u64);
    counts.quarantined = band.quarantined.len() as u64;
    let mut rejections = Vec::new();
    for (reason, list) in [("dropped_low", &band.dropped_low), ("dropped_high", &band.dropped_high)] {
        for sp in list {
            rejections.push(Rejection::new(STAGE_PREFILTER, &sp.pair.pair_id, reason).score("similarity", sp.similarity));
        }
    }
    let quarantined = band
        .quarantined
        .iter()
        .map(|(p, e)| Quarantine::new(STAGE_PREFILTER, &p.pair_id, e))
        .collect();
    Prefiltered {
        kept: band.kept,
        rejections,
        quarantined,
        counts: StageCounts {
            stage: STAGE_PREFILTER.to_owned(),
            upstream: Some(STAGE_PAIRS.to_owned()),
            counts,
            items: None,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSidecar {
    pub pair_id: String,
    pub captions: CaptionPair,
    pub seed: u64,
    #[serde(default)]
    pub similarity: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
    #[error("pair id `{0}` is not a safe file name")]
    UnsafeId(String),
}

/// Directory of pairs: `{id}.a.png`, `{id}.b.png` and `{id}.json`.
#[derive(Debug, Clone)]
pub struct PairStore {
    root: PathBuf,
}

impl PairStore {
    pub fn open(root: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self { root: root.to_owned() })
    }

    fn path(&self, id: &str, suffix: &str) -> Result<PathBuf, StoreError> {
        if !is_safe_id(id) {
            return Err(StoreError::UnsafeId(id.to_owned()));
        }
        Ok(self.root.join(format!("{id}{suffix}")))
    }

    pub fn write(&self, pair: &ImagePair, similarity: Option<f64>) -> Result<(), StoreError> {
        atomic_write(&self.path(&pair.pair_id, ".a.png")?, &pair.image_a.to_png_bytes())?;
        atomic_write(&self.path(&pair.pair_id, ".b.png")?, &pair.image_b.to_png_bytes())?;
        self.write_sidecar(&PairSidecar {
            pair_id: pair.pair_id.clone(),
            captions: pair.captions.clone(),
            seed: pair.seed,
            similarity,
        })
    }

    pub fn write_sidecar(&self, sidecar: &PairSidecar) -> Result<(), StoreError> {
        write_json(&self.path(&sidecar.pair_id, ".json")?, sidecar)?;
        Ok(())
    }

    pub fn read_sidecar(&self, id: &str) -> Result<PairSidecar, StoreError> {
        Ok(read_json(&self.path(id, ".json")?)?)
    }

    pub fn read(&self, id: &str) -> Result<(ImagePair, Option<f64>), StoreError> {
        let side = self.read_sidecar(id)?;
        let image_a = RasterImage::load(&self.path(id, ".a.png")?)?;
        let image_b = RasterImage::load(&self.path(id, ".b.png")?)?;
        Ok((
            ImagePair {
                pair_id: side.pair_id,
                image_a,
                image_b,
                captions: side.captions,
                seed: side.seed,
            },
            side.similarity,
        ))
    }

    /// Ids of all stored pairs, sorted.
    pub fn ids(&self) -> std::io::Result<Vec<String>> {
        let mut ids: Vec<String> = std::fs::read_dir(&self.root)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(str::to_owned))
            .collect();
        ids.sort();
        Ok(ids)
    }
}
