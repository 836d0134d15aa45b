//! Embedding-space gates: whole-image similarity banding, image-text
//! matching, caption similarity and the sub-image difference detector.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendClient, CallError};
use crate::geometry::crop;
use crate::model::{ImagePair, RegionCandidate};
use crate::raster::RasterImage;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimilarityError {
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding is all zeros")]
    ZeroVector,
    #[error("embedding is empty")]
    Empty,
    #[error("embedding has a non-finite value")]
    NonFinite,
}

/// Raw model embedding. Stored unnormalized; cosine is scale-invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, SimilarityError> {
        if values.is_empty() {
            return Err(SimilarityError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SimilarityError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn cosine_similarity(u: &Embedding, v: &Embedding) -> Result<f64, SimilarityError> {
    if u.dim() != v.dim() {
        return Err(SimilarityError::DimensionMismatch(u.dim(), v.dim()));
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    let nu: f64 = u.values.iter().map(|a| a * a).sum();
    let nv: f64 = v.values.iter().map(|a| a * a).sum();
    if nu == 0.0 || nv == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    // One square root over the product keeps u == v at exactly 1.0.
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

fn cosine(u: &Embedding, v: &Embedding) -> Result<f64, CallError> {
    cosine_similarity(u, v).map_err(|e| CallError::InvalidOutput(e.to_string()))
}

pub fn image_similarity(a: &RasterImage, b: &RasterImage, client: &BackendClient) -> Result<f64, CallError> {
    let ea = client.embed_image(a)?;
    let eb = client.embed_image(b)?;
    cosine(&ea, &eb)
}

pub fn itm_score(image: &RasterImage, text: &str, client: &BackendClient) -> Result<f64, CallError> {
    client.itm(image, text)
}

/// True when the two captions are different enough: their text-embedding
/// cosine is strictly below `cs_thr`.
pub fn caption_similarity_gate(
    caption_a: &str,
    caption_b: &str,
    cs_thr: f64,
    client: &BackendClient,
) -> Result<(bool, f64), CallError> {
    let ea = client.embed_text(caption_a)?;
    let eb = client.embed_text(caption_b)?;
    let sim = cosine(&ea, &eb)?;
    Ok((sim < cs_thr, sim))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub pair: ImagePair,
    pub similarity: f64,
}

#[derive(Debug, Default)]
pub struct BandOutcome {
    pub kept: Vec<ScoredPair>,
    pub dropped_low: Vec<ScoredPair>,
    pub dropped_high: Vec<ScoredPair>,
    pub quarantined: Vec<(ImagePair, CallError)>,
}

/// Keeps pairs whose whole-image similarity lies in the closed band
/// `[lo, hi]`. Other outcomes are returned, not discarded, so callers can
/// account for them. Order is preserved within each bucket.
pub fn band_filter_pairs(pairs: Vec<ImagePair>, lo: f64, hi: f64, client: &BackendClient) -> BandOutcome {
    let scored: Vec<(ImagePair, Result<f64, CallError>)> = pairs
        .into_par_iter()
        .map(|p| {
            let s = image_similarity(&p.image_a, &p.image_b, client);
            (p, s)
        })
        .collect();
    let mut out = BandOutcome::default();
    for (pair, score) in scored {
        match score {
            Ok(similarity) => {
                let sp = ScoredPair { pair, similarity };
                if similarity < lo {
                    out.dropped_low.push(sp);
                } else if similarity > hi {
                    out.dropped_high.push(sp);
                } else {
                    out.kept.push(sp);
                }
            }
            Err(e) => out.quarantined.push((pair, e)),
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct DetectorOutcome {
    /// Survivors with `difference = 1 - similarity` filled in.
    pub kept: Vec<RegionCandidate>,
    pub dropped: Vec<(RegionCandidate, f64)>,
    pub quarantined: Vec<(RegionCandidate, CallError)>,
}

/// Sub-image similarity of `region` across the two images of `pair`.
pub fn region_similarity(pair: &ImagePair, region: &RegionCandidate, client: &BackendClient) -> Result<f64, CallError> {
    let a = crop(&pair.image_a, &region.bbox).map_err(|e| CallError::InvalidInput(e.to_string()))?;
    let b = crop(&pair.image_b, &region.bbox).map_err(|e| CallError::InvalidInput(e.to_string()))?;
    image_similarity(&a, &b, client)
}

/// Keeps regions whose two sub-images have similarity strictly below
/// `diff_sim_thr`.
pub fn difference_detector(
    pair: &ImagePair,
    boxes: Vec<RegionCandidate>,
    diff_sim_thr: f64,
    client: &BackendClient,
) -> DetectorOutcome {
    let mut out = DetectorOutcome::default();
    for mut region in boxes {
        match region_similarity(pair, &region, client) {
            Ok(sim) if sim < diff_sim_thr => {
                region.difference = 1.0 - sim;
                out.kept.push(region);
            }
            Ok(sim) => out.dropped.push((region, sim)),
            Err(e) => out.quarantined.push((region, e)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&e(&[3.0, 4.0]), &e(&[3.0, 4.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 0.0);
        let s = cosine_similarity(&e(&[1.0, 0.0]), &e(&[1.0, 1.0])).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine_similarity(&e(&[1.0]), &e(&[1.0, 2.0])),
            Err(SimilarityError::DimensionMismatch(1, 2))
        );
        assert_eq!(
            cosine_similarity(&e(&[0.0, 0.0]), &e(&[1.0, 2.0])),
            Err(SimilarityError::ZeroVector)
        );
        assert_eq!(Embedding::new(vec![]), Err(SimilarityError::Empty));
        assert_eq!(Embedding::new(vec![f64::NAN]), Err(SimilarityError::NonFinite));
    }
}
