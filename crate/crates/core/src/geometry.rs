//! Box arithmetic, overlap suppression and the raster operations used to
//! build model inputs: crop, side-by-side concatenation and red-box
//! highlighting. None of these modify their inputs.

use std::cmp::Ordering;

use crate::model::{BBox, RegionCandidate};
use crate::raster::{RasterImage, Rgb};

pub const RED: Rgb = [255, 0, 0];
pub const BLACK: Rgb = [0, 0, 0];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("box ({x0},{y0},{x1},{y1}) exceeds {width}x{height} image")]
    OutOfBounds {
        x0: u32,
        y0: u32,
        x1: u32,
        y1: u32,
        width: u32,
        height: u32,
    },
    #[error("cannot concatenate images of heights {left} and {right}")]
    HeightMismatch { left: u32, right: u32 },
    #[error("{0} must be at least 1 pixel")]
    ZeroWidth(&'static str),
}

fn check_bounds(image: &RasterImage, b: &BBox) -> Result<(), GeometryError> {
    if b.within(image.width(), image.height()) {
        Ok(())
    } else {
        Err(GeometryError::OutOfBounds {
            x0: b.x0,
            y0: b.y0,
            x1: b.x1,
            y1: b.y1,
            width: image.width(),
            height: image.height(),
        })
    }
}

/// Intersection over union with exact integer pixel counts.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Ranking used wherever regions are ordered by a score: higher score first,
/// then smaller area, then lexicographic coordinates.
pub fn rank_order(score_a: f64, a: &BBox, score_b: f64, b: &BBox) -> Ordering {
    score_b
        .total_cmp(&score_a)
        .then_with(|| a.area().cmp(&b.area()))
        .then_with(|| (a.x0, a.y0, a.x1, a.y1).cmp(&(b.x0, b.y0, b.x1, b.y1)))
}

/// Greedy suppression: walk `(score, box)` entries in [`rank_order`] and
/// accept one iff its IoU with every already-accepted box is at most
/// `iou_thr`. Returns indices into `scored`, in acceptance order. Exact ties
/// keep input order.
pub fn suppress_indices(scored: &[(f64, BBox)], iou_thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&i, &j| rank_order(scored[i].0, &scored[i].1, scored[j].0, &scored[j].1));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&scored[k].1, &scored[i].1) <= iou_thr) {
            kept.push(i);
        }
    }
    kept
}

pub fn suppress_by<F>(candidates: &[RegionCandidate], score: F, iou_thr: f64) -> Vec<RegionCandidate>
where
    F: Fn(&RegionCandidate) -> f64,
{
    let scored: Vec<(f64, BBox)> = candidates.iter().map(|c| (score(c), c.bbox)).collect();
    suppress_indices(&scored, iou_thr)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect()
}

pub fn suppress_by_difference(candidates: &[RegionCandidate], iou_thr: f64) -> Vec<RegionCandidate> {
    suppress_by(candidates, |c| c.difference, iou_thr)
}

pub fn suppress_by_confidence(candidates: &[RegionCandidate], iou_thr: f64) -> Vec<RegionCandidate> {
    suppress_by(candidates, |c| c.seg_confidence, iou_thr)
}

pub fn crop(image: &RasterImage, b: &BBox) -> Result<RasterImage, GeometryError> {
    check_bounds(image, b)?;
    let mut pixels = Vec::with_capacity(b.area() as usize * 3);
    for y in b.y0..b.y1 {
        let row = image.row(y);
        pixels.extend_from_slice(&row[b.x0 as usize * 3..b.x1 as usize * 3]);
    }
    Ok(RasterImage::new(b.width(), b.height(), pixels).expect("non-empty box"))
}

/// `a`, a black divider `divider_px` wide, then `b`, left to right.
pub fn concat_with_divider(
    a: &RasterImage,
    b: &RasterImage,
    divider_px: u32,
) -> Result<RasterImage, GeometryError> {
    if a.height() != b.height() {
        return Err(GeometryError::HeightMismatch {
            left: a.height(),
            right: b.height(),
        });
    }
    if divider_px == 0 {
        return Err(GeometryError::ZeroWidth("divider"));
    }
    let width = a.width() + divider_px + b.width();
    let divider = vec![0u8; divider_px as usize * 3];
    let mut pixels = Vec::with_capacity(width as usize * a.height() as usize * 3);
    for y in 0..a.height() {
        pixels.extend_from_slice(a.row(y));
        pixels.extend_from_slice(&divider);
        pixels.extend_from_slice(b.row(y));
    }
    Ok(RasterImage::new(width, a.height(), pixels).expect("dimensions computed"))
}

/// Whether `(x, y)` lies in the perimeter band of `b` that is `thickness`
/// pixels deep, measured inward from the box edge.
pub fn in_perimeter_band(b: &BBox, thickness: u32, x: u32, y: u32) -> bool {
    b.contains(x, y)
        && (x < b.x0.saturating_add(thickness)
            || x >= b.x1.saturating_sub(thickness)
            || y < b.y0.saturating_add(thickness)
            || y >= b.y1.saturating_sub(thickness))
}

pub fn draw_red_box(
    image: &RasterImage,
    b: &BBox,
    thickness_px: u32,
) -> Result<RasterImage, GeometryError> {
    check_bounds(image, b)?;
    if thickness_px == 0 {
        return Err(GeometryError::ZeroWidth("box thickness"));
    }
    let mut out = image.clone();
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            if in_perimeter_band(b, thickness_px, x, y) {
                out.put(x, y, RED);
            }
        }
    }
    Ok(out)
}

/// Highlights `b` in both images and joins them with the divider.
pub fn highlight_and_concat(
    left: &RasterImage,
    right: &RasterImage,
    b: &BBox,
    thickness_px: u32,
    divider_px: u32,
) -> Result<RasterImage, GeometryError> {
    let l = draw_red_box(left, b, thickness_px)?;
    let r = draw_red_box(right, b, thickness_px)?;
    concat_with_divider(&l, &r, divider_px)
}
