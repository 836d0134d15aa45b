//! In-process backend over the synthetic scene world.
//!
//! - `rewrite_caption` substitutes one shape phrase via the fixed tables in
//!   [`crate::scene`]; captions naming no shape come back unchanged.
//! - `generate_pair` renders both captions on a shared seeded layout.
//! - `segment` returns one region per connected same-colored component (its
//!   exact box), a looser duplicate of each at lower confidence, and a
//!   whole-canvas region at confidence 0.03.
//! - `embed_image` is the 64-bin color histogram; `embed_text` a
//!   bag-of-words vector.
//! - `itm` is the token overlap between the text and [`scene::describe`] of
//!   the image.
//! - `mllm_complete` describes, in order of precedence: the `[x0, y0, x1, y1]`
//!   region named in the prompt; each side of a divider-split image
//!   (`LEFT: ..; RIGHT: ..`); the inside of a red box; the whole image.
//! - `inpaint` fills the mask with the most common color outside its box.
//!
//! With `noise > 0`, ITM scores and embeddings get a deterministic
//! perturbation derived from the request digest.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;

use super::protocol::{BackendError, BackendRequest, Output, Payload, SegmentRegion};
use super::Backend;
use crate::hash::stable_hash;
use crate::model::{BBox, Mask};
use crate::raster::{RasterImage, Rgb};
use crate::scene::{self, BACKGROUND};

#[derive(Debug, Clone, Default)]
pub struct SceneBackend {
    noise: f64,
}

impl SceneBackend {
    pub fn new() -> Self {
        Self { noise: 0.0 }
    }

    pub fn with_noise(noise: f64) -> Self {
        Self { noise }
    }

    /// Uniform in [-1, 1], a pure function of the request and `index`.
    fn jitter(&self, digest: &str, index: usize) -> f64 {
        let h = stable_hash(&format!("{digest}/{index}"));
        (h as f64 / u64::MAX as f64) * 2.0 - 1.0
    }
}

fn box_literal() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[(\d+), (\d+), (\d+), (\d+)\]").expect("static regex"))
}

/// Description of the red-boxed region of `image` restricted to `area`, or
/// of the whole area when it holds no red box.
fn describe_marked(image: &RasterImage, area: &BBox) -> Option<String> {
    match scene::red_box_in(image, area) {
        Some(b) => scene::describe_region(image, &b),
        None => scene::describe_region(image, area),
    }
}

fn describe_for_prompt(image: &RasterImage, prompt: &str) -> String {
    if let Some(c) = box_literal().captures(prompt) {
        let n = |i: usize| c[i].parse::<u32>().unwrap_or(0);
        if let Ok(b) = BBox::new(n(1), n(2), n(3), n(4)) {
            if b.within(image.width(), image.height()) {
                return scene::describe_region(image, &b).unwrap_or_else(|| "empty background".into());
            }
        }
    }
    if let Some((start, end)) = scene::find_divider(image) {
        let left = BBox::new(0, 0, start, image.height()).expect("divider not at column 0");
        let right = BBox::new(end, 0, image.width(), image.height()).expect("divider not at edge");
        let l = describe_marked(image, &left).unwrap_or_else(|| "nothing".into());
        let r = describe_marked(image, &right).unwrap_or_else(|| "nothing".into());
        return format!("LEFT: {l}; RIGHT: {r}");
    }
    describe_marked(image, &BBox::full(image.width(), image.height()))
        .unwrap_or_else(|| "empty background".into())
}

fn segment_image(image: &RasterImage) -> Vec<SegmentRegion> {
    let (w, h) = image.dimensions();
    let mut label = vec![usize::MAX; (w * h) as usize];
    let mut components: Vec<(Rgb, Vec<(u32, u32)>)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let idx = (y * w + x) as usize;
            let color = image.get(x, y);
            if color == BACKGROUND || label[idx] != usize::MAX {
                continue;
            }
            let id = components.len();
            let mut pixels = Vec::new();
            let mut stack = vec![(x, y)];
            label[idx] = id;
            while let Some((px, py)) = stack.pop() {
                pixels.push((px, py));
                let neighbors = [
                    (px.wrapping_sub(1), py),
                    (px + 1, py),
                    (px, py.wrapping_sub(1)),
                    (px, py + 1),
                ];
                for (nx, ny) in neighbors {
                    if nx < w && ny < h {
                        let n = (ny * w + nx) as usize;
                        if label[n] == usize::MAX && image.get(nx, ny) == color {
                            label[n] = id;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            components.push((color, pixels));
        }
    }

    let mask_for = |b: &BBox, id: Option<usize>| {
        let bits = (b.y0..b.y1)
            .flat_map(|y| (b.x0..b.x1).map(move |x| (x, y)))
            .map(|(x, y)| {
                let l = label[(y * w + x) as usize];
                match id {
                    Some(id) => l == id,
                    None => l != usize::MAX,
                }
            })
            .collect();
        Mask::new(b.width(), b.height(), bits).expect("mask sized to box")
    };

    let mut tight = Vec::new();
    let mut loose = Vec::new();
    for (id, (_, pixels)) in components.iter().enumerate() {
        let x0 = pixels.iter().map(|p| p.0).min().expect("non-empty component");
        let y0 = pixels.iter().map(|p| p.1).min().expect("non-empty component");
        let x1 = pixels.iter().map(|p| p.0).max().expect("non-empty component") + 1;
        let y1 = pixels.iter().map(|p| p.1).max().expect("non-empty component") + 1;
        let b = BBox::new(x0, y0, x1, y1).expect("component has pixels");
        let fill = pixels.len() as f64 / b.area() as f64;
        let confidence = 0.5 + 0.5 * fill;
        tight.push(SegmentRegion {
            bbox: b,
            mask: mask_for(&b, Some(id)),
            confidence,
        });
        let grown = BBox::new(
            x0.saturating_sub(2),
            y0.saturating_sub(2),
            (x1 + 2).min(w),
            (y1 + 2).min(h),
        )
        .expect("grown box non-empty");
        loose.push(SegmentRegion {
            bbox: grown,
            mask: mask_for(&grown, Some(id)),
            confidence: 0.6 * confidence,
        });
    }
    let mut regions = tight;
    regions.extend(loose);
    if !components.is_empty() {
        let full = BBox::full(w, h);
        regions.push(SegmentRegion {
            bbox: full,
            mask: mask_for(&full, None),
            confidence: 0.03,
        });
    }
    regions
}

fn inpaint_fill(image: &RasterImage, bbox: &BBox, mask: &Mask) -> RasterImage {
    let mut counts: HashMap<Rgb, usize> = HashMap::new();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if !bbox.contains(x, y) {
                *counts.entry(image.get(x, y)).or_default() += 1;
            }
        }
    }
    let fill = counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
        .unwrap_or(BACKGROUND);
    let mut out = image.clone();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                out.put(bbox.x0 + x, bbox.y0 + y, fill);
            }
        }
    }
    out
}

impl Backend for SceneBackend {
    fn call(&self, request: &BackendRequest) -> Result<Output, BackendError> {
        request.validate()?;
        let seed = request.seed.unwrap_or(0);
        let digest = if self.noise > 0.0 {
            request.digest()
        } else {
            String::new()
        };
        let output = match &request.payload {
            Payload::RewriteCaption { caption, .. } => match scene::rewrite(caption, seed) {
                Some((edited, old, new)) => Output::RewriteCaption {
                    edited,
                    replaced_object: Some(old),
                    replacement_object: Some(new),
                },
                None => Output::RewriteCaption {
                    edited: caption.clone(),
                    replaced_object: None,
                    replacement_object: None,
                },
            },
            Payload::GeneratePair { original, edited, .. } => {
                let (image_a, image_b) = scene::render_pair(original, edited, seed);
                Output::GeneratePair { image_a, image_b }
            }
            Payload::Inpaint {
                image, bbox, mask, ..
            } => {
                mask.fits(bbox)
                    .map_err(|e| BackendError::new(super::ErrorCode::BadRequest, e.to_string()))?;
                if !bbox.within(image.width(), image.height()) {
                    return Err(BackendError::new(
                        super::ErrorCode::BadRequest,
                        "mask box outside image",
                    ));
                }
                Output::Inpaint {
                    image: inpaint_fill(image, bbox, mask),
                }
            }
            Payload::EmbedImage { image } => {
                let mut v = scene::color_histogram(image);
                if self.noise > 0.0 {
                    for (i, x) in v.iter_mut().enumerate() {
                        *x *= 1.0 + self.noise * self.jitter(&digest, i);
                    }
                }
                Output::EmbedImage { embedding: v }
            }
            Payload::EmbedText { text } => {
                let mut v = scene::text_embedding(text);
                if self.noise > 0.0 {
                    for (i, x) in v.iter_mut().enumerate() {
                        *x += self.noise * (self.jitter(&digest, i) + 1.0) / 2.0;
                    }
                }
                Output::EmbedText { embedding: v }
            }
            Payload::Itm { image, text } => {
                let description = scene::describe(image).unwrap_or_default();
                let mut score = scene::token_overlap(text, &description);
                if self.noise > 0.0 {
                    score = (score + self.noise * self.jitter(&digest, 0)).clamp(0.0, 1.0);
                }
                Output::Itm { score }
            }
            Payload::Segment { image } => Output::Segment {
                regions: segment_image(image),
            },
            Payload::MllmComplete { image, prompt } => Output::MllmComplete {
                text: describe_for_prompt(image, prompt),
            },
        };
        Ok(output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::BackendClient;
    use crate::geometry::highlight_and_concat;
    use crate::scene::Scene;
    use std::sync::Arc;

    fn client() -> BackendClient {
        BackendClient::new(Arc::new(SceneBackend::new()))
    }

    #[test]
    fn segment_finds_exact_boxes() {
        let caption = "a red square, a blue circle and a green triangle";
        let scene = Scene::from_caption(caption, 3, 3);
        let img = scene.render();
        let result = client().segment(&img, 0.05, 0.5).unwrap();
        let mut got: Vec<BBox> = result.regions.iter().map(|r| r.bbox).collect();
        let mut want: Vec<BBox> = scene.objects.iter().map(|o| o.1).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
        let blank = RasterImage::filled(32, 32, BACKGROUND).unwrap();
        assert!(client().segment(&blank, 0.05, 0.5).unwrap().regions.is_empty());
    }

    #[test]
    fn itm_is_token_overlap() {
        let img = Scene::from_caption("a red square", 1, 1).render();
        let c = client();
        assert_eq!(c.itm(&img, "red square").unwrap(), 1.0);
        assert_eq!(c.itm(&img, "red circle").unwrap(), 0.5);
        assert_eq!(c.itm(&img, "blue circle").unwrap(), 0.0);
        assert!(c.itm(&img, "").is_err());
    }

    #[test]
    fn mllm_describes_red_boxes_across_divider() {
        let (a, b) = scene::render_pair("a red square", "a blue circle", 5);
        let target = Scene::from_caption("a red square", 5, 1).objects[0].1;
        let concat = highlight_and_concat(&a, &b, &target, 3, 20).unwrap();
        let text = client().mllm_complete(&concat, "describe", 1).unwrap();
        assert_eq!(text, "LEFT: red square; RIGHT: blue circle");
        let prompt = format!("Describe region {}", target.to_prompt_string());
        assert_eq!(client().mllm_complete(&a, &prompt, 1).unwrap(), "red square");
    }

    #[test]
    fn inpaint_erases_to_background() {
        let scene = Scene::from_caption("a red square and a blue circle", 9, 2);
        let img = scene.render();
        let c = client();
        let seg = c.segment(&img, 0.05, 0.5).unwrap();
        let region = &seg.regions[0];
        let out = c
            .inpaint(&img, &region.bbox, &region.mask, "background, nothing, 8k.", 4)
            .unwrap();
        for y in 0..img.height() {
            for x in 0..img.width() {
                if region.bbox.contains(x, y) {
                    assert_eq!(out.get(x, y), BACKGROUND);
                } else {
                    assert_eq!(out.get(x, y), img.get(x, y));
                }
            }
        }
        let empty = Mask::empty(region.bbox.width(), region.bbox.height());
        assert_eq!(c.inpaint(&img, &region.bbox, &empty, "p", 4).unwrap(), img);
    }

    #[test]
    fn noise_is_deterministic_and_bounded() {
        let noisy = BackendClient::new(Arc::new(SceneBackend::with_noise(0.3)));
        let img = Scene::from_caption("a red square", 1, 1).render();
        let s1 = noisy.itm(&img, "red circle").unwrap();
        let s2 = noisy.itm(&img, "red circle").unwrap();
        assert_eq!(s1, s2);
        assert!((0.2..=0.8).contains(&s1));
    }
}
