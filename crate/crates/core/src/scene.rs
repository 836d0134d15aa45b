//! Synthetic scenes: flat-colored shapes on a plain canvas, rendered from
//! captions such as "a red square and a blue circle".
//!
//! Everything here is a pure function of its inputs, which makes the scene
//! world usable both as a stub backend and as ground truth in tests.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use crate::geometry::{BLACK, RED};
use crate::model::{tokens, BBox};
use crate::raster::{RasterImage, Rgb};

pub const BACKGROUND: Rgb = [200, 200, 200];
pub const CELL: u32 = 64;
const MIN_SIZE: u32 = 24;
const MAX_SIZE: u32 = 60;

pub const COLORS: [(&str, Rgb); 6] = [
    ("red", [200, 30, 30]),
    ("green", [30, 160, 60]),
    ("blue", [40, 60, 200]),
    ("yellow", [230, 210, 40]),
    ("purple", [130, 40, 170]),
    ("orange", [240, 140, 20]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn parse(name: &str) -> Option<Shape> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Rewrite substitution: square -> circle -> triangle -> square.
    pub fn substitute(self) -> Shape {
        match self {
            Shape::Square => Shape::Circle,
            Shape::Circle => Shape::Triangle,
            Shape::Triangle => Shape::Square,
        }
    }

    /// Whether pixel `(x, y)` is covered when drawn into `b` (square boxes).
    fn covers(self, b: &BBox, x: u32, y: u32) -> bool {
        let s = b.width() as i64;
        let (x, y) = (x as i64, y as i64);
        let (x0, y0) = (b.x0 as i64, b.y0 as i64);
        match self {
            Shape::Square => true,
            Shape::Circle => {
                let dx = 2 * x + 1 - (2 * x0 + s);
                let dy = 2 * y + 1 - (2 * y0 + s);
                dx * dx + dy * dy <= s * s
            }
            Shape::Triangle => (2 * x + 1 - (2 * x0 + s)).abs() <= y - y0 + 1,
        }
    }
}

pub fn color_rgb(name: &str) -> Option<Rgb> {
    COLORS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

fn color_name(rgb: Rgb) -> Option<&'static str> {
    COLORS.iter().find(|(_, c)| *c == rgb).map(|(n, _)| *n)
}

/// Rewrite substitution over the palette, cycling in palette order.
pub fn substitute_color(name: &str) -> &'static str {
    let i = COLORS.iter().position(|(n, _)| *n == name).unwrap_or(0);
    COLORS[(i + 1) % COLORS.len()].0
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneObject {
    pub color: &'static str,
    pub shape: Shape,
}

impl SceneObject {
    pub fn name(&self) -> String {
        format!("{} {}", self.color, self.shape.name())
    }
}

fn object_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let colors: Vec<&str> = COLORS.iter().map(|(n, _)| *n).collect();
        Regex::new(&format!(
            r"(?i)\b({})\s+(square|circle|triangle)s?\b",
            colors.join("|")
        ))
        .expect("static regex")
    })
}

/// Objects mentioned in `caption`, in order of appearance.
pub fn parse_objects(caption: &str) -> Vec<SceneObject> {
    object_regex()
        .captures_iter(caption)
        .map(|c| {
            let color = c[1].to_lowercase();
            SceneObject {
                color: COLORS.iter().find(|(n, _)| *n == color).expect("regex alternation").0,
                shape: Shape::parse(&c[2].to_lowercase()).expect("regex alternation"),
            }
        })
        .collect()
}

/// Replaces the object picked by `seed` with its substitute. Returns the edited
/// caption and the (replaced, replacement) object names, or `None` when the
/// caption names no object.
pub fn rewrite(caption: &str, seed: u64) -> Option<(String, String, String)> {
    let matches: Vec<regex::Match> = object_regex().find_iter(caption).collect();
    if matches.is_empty() {
        return None;
    }
    let idx = (seed % matches.len() as u64) as usize;
    let objects = parse_objects(caption);
    let old = &objects[idx];
    let new = SceneObject {
        color: substitute_color(old.color),
        shape: old.shape.substitute(),
    };
    let m = matches[idx];
    let edited = format!("{}{}{}", &caption[..m.start()], new.name(), &caption[m.end()..]);
    Some((edited, old.name(), new.name()))
}

/// Placement of `count` objects for a given seed: one object per grid cell,
/// cells shuffled, sizes and offsets drawn per object. Depends only on
/// `(count, seed)` so both images of a pair share the layout.
pub fn layout(count: usize, seed: u64) -> (u32, u32, Vec<BBox>) {
    let (cols, rows) = if count <= 4 { (2, 2) } else { (4, 2) };
    let (width, height) = (cols * CELL, rows * CELL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<u32> = (0..cols * rows).collect();
    cells.shuffle(&mut rng);
    let boxes = cells
        .iter()
        .take(count.min((cols * rows) as usize))
        .map(|&cell| {
            let size = rng.random_range(MIN_SIZE..=MAX_SIZE);
            let slack = CELL - 4 - size;
            let ox = 2 + rng.random_range(0..=slack);
            let oy = 2 + rng.random_range(0..=slack);
            let cx = (cell % cols) * CELL + ox;
            let cy = (cell / cols) * CELL + oy;
            BBox::new(cx, cy, cx + size, cy + size).expect("size > 0")
        })
        .collect();
    (width, height, boxes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    pub objects: Vec<(SceneObject, BBox)>,
}

impl Scene {
    /// Lays out the objects of `caption`. `slots` fixes the grid size so two
    /// captions of one pair share a canvas.
    pub fn from_caption(caption: &str, seed: u64, slots: usize) -> Scene {
        let objects = parse_objects(caption);
        let (width, height, boxes) = layout(slots.max(objects.len()), seed);
        Scene {
            width,
            height,
            objects: objects.into_iter().zip(boxes).collect(),
        }
    }

    pub fn render(&self) -> RasterImage {
        let mut img = RasterImage::filled(self.width, self.height, BACKGROUND).expect("non-empty canvas");
        for (obj, b) in &self.objects {
            let rgb = color_rgb(obj.color).expect("palette color");
            for y in b.y0..b.y1 {
                for x in b.x0..b.x1 {
                    if obj.shape.covers(b, x, y) {
                        img.put(x, y, rgb);
                    }
                }
            }
        }
        img
    }
}

/// Renders both captions of a pair on a shared layout.
pub fn render_pair(original: &str, edited: &str, seed: u64) -> (RasterImage, RasterImage) {
    let slots = parse_objects(original).len().max(parse_objects(edited).len());
    let a = Scene::from_caption(original, seed, slots).render();
    let b = Scene::from_caption(edited, seed, slots).render();
    (a, b)
}

/// 64-bin color histogram: two bits per channel.
pub fn color_histogram(image: &RasterImage) -> Vec<f64> {
    let mut bins = vec![0.0; 64];
    for [r, g, b] in image.iter_pixels() {
        let i = ((r >> 6) as usize) << 4 | ((g >> 6) as usize) << 2 | (b >> 6) as usize;
        bins[i] += 1.0;
    }
    bins
}

/// Names the dominant palette object in `image` ("red square"), or `None`
/// when no palette pixel is present. Pure red, black and the background are
/// ignored.
pub fn describe(image: &RasterImage) -> Option<String> {
    describe_region(image, &BBox::full(image.width(), image.height()))
}

pub fn describe_region(image: &RasterImage, region: &BBox) -> Option<String> {
    let mut counts = [0usize; COLORS.len()];
    for y in region.y0..region.y1 {
        for x in region.x0..region.x1 {
            let px = image.get(x, y);
            if px == BACKGROUND || px == RED || px == BLACK {
                continue;
            }
            if let Some(i) = COLORS.iter().position(|(_, c)| *c == px) {
                counts[i] += 1;
            }
        }
    }
    let (best, &n) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    if n == 0 {
        return None;
    }
    let rgb = COLORS[best].1;
    let rows: Vec<u32> = (region.y0..region.y1)
        .map(|y| (region.x0..region.x1).filter(|&x| image.get(x, y) == rgb).count() as u32)
        .filter(|&n| n > 0)
        .collect();
    Some(format!("{} {}", color_name(rgb).expect("palette"), classify_rows(&rows).name()))
}

/// Shape from the per-row widths of a flat-colored blob. Constant widths
/// read as a square, widths peaking on the last row as a triangle (apex up),
/// anything else as a circle. Still works when a box band clips the blob.
fn classify_rows(rows: &[u32]) -> Shape {
    let max = rows.iter().copied().max().unwrap_or(0);
    let min = rows.iter().copied().min().unwrap_or(0);
    if max - min <= 1 {
        Shape::Square
    } else if rows.last() == Some(&max) {
        Shape::Triangle
    } else {
        Shape::Circle
    }
}

/// Fraction of the distinct tokens of `text` that occur in `description`.
pub fn token_overlap(text: &str, description: &str) -> f64 {
    let mut want = tokens(text);
    want.sort();
    want.dedup();
    if want.is_empty() {
        return 0.0;
    }
    let have = tokens(description);
    let hits = want.iter().filter(|t| have.contains(t)).count();
    hits as f64 / want.len() as f64
}

/// Bag-of-words text embedding: one dimension per palette color and shape,
/// remaining words hashed into the other dimensions.
pub fn text_embedding(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; 64];
    let fixed = COLORS.len() + Shape::ALL.len();
    for t in tokens(text) {
        let idx = if let Some(i) = COLORS.iter().position(|(n, _)| *n == t) {
            i
        } else if let Some(i) = Shape::ALL.iter().position(|s| s.name() == t) {
            COLORS.len() + i
        } else {
            fixed + (crate::hash::stable_hash(&t) % (64 - fixed) as u64) as usize
        };
        v[idx] += 1.0;
    }
    v
}

/// Finds a full-height run of black columns and returns `(start, end)` of
/// the divider.
pub fn find_divider(image: &RasterImage) -> Option<(u32, u32)> {
    let is_black = |x: u32| (0..image.height()).all(|y| image.get(x, y) == BLACK);
    let start = (1..image.width()).find(|&x| is_black(x))?;
    let end = (start..image.width()).find(|&x| !is_black(x)).unwrap_or(image.width());
    (end < image.width()).then_some((start, end))
}

/// Bounding box of the pure-red pixels in `region`.
pub fn red_box_in(image: &RasterImage, region: &BBox) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for y in region.y0..region.y1 {
        for x in region.x0..region.x1 {
            if image.get(x, y) == RED {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    BBox::new(x0, y0, x1, y1).ok()
}

/// Caption corpus for synthetic runs. Roughly one caption in twenty names no
/// object, which the scene rewrite turns into a no-op.
pub fn synthetic_captions(count: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let id = format!("cap{i:05}");
            if rng.random_range(0..20) == 0 {
                return (id, "an empty grey canvas".to_owned());
            }
            let n = rng.random_range(1..=4);
            let objs: Vec<String> = (0..n)
                .map(|_| {
                    let c = COLORS[rng.random_range(0..COLORS.len())].0;
                    let s = Shape::ALL[rng.random_range(0..3)].name();
                    format!("a {c} {s}")
                })
                .collect();
            let text = match objs.len() {
                1 => objs[0].clone(),
                _ => format!("{} and {}", objs[..objs.len() - 1].join(", "), objs[objs.len() - 1]),
            };
            (id, text)
        })
        .collect()
}
