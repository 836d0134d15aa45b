//! Shared domain types.

use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::raster::RasterImage;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("box ({x0},{y0},{x1},{y1}) has empty area")]
    EmptyBox { x0: u32, y0: u32, x1: u32, y1: u32 },
    #[error("invalid caption pair: {0}")]
    CaptionPair(String),
    #[error("mask is {mask_w}x{mask_h} but box is {box_w}x{box_h}")]
    MaskShape {
        mask_w: u32,
        mask_h: u32,
        box_w: u32,
        box_h: u32,
    },
    #[error("invalid mask encoding: {0}")]
    MaskEncoding(String),
}

/// Half-open pixel rectangle: `(x, y)` is inside iff `x0 <= x < x1` and
/// `y0 <= y < y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self, ModelError> {
        if x0 >= x1 || y0 >= y1 {
            return Err(ModelError::EmptyBox { x0, y0, x1, y1 });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self::new(0, 0, width, height).expect("image dimensions are non-zero")
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.x0 <= x && x < self.x1 && self.y0 <= y && y < self.y1
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w as u64 * h as u64
    }

    /// `[x0, y0, x1, y1]`, the form embedded in prompts.
    pub fn to_prompt_string(&self) -> String {
        format!("[{}, {}, {}, {}]", self.x0, self.y0, self.x1, self.y1)
    }

    pub fn slug(&self) -> String {
        format!("{}_{}_{}_{}", self.x0, self.y0, self.x1, self.y1)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            x0: u32,
            y0: u32,
            x1: u32,
            y1: u32,
        }
        let r = Raw::deserialize(deserializer)?;
        BBox::new(r.x0, r.y0, r.x1, r.y1).map_err(serde::de::Error::custom)
    }
}

/// Which image of a pair something came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::A => "a",
            Side::B => "b",
        }
    }

    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

/// Binary mask aligned to a box. Serialized as `{width, height, bits}` with
/// `bits` the row-major bits packed MSB-first, base64-encoded.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.width, self.height, self.count())
    }
}

impl Mask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, ModelError> {
        if bits.len() != width as usize * height as usize {
            return Err(ModelError::MaskEncoding(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self::new(width, height, vec![false; width as usize * height as usize])
            .expect("length matches")
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self::new(width, height, vec![true; width as usize * height as usize])
            .expect("length matches")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn fits(&self, bbox: &BBox) -> Result<(), ModelError> {
        if self.width != bbox.width() || self.height != bbox.height() {
            return Err(ModelError::MaskShape {
                mask_w: self.width,
                mask_h: self.height,
                box_w: bbox.width(),
                box_h: bbox.height(),
            });
        }
        Ok(())
    }

    fn pack(&self) -> Vec<u8> {
        self.bits
            .chunks(8)
            .map(|chunk| {
                chunk
                    .iter()
                    .enumerate()
                    .fold(0u8, |acc, (i, b)| acc | ((*b as u8) << (7 - i)))
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct PackedMask {
    width: u32,
    height: u32,
    bits: String,
}

impl Serialize for Mask {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        PackedMask {
            width: self.width,
            height: self.height,
            bits: base64::engine::general_purpose::STANDARD.encode(self.pack()),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let packed = PackedMask::deserialize(deserializer)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&packed.bits)
            .map_err(serde::de::Error::custom)?;
        let n = packed.width as usize * packed.height as usize;
        if bytes.len() != n.div_ceil(8) {
            return Err(serde::de::Error::custom(format!(
                "mask payload has {} bytes, expected {}",
                bytes.len(),
                n.div_ceil(8)
            )));
        }
        let bits = (0..n).map(|i| bytes[i / 8] & (1 << (7 - i % 8)) != 0).collect();
        Mask::new(packed.width, packed.height, bits).map_err(serde::de::Error::custom)
    }
}

/// An original caption and its single-object rewrite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub source_id: String,
    pub original: String,
    pub edited: String,
    pub replaced_object: String,
    pub replacement_object: String,
}

pub(crate) fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn contains_phrase(text: &str, phrase: &str) -> bool {
    let hay = tokens(text);
    let needle = tokens(phrase);
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

impl CaptionPair {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.original.trim() == self.edited.trim() {
            return Err(ModelError::CaptionPair("edited caption equals original".into()));
        }
        if !contains_phrase(&self.original, &self.replaced_object) {
            return Err(ModelError::CaptionPair(format!(
                "replaced object `{}` not found in original",
                self.replaced_object
            )));
        }
        if !contains_phrase(&self.edited, &self.replacement_object) {
            return Err(ModelError::CaptionPair(format!(
                "replacement object `{}` not found in edited",
                self.replacement_object
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub pair_id: String,
    pub image_a: RasterImage,
    pub image_b: RasterImage,
    pub captions: CaptionPair,
    pub seed: u64,
}

impl ImagePair {
    pub fn image(&self, side: Side) -> &RasterImage {
        match side {
            Side::A => &self.image_a,
            Side::B => &self.image_b,
        }
    }
}

/// A localized region with its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCandidate {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Mask>,
    pub seg_confidence: f64,
    /// `1 - cosine similarity` of the two sub-image embeddings; zero until
    /// the difference detector has scored the region.
    pub difference: f64,
    pub side: Side,
}

impl RegionCandidate {
    pub fn new(bbox: BBox, seg_confidence: f64, side: Side) -> Self {
        Self {
            bbox,
            mask: None,
            seg_confidence,
            difference: 0.0,
            side,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    ObjectReplacement,
    ObjectRemoval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Human,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerSide {
    Left,
    Right,
}

/// Everything needed to audit how a sample came to be.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub captions: CaptionPair,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_caption_a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_caption_b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difference_caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_side: Option<AnswerSide>,
    /// Side of the pair whose image was erased, for removal samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_side: Option<Side>,
    /// Gate scores recorded at acceptance time, keyed by gate name.
    #[serde(default)]
    pub scores: std::collections::BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceSample {
    pub sample_id: String,
    pub pair_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub kind: SampleKind,
    /// Path of the concatenated image, relative to the directory holding it.
    pub concat_image_ref: String,
    pub conversation: Vec<Turn>,
    pub provenance: Provenance,
}

impl DifferenceSample {
    pub fn conversation_is_well_formed(&self) -> bool {
        !self.conversation.is_empty()
            && self.conversation.iter().enumerate().all(|(i, t)| {
                t.role
                    == if i % 2 == 0 {
                        Role::Human
                    } else {
                        Role::Assistant
                    }
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_rejects_empty() {
        assert!(BBox::new(3, 0, 3, 5).is_err());
        assert!(BBox::new(0, 5, 1, 4).is_err());
        let b = BBox::new(1, 2, 4, 6).unwrap();
        assert_eq!((b.width(), b.height(), b.area()), (3, 4, 12));
        assert!(b.contains(1, 2) && !b.contains(4, 2) && !b.contains(1, 6));
        assert!(serde_json::from_str::<BBox>(r#"{"x0":5,"y0":0,"x1":5,"y1":1}"#).is_err());
    }

    #[test]
    fn caption_pair_checks() {
        let mut p = CaptionPair {
            source_id: "1".into(),
            original: "a man riding a horse".into(),
            edited: "a man riding a motorcycle".into(),
            replaced_object: "horse".into(),
            replacement_object: "motorcycle".into(),
        };
        p.validate().unwrap();
        p.replaced_object = "hor".into();
        assert!(p.validate().is_err());
        p.replaced_object = "horse".into();
        p.edited = p.original.clone();
        assert!(p.validate().is_err());
    }

    #[test]
    fn mask_serde_round_trip() {
        let bits: Vec<bool> = (0..35).map(|i| i % 3 == 0).collect();
        let m = Mask::new(7, 5, bits).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: Mask = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        assert!(m.fits(&BBox::new(0, 0, 7, 5).unwrap()).is_ok());
        assert!(m.fits(&BBox::new(0, 0, 5, 7).unwrap()).is_err());
    }

    #[test]
    fn conversation_alternation() {
        let turn = |role, text: &str| Turn {
            role,
            text: text.into(),
        };
        let mut s = DifferenceSample {
            sample_id: "s".into(),
            pair_id: "p".into(),
            bbox: BBox::new(0, 0, 1, 1).unwrap(),
            kind: SampleKind::ObjectReplacement,
            concat_image_ref: "x.png".into(),
            conversation: vec![turn(Role::Human, "q"), turn(Role::Assistant, "a")],
            provenance: Provenance {
                captions: CaptionPair {
                    source_id: "1".into(),
                    original: "a".into(),
                    edited: "b".into(),
                    replaced_object: "a".into(),
                    replacement_object: "b".into(),
                },
                content_caption_a: None,
                content_caption_b: None,
                difference_caption: None,
                description: None,
                answer_side: None,
                source_side: None,
                scores: Default::default(),
            },
        };
        assert!(s.conversation_is_well_formed());
        s.conversation.swap(0, 1);
        assert!(!s.conversation_is_well_formed());
    }
}
