//! Pipeline thresholds and prompt templates.
//!
//! The configuration file is TOML. Threshold keys live at the top level and
//! use exactly the field names of [`ThresholdConfig`]; prompt templates live
//! in an optional `[prompts]` table. Any key that is not set takes its
//! default value.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse config: {0}")]
    Parse(String),
    #[error("config key `{key}` out of range: {value} (expected {bound})")]
    Range {
        key: &'static str,
        value: String,
        bound: &'static str,
    },
}

/// Every filtering threshold used by the pipeline.
///
/// Comparisons follow one convention throughout: "exceeds" gates are strict
/// `>` and "below" gates are strict `<`. The image-similarity band is closed
/// on both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    /// Lower edge of the whole-image similarity band (inclusive).
    pub is_low: f64,
    /// Upper edge of the whole-image similarity band (inclusive).
    pub is_high: f64,
    /// Box-level image-text matching gate: a sub-image holds a valid object
    /// when its score against an object name exceeds this.
    pub bitm: f64,
    /// Sub-image pairs count as different when their similarity is below this.
    pub diff_sim: f64,
    /// Segmentation regions are kept when their confidence exceeds this.
    pub seg_conf: f64,
    /// Overlap suppression threshold.
    pub iou: f64,
    /// Content-caption image-text matching gate.
    pub citm: f64,
    /// Two content captions count as different when their similarity is below this.
    pub cs: f64,
    /// Regions per pair handed to captioning.
    pub top_n: usize,
    /// Object-removal: a region contains an object when the cross-image
    /// sub-image similarity is below this.
    pub rm_contains_sim: f64,
    /// Object-removal: the original sub-image must match its description above this.
    pub rm_itm_pos: f64,
    /// Object-removal: the erased sub-image must match its description below this.
    pub rm_itm_neg: f64,
    pub divider_px: u32,
    pub box_thickness_px: u32,
    pub max_in_flight: usize,
    pub seed: u64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            is_low: 0.90,
            is_high: 0.98,
            bitm: 0.35,
            diff_sim: 0.85,
            seg_conf: 0.05,
            iou: 0.50,
            citm: 0.40,
            cs: 0.85,
            top_n: 5,
            rm_contains_sim: 0.90,
            rm_itm_pos: 0.35,
            rm_itm_neg: 0.20,
            divider_px: 20,
            box_thickness_px: 3,
            max_in_flight: 8,
            seed: 0,
        }
    }
}

impl ThresholdConfig {
    /// Key names as they appear in the config file, in declaration order.
    pub const KEYS: [&'static str; 16] = [
        "is_low",
        "is_high",
        "bitm",
        "diff_sim",
        "seg_conf",
        "iou",
        "citm",
        "cs",
        "top_n",
        "rm_contains_sim",
        "rm_itm_pos",
        "rm_itm_neg",
        "divider_px",
        "box_thickness_px",
        "max_in_flight",
        "seed",
    ];

    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit = [
            ("is_low", self.is_low),
            ("is_high", self.is_high),
            ("bitm", self.bitm),
            ("diff_sim", self.diff_sim),
            ("seg_conf", self.seg_conf),
            ("citm", self.citm),
            ("cs", self.cs),
            ("rm_contains_sim", self.rm_contains_sim),
            ("rm_itm_pos", self.rm_itm_pos),
            ("rm_itm_neg", self.rm_itm_neg),
        ];
        for (key, value) in unit {
            if !(0.0..=1.0).contains(&value) {
                return Err(range(key, value, "a value in [0, 1]"));
            }
        }
        if self.is_low >= self.is_high {
            return Err(range("is_low", self.is_low, "is_low < is_high"));
        }
        if !(self.iou > 0.0 && self.iou <= 1.0) {
            return Err(range("iou", self.iou, "a value in (0, 1]"));
        }
        if self.top_n < 1 {
            return Err(range("top_n", self.top_n, "top_n >= 1"));
        }
        if self.divider_px < 1 {
            return Err(range("divider_px", self.divider_px, "divider_px >= 1"));
        }
        if self.box_thickness_px < 1 {
            return Err(range("box_thickness_px", self.box_thickness_px, "box_thickness_px >= 1"));
        }
        if self.max_in_flight < 1 {
            return Err(range("max_in_flight", self.max_in_flight, "max_in_flight >= 1"));
        }
        Ok(())
    }

    /// `self` is at least as strict as `other` on every gate threshold, and
    /// the structural settings that shape the candidate pool are equal.
    pub fn at_least_as_strict_as(&self, other: &ThresholdConfig) -> bool {
        self.is_low >= other.is_low
            && self.is_high <= other.is_high
            && self.bitm >= other.bitm
            && self.diff_sim <= other.diff_sim
            && self.citm >= other.citm
            && self.cs <= other.cs
            && self.seg_conf == other.seg_conf
            && self.iou == other.iou
            && self.top_n == other.top_n
    }
}

fn range(key: &'static str, value: impl ToString, bound: &'static str) -> ConfigError {
    ConfigError::Range {
        key,
        value: value.to_string(),
        bound,
    }
}

/// Prompt and question templates. `{caption}`, `{caption_a}`, `{caption_b}`,
/// `{box}` and `{description}` are substituted where they appear.
///
/// Only `rewrite` and `removal_question` are canonical; the captioning
/// prompts and the replacement questions are editable defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplates {
    pub rewrite: String,
    pub region_caption: String,
    pub difference_caption: String,
    pub removal_description: String,
    pub removal_question: String,
    pub replacement_questions: Vec<String>,
}

pub const REWRITE_TEMPLATE: &str = "Here is a sentence: '{caption}'. Please only replace one of the objects in this sentence with another object.";
pub const REMOVAL_QUESTION_TEMPLATE: &str = "which image has the object related to '{description}' within the red bounding box? A. the left image B. the right image.";
pub const REMOVAL_PROMPT: &str = "background, nothing, 8k.";
pub const ANSWER_LEFT: &str = "A. the left image";
pub const ANSWER_RIGHT: &str = "B. the right image";

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            rewrite: REWRITE_TEMPLATE.to_owned(),
            region_caption: "Describe the main object in this image in a few words.".to_owned(),
            difference_caption: "The left image and the right image are separated by a black line. \
                The content inside the red box of the left image is: {caption_a}. \
                The content inside the red box of the right image is: {caption_b}. \
                Describe the difference between the objects inside the two red boxes."
                .to_owned(),
            removal_description: "Describe the object inside the region {box} of this image in a few words."
                .to_owned(),
            removal_question: REMOVAL_QUESTION_TEMPLATE.to_owned(),
            replacement_questions: vec![
                "What objects have changed in this area?".to_owned(),
                "What is different between the two images inside the red box?".to_owned(),
                "Compare the regions marked by the red boxes. What has changed?".to_owned(),
                "Describe how the object in the red box differs between the left and right images."
                    .to_owned(),
            ],
        }
    }
}

/// Thresholds plus templates: everything a run is parameterized by.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub thresholds: ThresholdConfig,
    pub prompts: PromptTemplates,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let prompts = match table.remove("prompts") {
            Some(value) => value
                .try_into::<PromptTemplates>()
                .map_err(|e| ConfigError::Parse(format!("[prompts]: {e}")))?,
            None => PromptTemplates::default(),
        };
        let thresholds: ThresholdConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        thresholds.validate()?;
        if prompts.replacement_questions.is_empty() {
            return Err(ConfigError::Parse(
                "[prompts].replacement_questions must not be empty".to_owned(),
            ));
        }
        Ok(Self { thresholds, prompts })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        let mut table = toml::Table::try_from(&self.thresholds).expect("thresholds serialize");
        table.insert(
            "prompts".to_owned(),
            toml::Value::try_from(&self.prompts).expect("prompts serialize"),
        );
        toml::to_string(&table).expect("config serializes")
    }

    /// Hex SHA-256 over the canonical JSON form of the config.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Loads the threshold part of a config file.
pub fn load_config(path: &Path) -> Result<ThresholdConfig, ConfigError> {
    RunConfig::load(path).map(|c| c.thresholds)
}
