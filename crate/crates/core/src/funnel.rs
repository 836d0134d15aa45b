//! Per-stage accounting.
//!
//! Each stage reports how many units entered, how many were kept, how many
//! were dropped (by reason) and how many were quarantined. Conservation
//! (`in = kept + dropped + quarantined`) must hold exactly, and a stage's
//! `in` must equal its upstream stage's `kept`. Stages whose unit expands
//! (a pair yields several regions) carry a nested item-level row with the
//! same law.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub unit: String,
    #[serde(rename = "in")]
    pub input: u64,
    pub kept: u64,
    pub dropped: BTreeMap<String, u64>,
    pub quarantined: u64,
}

impl Counts {
    pub fn new(unit: &str) -> Self {
        Self {
            unit: unit.to_owned(),
            ..Self::default()
        }
    }

    pub fn drop(&mut self, reason: &str, n: u64) {
        *self.dropped.entry(reason.to_owned()).or_default() += n;
    }

    pub fn dropped_total(&self) -> u64 {
        self.dropped.values().sum()
    }

    pub fn is_conserved(&self) -> bool {
        self.input == self.kept + self.dropped_total() + self.quarantined
    }

    pub fn merge(&mut self, other: &Counts) {
        self.input += other.input;
        self.kept += other.kept;
        self.quarantined += other.quarantined;
        for (k, v) in &other.dropped {
            self.drop(k, *v);
        }
    }
}

/// An item set aside because of a backend or contract failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quarantine {
    pub stage: String,
    pub item: String,
    pub code: String,
    pub message: String,
}

impl Quarantine {
    pub fn new(stage: &str, item: impl Into<String>, err: &crate::backend::CallError) -> Self {
        Self {
            stage: stage.to_owned(),
            item: item.into(),
            code: err.code().to_owned(),
            message: err.to_string(),
        }
    }
}

/// An item that failed a gate. `scores` holds the values the gate saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub stage: String,
    pub item: String,
    pub reason: String,
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
}

impl Rejection {
    pub fn new(stage: &str, item: impl Into<String>, reason: &str) -> Self {
        Self {
            stage: stage.to_owned(),
            item: item.into(),
            reason: reason.to_owned(),
            scores: BTreeMap::new(),
        }
    }

    pub fn score(mut self, key: &str, value: f64) -> Self {
        self.scores.insert(key.to_owned(), value);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub stage: String,
    /// Stage whose `kept` feeds this one; `None` for the first stage.
    pub upstream: Option<String>,
    #[serde(flatten)]
    pub counts: Counts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Counts>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FunnelViolation {
    #[error("stage {stage}: {unit} counts not conserved (in {input}, out {out})")]
    NotConserved {
        stage: String,
        unit: String,
        input: u64,
        out: u64,
    },
    #[error("stage {stage}: in {input} != upstream {upstream} kept {kept}")]
    Chain {
        stage: String,
        upstream: String,
        input: u64,
        kept: u64,
    },
    #[error("stage {stage}: unknown upstream {upstream}")]
    UnknownUpstream { stage: String, upstream: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelReport {
    pub stages: Vec<StageCounts>,
}

impl FunnelReport {
    pub fn push(&mut self, stage: StageCounts) {
        self.stages.retain(|s| s.stage != stage.stage);
        self.stages.push(stage);
    }

    pub fn get(&self, stage: &str) -> Option<&StageCounts> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn violations(&self) -> Vec<FunnelViolation> {
        let mut out = Vec::new();
        for s in &self.stages {
            for c in std::iter::once(&s.counts).chain(s.items.as_ref()) {
                if !c.is_conserved() {
                    out.push(FunnelViolation::NotConserved {
                        stage: s.stage.clone(),
                        unit: c.unit.clone(),
                        input: c.input,
                        out: c.kept + c.dropped_total() + c.quarantined,
                    });
                }
            }
            if let Some(up) = &s.upstream {
                match self.get(up) {
                    Some(u) if u.counts.kept != s.counts.input => out.push(FunnelViolation::Chain {
                        stage: s.stage.clone(),
                        upstream: up.clone(),
                        input: s.counts.input,
                        kept: u.counts.kept,
                    }),
                    Some(_) => {}
                    None => out.push(FunnelViolation::UnknownUpstream {
                        stage: s.stage.clone(),
                        upstream: up.clone(),
                    }),
                }
            }
        }
        out
    }

    pub fn is_conserved(&self) -> bool {
        self.violations().is_empty()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:<8} {:>8} {:>8} {:>8} {:>8}  dropped by reason",
            "stage", "unit", "in", "kept", "dropped", "quar."
        );
        let mut row = |name: &str, c: &Counts| {
            let reasons: Vec<String> = c.dropped.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let _ = writeln!(
                out,
                "{:<16} {:<8} {:>8} {:>8} {:>8} {:>8}  {}",
                name,
                c.unit,
                c.input,
                c.kept,
                c.dropped_total(),
                c.quarantined,
                reasons.join(", ")
            );
        };
        for s in &self.stages {
            row(&s.stage, &s.counts);
            if let Some(items) = &s.items {
                row("  (items)", items);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage(name: &str, upstream: Option<&str>, input: u64, kept: u64, dropped: u64, q: u64) -> StageCounts {
        let mut c = Counts::new("pair");
        c.input = input;
        c.kept = kept;
        if dropped > 0 {
            c.drop("low", dropped);
        }
        c.quarantined = q;
        StageCounts {
            stage: name.into(),
            upstream: upstream.map(str::to_owned),
            counts: c,
            items: None,
        }
    }

    #[test]
    fn single_stage_conserves() {
        let mut r = FunnelReport::default();
        r.push(stage("s1", None, 10, 7, 2, 1));
        assert!(r.is_conserved());
        r.push(stage("s1", None, 10, 7, 2, 2));
        assert_eq!(r.stages.len(), 1);
        assert!(!r.is_conserved());
    }

    #[test]
    fn chained_stages() {
        let mut r = FunnelReport::default();
        r.push(stage("s1", None, 10, 7, 3, 0));
        r.push(stage("s2", Some("s1"), 7, 5, 2, 0));
        assert!(r.is_conserved());
        r.push(stage("s3", Some("s2"), 6, 6, 0, 0));
        assert!(matches!(r.violations()[..], [FunnelViolation::Chain { .. }]));
    }

    #[test]
    fn table_lists_every_stage() {
        let mut r = FunnelReport::default();
        r.push(stage("captions", None, 3, 2, 0, 1));
        let t = r.to_table();
        assert!(t.contains("captions"));
        assert_eq!(t.lines().count(), 2);
    }
}
