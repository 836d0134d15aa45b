use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::votes::{AnnotationVote, Metric, Score};

/// Outcome of one sample on one metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Majority(Score),
    Unresolved,
}

/// The score held by strictly more than half of `votes`, if any. Ties and
/// pluralities are unresolved.
pub fn resolve(votes: &[Score]) -> Option<Resolution> {
    if votes.is_empty() {
        return None;
    }
    for s in Score::ALL {
        let n = votes.iter().filter(|v| **v == s).count();
        if 2 * n > votes.len() {
            return Some(Resolution::Majority(s));
        }
    }
    Some(Resolution::Unresolved)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Buckets {
    pub high: u64,
    pub medium: u64,
    pub low: u64,
    pub unresolved: u64,
}

impl Buckets {
    fn add(&mut self, r: Resolution) {
        match r {
            Resolution::Majority(Score::High) => self.high += 1,
            Resolution::Majority(Score::Medium) => self.medium += 1,
            Resolution::Majority(Score::Low) => self.low += 1,
            Resolution::Unresolved => self.unresolved += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.high + self.medium + self.low + self.unresolved
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Percent {
    pub high: f64,
    pub medium: f64,
    pub low: f64,
    pub unresolved: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Samples with at least one vote on this metric; the percentage base.
    pub resolved_samples: u64,
    pub counts: Buckets,
    pub percent: Percent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub samples: u64,
    pub annotators: Vec<String>,
    pub votes: u64,
    pub metrics: BTreeMap<Metric, MetricReport>,
}

fn pct(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

/// Aggregates live votes. `samples` is the catalogue size; votes on ids
/// outside it are the caller's concern.
pub fn build_report(samples: u64, annotators: &[String], votes: &[AnnotationVote]) -> Report {
    let mut by_sample: BTreeMap<(Metric, &str), Vec<Score>> = BTreeMap::new();
    for v in votes {
        by_sample.entry((v.metric, v.sample_id.as_str())).or_default().push(v.score);
    }
    let mut metrics = BTreeMap::new();
    for m in Metric::ALL {
        let mut counts = Buckets::default();
        for ((_, _), scores) in by_sample.range((m, "")..).take_while(|((k, _), _)| *k == m) {
            if let Some(r) = resolve(scores) {
                counts.add(r);
            }
        }
        let d = counts.total();
        metrics.insert(
            m,
            MetricReport {
                resolved_samples: d,
                percent: Percent {
                    high: pct(counts.high, d),
                    medium: pct(counts.medium, d),
                    low: pct(counts.low, d),
                    unresolved: pct(counts.unresolved, d),
                },
                counts,
            },
        );
    }
    let annotators: BTreeSet<&String> = annotators.iter().collect();
    Report {
        samples,
        annotators: annotators.into_iter().cloned().collect(),
        votes: votes.len() as u64,
        metrics,
    }
}

impl Report {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{} samples, {} annotators, {} live votes\n{:<28} {:>8} {:>8} {:>8} {:>8} {:>11}\n",
            self.samples,
            self.annotators.len(),
            self.votes,
            "metric",
            "voted",
            "high%",
            "medium%",
            "low%",
            "unresolved%"
        );
        for (m, r) in &self.metrics {
            out.push_str(&format!(
                "{:<28} {:>8} {:>8.2} {:>8.2} {:>8.2} {:>11.2}\n",
                m.as_str(),
                r.resolved_samples,
                r.percent.high,
                r.percent.medium,
                r.percent.low,
                r.percent.unresolved
            ));
        }
        out
    }
}
