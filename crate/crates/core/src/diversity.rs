//! Object-name diversity over the replacement metadata of emitted samples.
//!
//! Names are normalized by lowercasing, collapsing whitespace and a fixed
//! singularization rule applied to the last word:
//!
//! | suffix                        | becomes        |
//! |-------------------------------|----------------|
//! | `ies` (word longer than 4)    | `y`            |
//! | `sses` `xes` `zes` `ches` `shes` | drop `es`   |
//! | `s`, not `ss` `us` `is`       | drop `s`       |
//!
//! Anything else is left alone. The rule is deliberately small and may not
//! match other tools' counts.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::CaptionPair;

fn singular(word: &str) -> String {
    if word.len() > 4 {
        if let Some(stem) = word.strip_suffix("ies") {
            return format!("{stem}y");
        }
    }
    for suffix in ["ches", "shes", "sses", "xes", "zes"] {
        if word.len() > suffix.len() + 1 && word.ends_with(suffix) {
            return word[..word.len() - 2].to_owned();
        }
    }
    if word.len() > 2 && word.ends_with('s') && !["ss", "us", "is"].iter().any(|s| word.ends_with(s)) {
        return word[..word.len() - 1].to_owned();
    }
    word.to_owned()
}

pub fn normalize_name(name: &str) -> String {
    let lower = name.to_lowercase();
    let mut words: Vec<&str> = lower.split_whitespace().collect();
    let Some(last) = words.pop() else {
        return String::new();
    };
    let last = singular(last);
    words.push(&last);
    words.join(" ")
}

/// Occurrence counts that can be built in parallel and merged.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversityTally {
    pub names: BTreeMap<String, u64>,
    pub pairs: BTreeSet<(String, String)>,
}

impl DiversityTally {
    pub fn add(&mut self, pair: &CaptionPair) {
        let a = normalize_name(&pair.replaced_object);
        let b = normalize_name(&pair.replacement_object);
        *self.names.entry(a.clone()).or_default() += 1;
        *self.names.entry(b.clone()).or_default() += 1;
        self.pairs.insert((a, b));
    }

    pub fn merge(&mut self, other: &DiversityTally) {
        for (k, v) in &other.names {
            *self.names.entry(k.clone()).or_default() += v;
        }
        self.pairs.extend(other.pairs.iter().cloned());
    }

    pub fn stats(&self, vocab: Option<&[String]>) -> DiversityStats {
        let categories = self.names.len() as u64;
        let total_occurrences: u64 = self.names.values().sum();
        let mut out = DiversityStats {
            categories,
            replacement_pairs: self.pairs.len() as u64,
            total_occurrences,
            avg_per_name: ratio(total_occurrences, categories),
            vocab_size: None,
            vocab_categories: None,
            vocab_occurrences: None,
            vocab_avg: None,
            vocab_fraction: None,
        };
        if let Some(vocab) = vocab {
            let vocab: BTreeSet<String> = vocab.iter().map(|v| normalize_name(v)).filter(|v| !v.is_empty()).collect();
            let hits: Vec<u64> = self
                .names
                .iter()
                .filter(|(k, _)| vocab.contains(*k))
                .map(|(_, v)| *v)
                .collect();
            let occ: u64 = hits.iter().sum();
            out.vocab_size = Some(vocab.len() as u64);
            out.vocab_categories = Some(hits.len() as u64);
            out.vocab_occurrences = Some(occ);
            out.vocab_avg = Some(ratio(occ, vocab.len() as u64));
            out.vocab_fraction = Some(ratio(occ, total_occurrences));
        }
        out
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    pub categories: u64,
    pub replacement_pairs: u64,
    pub total_occurrences: u64,
    pub avg_per_name: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<u64>,
    /// Vocabulary names that occur at least once.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_categories: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_occurrences: Option<u64>,
    /// Vocabulary occurrences per vocabulary name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_avg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_fraction: Option<f64>,
}

impl DiversityStats {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "categories {}\nreplacement pairs {}\ntotal occurrences {}\navg per name {:.2}\n",
            self.categories, self.replacement_pairs, self.total_occurrences, self.avg_per_name
        );
        if let (Some(occ), Some(avg), Some(frac)) = (self.vocab_occurrences, self.vocab_avg, self.vocab_fraction) {
            s += &format!("vocab occurrences {occ}\nvocab avg {avg:.2}\nvocab fraction {:.2}%\n", frac * 100.0);
        }
        s
    }
}

pub fn diversity_report<'a>(pairs: impl IntoIterator<Item = &'a CaptionPair>, vocab: Option<&[String]>) -> DiversityStats {
    let mut t = DiversityTally::default();
    for p in pairs {
        t.add(p);
    }
    t.stats(vocab)
}

/// Reads a vocabulary file: one name per line, blank lines and `#` comments
/// ignored.
pub fn parse_vocab(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(a: &str, b: &str) -> CaptionPair {
        CaptionPair {
            source_id: "x".into(),
            original: a.into(),
            edited: b.into(),
            replaced_object: a.into(),
            replacement_object: b.into(),
        }
    }

    #[test]
    fn singularization_rule() {
        for (i, o) in [
            ("Horses", "horse"),
            ("boxes", "box"),
            ("benches", "bench"),
            ("berries", "berry"),
            ("ties", "tie"),
            ("glass", "glass"),
            ("bus", "bus"),
            ("red  Glasses", "red glass"),
            ("cactus", "cactus"),
            ("tennis", "tennis"),
            ("cars", "car"),
        ] {
            assert_eq!(normalize_name(i), o, "{i}");
        }
    }

    #[test]
    fn hand_count() {
        let s = diversity_report(&[pair("horse", "motorcycle"), pair("horse", "car")], None);
        assert_eq!((s.categories, s.replacement_pairs, s.total_occurrences), (3, 2, 4));
        assert_eq!(format!("{:.2}", s.avg_per_name), "1.33");
        assert!(s.to_table().contains("avg per name 1.33"));
    }

    #[test]
    fn merge_matches_single_pass() {
        let all = [pair("cat", "dog"), pair("Cats", "bird"), pair("dog", "cat")];
        let mut a = DiversityTally::default();
        a.add(&all[0]);
        let mut b = DiversityTally::default();
        b.add(&all[1]);
        b.add(&all[2]);
        b.merge(&a);
        assert_eq!(b.stats(None), diversity_report(&all, None));
    }

    #[test]
    fn vocab_stats() {
        let vocab = parse_vocab("# names\ncat\n\ndogs\nfish\n");
        let s = diversity_report(&[pair("cat", "dog"), pair("cat", "bird")], Some(&vocab));
        assert_eq!(s.vocab_size, Some(3));
        assert_eq!(s.vocab_categories, Some(2));
        assert_eq!(s.vocab_occurrences, Some(3));
        assert_eq!(s.vocab_avg, Some(1.0));
        assert_eq!(s.vocab_fraction, Some(0.75));
    }
}
