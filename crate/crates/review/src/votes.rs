use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    BboxDifference,
    ContentCaptionAccuracy,
    DifferenceCaptionAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 3] = [
        Metric::BboxDifference,
        Metric::ContentCaptionAccuracy,
        Metric::DifferenceCaptionAccuracy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::BboxDifference => "bbox_difference",
            Metric::ContentCaptionAccuracy => "content_caption_accuracy",
            Metric::DifferenceCaptionAccuracy => "difference_caption_accuracy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Score {
    High,
    Medium,
    Low,
}

impl Score {
    pub const ALL: [Score; 3] = [Score::High, Score::Medium, Score::Low];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationVote {
    pub sample_id: String,
    pub annotator_id: String,
    pub metric: Metric,
    pub score: Score,
    /// Unix milliseconds; the service fills it when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl AnnotationVote {
    pub fn key(&self) -> VoteKey {
        (self.sample_id.clone(), self.annotator_id.clone(), self.metric)
    }
}

pub type VoteKey = (String, String, Metric);

/// Append-only JSONL log of votes. The live vote for a key is the last one
/// written; a torn final line (crash mid-write) is ignored on open.
#[derive(Debug)]
pub struct VoteStore {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

#[derive(Debug)]
struct Inner {
    file: Option<File>,
    live: BTreeMap<VoteKey, AnnotationVote>,
}

impl VoteStore {
    /// A store that keeps votes in memory only.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            inner: Mutex::new(Inner {
                file: None,
                live: BTreeMap::new(),
            }),
        }
    }

    pub fn open(path: &Path) -> io::Result<Self> {
        let mut live = BTreeMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            let complete = text.ends_with('\n');
            let lines: Vec<&str> = text.lines().collect();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<AnnotationVote>(line) {
                    Ok(v) => {
                        live.insert(v.key(), v);
                    }
                    Err(_) if i + 1 == lines.len() && !complete => {}
                    Err(e) => {
                        return Err(io::Error::new(
                            io::ErrorKind::InvalidData,
                            format!("{}:{}: {e}", path.display(), i + 1),
                        ))
                    }
                }
            }
            if !complete && !text.is_empty() {
                // Drop the torn tail so later appends start on a fresh line.
                let keep = text.rfind('\n').map(|i| i + 1).unwrap_or(0);
                let f = OpenOptions::new().write(true).open(path)?;
                f.set_len(keep as u64)?;
                f.sync_all()?;
            }
        } else if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: Some(path.to_owned()),
            inner: Mutex::new(Inner { file: Some(file), live }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Persists `vote` (synced before returning) and makes it live.
    pub fn put(&self, vote: AnnotationVote) -> io::Result<()> {
        let mut line = serde_json::to_vec(&vote).map_err(io::Error::other)?;
        line.push(b'\n');
        let mut inner = self.inner.lock().expect("vote store lock");
        if let Some(f) = inner.file.as_mut() {
            f.write_all(&line)?;
            f.sync_data()?;
        }
        inner.live.insert(vote.key(), vote);
        Ok(())
    }

    pub fn live(&self) -> Vec<AnnotationVote> {
        self.inner.lock().expect("vote store lock").live.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("vote store lock").live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The annotator's live scores for one sample.
    pub fn votes_of(&self, sample_id: &str, annotator_id: &str) -> BTreeMap<Metric, Score> {
        let inner = self.inner.lock().expect("vote store lock");
        Metric::ALL
            .iter()
            .filter_map(|m| {
                inner
                    .live
                    .get(&(sample_id.to_owned(), annotator_id.to_owned(), *m))
                    .map(|v| (*m, v.score))
            })
            .collect()
    }
}
