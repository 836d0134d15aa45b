//! Append-only call transcripts and the scripted backend that answers from
//! them.
//!
//! A transcript is line-delimited JSON, one [`TranscriptEntry`] per distinct
//! request digest. The same file format serves as a hand-written fixture for
//! [`ScriptedBackend`], so replaying a recorded run is just scripting it with
//! its own transcript.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::protocol::{BackendError, BackendRequest, ErrorCode, Output, Payload};
use super::Backend;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Output>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<BackendError>,
}

impl TranscriptEntry {
    fn from_outcome(digest: String, outcome: &Result<Output, BackendError>) -> Self {
        match outcome {
            Ok(o) => Self {
                digest,
                output: Some(o.clone()),
                error: None,
            },
            Err(e) => Self {
                digest,
                output: None,
                error: Some(e.clone()),
            },
        }
    }

    fn into_outcome(self) -> std::io::Result<(String, Result<Output, BackendError>)> {
        match (self.output, self.error) {
            (Some(o), None) => Ok((self.digest, Ok(o))),
            (None, Some(e)) => Ok((self.digest, Err(e))),
            _ => Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("entry {} must hold exactly one of output/error", self.digest),
            )),
        }
    }
}

type Outcomes = HashMap<String, Result<Output, BackendError>>;

/// Reads a transcript. A truncated final line (an interrupted append) is
/// ignored; any other malformed line is an error.
pub fn read_transcript(path: &Path) -> std::io::Result<Outcomes> {
    let file = File::open(path)?;
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
    let mut out = HashMap::new();
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: TranscriptEntry = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(_) if i == last => break,
            Err(e) => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), i + 1),
                ))
            }
        };
        let (digest, outcome) = entry.into_outcome()?;
        out.entry(digest).or_insert(outcome);
    }
    Ok(out)
}

/// Answers requests by digest. Unknown digests are an explicit
/// `missing_fixture` error.
#[derive(Debug, Default, Clone)]
pub struct ScriptedBackend {
    entries: Outcomes,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            entries: read_transcript(path)?,
        })
    }

    /// Scripts the response for the request `(seed, payload)`.
    pub fn script(&mut self, seed: Option<u64>, payload: Payload, outcome: Result<Output, BackendError>) {
        let probe = BackendRequest {
            request_id: String::new(),
            seed,
            payload,
        };
        self.entries.insert(probe.digest(), outcome);
    }

    pub fn with(mut self, seed: Option<u64>, payload: Payload, output: Output) -> Self {
        self.script(seed, payload, Ok(output));
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut digests: Vec<&String> = self.entries.keys().collect();
        digests.sort();
        let mut file = File::create(path)?;
        for d in digests {
            let entry = TranscriptEntry::from_outcome(d.clone(), &self.entries[d]);
            writeln!(file, "{}", serde_json::to_string(&entry)?)?;
        }
        Ok(())
    }
}

impl Backend for ScriptedBackend {
    fn call(&self, request: &BackendRequest) -> Result<Output, BackendError> {
        let digest = request.digest();
        match self.entries.get(&digest) {
            Some(outcome) => outcome.clone(),
            None => Err(BackendError::new(
                ErrorCode::MissingFixture,
                format!("no fixture for {} request {digest}", request.capability()),
            )),
        }
    }
}

struct RecorderState {
    writer: File,
    known: Outcomes,
}

/// Wraps a backend, appending every new request digest and its outcome to a
/// transcript. Digests already present (from this session or an earlier one
/// on the same file) are answered from the transcript without calling the
/// inner backend.
pub struct Recorder {
    inner: Arc<dyn Backend>,
    state: Mutex<RecorderState>,
}

impl Recorder {
    pub fn open(inner: Arc<dyn Backend>, path: &Path) -> std::io::Result<Self> {
        let known = if path.exists() {
            read_transcript(path)?
        } else {
            HashMap::new()
        };
        let writer = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner,
            state: Mutex::new(RecorderState { writer, known }),
        })
    }

    pub fn entries(&self) -> usize {
        self.state.lock().expect("recorder lock").known.len()
    }
}

impl Backend for Recorder {
    fn call(&self, request: &BackendRequest) -> Result<Output, BackendError> {
        let digest = request.digest();
        if let Some(hit) = self.state.lock().expect("recorder lock").known.get(&digest) {
            return hit.clone();
        }
        let outcome = self.inner.call(request);
        let mut state = self.state.lock().expect("recorder lock");
        if let Some(existing) = state.known.get(&digest) {
            return existing.clone();
        }
        let entry = TranscriptEntry::from_outcome(digest.clone(), &outcome);
        let mut line = serde_json::to_string(&entry).expect("entry serializes");
        line.push('\n');
        if let Err(e) = state.writer.write_all(line.as_bytes()) {
            return Err(BackendError::new(
                ErrorCode::Internal,
                format!("transcript write failed: {e}"),
            ));
        }
        state.known.insert(digest, outcome.clone());
        outcome
    }
}
