//! Dataset emission.
//!
//! Layout under the output directory:
//!
//! ```text
//! images/{sample_id}.png
//! shards/shard-00000.jsonl   {id, image, conversations: [{from, value}]}
//! provenance.jsonl           one record per sample, same order as shards
//! manifest.json              counts and SHA-256 of every shard
//! ```
//!
//! While emission runs a `.partial` marker exists; it is removed only after
//! the manifest is written. Emission rewrites everything, so re-running it
//! after a failure converges on the same bytes.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::hash::sha256_hex;
use crate::io::{atomic_write, write_json};
use crate::model::{BBox, DifferenceSample, Provenance, Role, SampleKind};

pub const DEFAULT_SHARD_SIZE: usize = 1000;
pub const PARTIAL_MARKER: &str = ".partial";
pub const IMAGE_TOKEN: &str = "<image>\n";

#[derive(Debug, thiserror::Error)]
pub enum EmitError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("sample `{0}` has a malformed conversation")]
    Conversation(String),
    #[error("shard size must be at least 1")]
    ShardSize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmitError + '_ {
    move |source| EmitError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub from: String,
    pub value: String,
}

/// One line of a shard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetLine {
    pub id: String,
    pub image: String,
    pub conversations: Vec<Message>,
}

impl DatasetLine {
    pub fn from_sample(s: &DifferenceSample) -> Self {
        let conversations = s
            .conversation
            .iter()
            .enumerate()
            .map(|(i, t)| Message {
                from: match t.role {
                    Role::Human => "human",
                    Role::Assistant => "gpt",
                }
                .to_owned(),
                value: if i == 0 {
                    format!("{IMAGE_TOKEN}{}", t.text)
                } else {
                    t.text.clone()
                },
            })
            .collect();
        Self {
            id: s.sample_id.clone(),
            image: s.concat_image_ref.clone(),
            conversations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceLine {
    pub id: String,
    pub pair_id: String,
    pub kind: SampleKind,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub count: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub count: u64,
    pub object_replacement: u64,
    pub object_removal: u64,
    pub shards: Vec<ShardEntry>,
    pub provenance_sha256: String,
    /// SHA-256 over `name sha256\n` lines of every image, sorted by name.
    pub images_sha256: String,
}

pub const MANIFEST_FORMAT: &str = "pairdiff-dataset/1";

/// Writes `samples` to `out_dir`. `image_root.join(sample.concat_image_ref)`
/// must hold each sample's image.
pub fn emit_dataset(
    samples: &[DifferenceSample],
    image_root: &Path,
    out_dir: &Path,
    shard_size: usize,
) -> Result<Manifest, EmitError> {
    if shard_size == 0 {
        return Err(EmitError::ShardSize);
    }
    let mut seen = HashSet::new();
    for s in samples {
        if !seen.insert(s.sample_id.as_str()) {
            return Err(EmitError::DuplicateId(s.sample_id.clone()));
        }
        if !s.conversation_is_well_formed() {
            return Err(EmitError::Conversation(s.sample_id.clone()));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let marker = out_dir.join(PARTIAL_MARKER);
    atomic_write(&marker, b"").map_err(io_err(&marker))?;

    let images_dir = out_dir.join("images");
    let mut image_lines = Vec::new();
    for s in samples {
        let src = image_root.join(&s.concat_image_ref);
        let bytes = std::fs::read(&src).map_err(io_err(&src))?;
        let name = Path::new(&s.concat_image_ref)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{}.png", s.sample_id));
        let dst = images_dir.join(&name);
        atomic_write(&dst, &bytes).map_err(io_err(&dst))?;
        image_lines.push(format!("{name} {}\n", sha256_hex(&bytes)));
    }
    image_lines.sort();
    remove_stale(&images_dir, &seen_names(samples))?;

    let shards_dir = out_dir.join("shards");
    std::fs::create_dir_all(&shards_dir).map_err(io_err(&shards_dir))?;
    let mut shards = Vec::new();
    for (i, chunk) in samples.chunks(shard_size).enumerate() {
        let file = format!("shard-{i:05}.jsonl");
        let mut bytes = Vec::new();
        for s in chunk {
            serde_json::to_writer(&mut bytes, &DatasetLine::from_sample(s)).expect("line serializes");
            bytes.push(b'\n');
        }
        let path = shards_dir.join(&file);
        atomic_write(&path, &bytes).map_err(io_err(&path))?;
        shards.push(ShardEntry {
            file: format!("shards/{file}"),
            count: chunk.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    let keep: HashSet<String> = shards
        .iter()
        .map(|s| s.file.trim_start_matches("shards/").to_owned())
        .collect();
    remove_stale(&shards_dir, &keep)?;

    let mut prov = Vec::new();
    for s in samples {
        let line = ProvenanceLine {
            id: s.sample_id.clone(),
            pair_id: s.pair_id.clone(),
            kind: s.kind,
            bbox: s.bbox,
            provenance: s.provenance.clone(),
        };
        serde_json::to_writer(&mut prov, &line).expect("provenance serializes");
        prov.push(b'\n');
    }
    let prov_path = out_dir.join("provenance.jsonl");
    atomic_write(&prov_path, &prov).map_err(io_err(&prov_path))?;

    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_owned(),
        count: samples.len() as u64,
        object_replacement: samples.iter().filter(|s| s.kind == SampleKind::ObjectReplacement).count() as u64,
        object_removal: samples.iter().filter(|s| s.kind == SampleKind::ObjectRemoval).count() as u64,
        shards,
        provenance_sha256: sha256_hex(&prov),
        images_sha256: sha256_hex(image_lines.concat().as_bytes()),
    };
    let manifest_path = out_dir.join("manifest.json");
    write_json(&manifest_path, &manifest).map_err(io_err(&manifest_path))?;
    std::fs::remove_file(&marker).map_err(io_err(&marker))?;
    Ok(manifest)
}

fn seen_names(samples: &[DifferenceSample]) -> HashSet<String> {
    samples
        .iter()
        .filter_map(|s| Path::new(&s.concat_image_ref).file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .collect()
}

fn remove_stale(dir: &Path, keep: &HashSet<String>) -> Result<(), EmitError> {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Ok(());
    };
    for e in entries.flatten() {
        let name = e.file_name().to_string_lossy().into_owned();
        if !keep.contains(&name) {
            let p = e.path();
            std::fs::remove_file(&p).map_err(io_err(&p))?;
        }
    }
    Ok(())
}

/// The dataset as written: manifest, lines and provenance.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub lines: Vec<DatasetLine>,
    pub provenance: Vec<ProvenanceLine>,
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dataset is incomplete ({PARTIAL_MARKER} marker present)")]
    Partial,
    #[error("shard {file}: digest mismatch")]
    Digest { file: String },
    #[error("manifest counts disagree with shard contents")]
    Count,
}

/// Loads and checks a dataset: shard digests and counts must match the
/// manifest.
pub fn load_dataset(root: &Path) -> Result<LoadedDataset, LoadError> {
    if root.join(PARTIAL_MARKER).exists() {
        return Err(LoadError::Partial);
    }
    let manifest: Manifest = crate::io::read_json(&root.join("manifest.json"))?;
    let mut lines = Vec::new();
    for shard in &manifest.shards {
        let bytes = std::fs::read(root.join(&shard.file))?;
        if sha256_hex(&bytes) != shard.sha256 {
            return Err(LoadError::Digest { file: shard.file.clone() });
        }
        let before = lines.len();
        for l in bytes.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
            lines.push(serde_json::from_slice(l).map_err(std::io::Error::other)?);
        }
        if (lines.len() - before) as u64 != shard.count {
            return Err(LoadError::Count);
        }
    }
    if lines.len() as u64 != manifest.count {
        return Err(LoadError::Count);
    }
    let provenance = crate::io::read_jsonl(&root.join("provenance.jsonl"))?;
    Ok(LoadedDataset {
        root: root.to_owned(),
        manifest,
        lines,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CaptionPair, Turn};
    use crate::raster::RasterImage;
    use std::collections::BTreeMap;

    fn sample(i: u32, dir: &Path) -> DifferenceSample {
        let id = format!("p{i}-rep-0_0_1_1");
        let r = format!("images/{id}.png");
        RasterImage::filled(3, 2, [i as u8, 0, 0]).unwrap().save_png(&dir.join(&r)).unwrap();
        DifferenceSample {
            sample_id: id,
            pair_id: format!("p{i}"),
            bbox: BBox::new(0, 0, 1, 1).unwrap(),
            kind: SampleKind::ObjectReplacement,
            concat_image_ref: r,
            conversation: vec![
                Turn {
                    role: Role::Human,
                    text: "What objects have changed in this area?".into(),
                },
                Turn {
                    role: Role::Assistant,
                    text: "a cat became a dog".into(),
                },
            ],
            provenance: Provenance {
                captions: CaptionPair {
                    source_id: format!("p{i}"),
                    original: "a cat".into(),
                    edited: "a dog".into(),
                    replaced_object: "cat".into(),
                    replacement_object: "dog".into(),
                },
                content_caption_a: None,
                content_caption_b: None,
                difference_caption: None,
                description: None,
                answer_side: None,
                source_side: None,
                scores: BTreeMap::new(),
            },
        }
    }

    #[test]
    fn empty_dataset_has_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = emit_dataset(&[], dir.path(), &dir.path().join("out"), 2).unwrap();
        assert_eq!(m.count, 0);
        assert!(m.shards.is_empty());
        assert_eq!(load_dataset(&dir.path().join("out")).unwrap().lines.len(), 0);
    }

    #[test]
    fn shards_and_reemission() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..3).map(|i| sample(i, src.path())).collect();
        let m1 = emit_dataset(&samples, src.path(), out.path(), 2).unwrap();
        assert_eq!(m1.shards.len(), 2);
        assert_eq!(m1.shards[0].count, 2);
        let d = load_dataset(out.path()).unwrap();
        assert_eq!(d.lines.len(), 3);
        assert_eq!(d.lines[0].conversations[0].from, "human");
        assert!(d.lines[0].conversations[0].value.starts_with("<image>\n"));
        assert_eq!(d.lines[0].conversations[1].from, "gpt");
        let bytes1 = std::fs::read(out.path().join("manifest.json")).unwrap();
        let m2 = emit_dataset(&samples, src.path(), out.path(), 2).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(bytes1, std::fs::read(out.path().join("manifest.json")).unwrap());

        // Shrinking the input removes the stale shard and image.
        emit_dataset(&samples[..1], src.path(), out.path(), 2).unwrap();
        assert_eq!(std::fs::read_dir(out.path().join("shards")).unwrap().count(), 1);
        assert_eq!(std::fs::read_dir(out.path().join("images")).unwrap().count(), 1);
    }

    #[test]
    fn duplicates_and_tampering_are_caught() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let s = sample(0, src.path());
        assert!(matches!(
            emit_dataset(&[s.clone(), s.clone()], src.path(), out.path(), 2),
            Err(EmitError::DuplicateId(_))
        ));
        emit_dataset(&[s], src.path(), out.path(), 2).unwrap();
        std::fs::write(out.path().join("shards/shard-00000.jsonl"), b"{}\n").unwrap();
        assert!(matches!(load_dataset(out.path()), Err(LoadError::Digest { .. })));
        std::fs::write(out.path().join(PARTIAL_MARKER), b"").unwrap();
        assert!(matches!(load_dataset(out.path()), Err(LoadError::Partial)));
    }
}
