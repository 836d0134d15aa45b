//! Staged, checkpointed execution.
//!
//! Run directory:
//!
//! ```text
//! state.json                         RunState
//! config.toml, input/captions.jsonl  what the run was started with
//! transcript.jsonl                   backend calls, when recording
//! pairs/                             synthesized image pairs
//! work/images/                       concatenated sample images
//! stages/{stage}/journal.jsonl       per-item results while a stage runs
//! stages/{stage}/output.jsonl        kept outputs, input order
//! stages/{stage}/counts.json         funnel row
//! stages/{stage}/rejections.jsonl, quarantine.jsonl
//! dataset/                           emitted dataset
//! reports/funnel.{json,txt}, reports/diversity.{json,txt}
//! rejections.jsonl, quarantine.jsonl all stages, pipeline order
//! ```
//!
//! Every item result is journaled (fsynced) before the next batch starts,
//! so a run killed anywhere resumes from the first unjournaled item. A stage
//! is finished only once its outputs are written and the state lists it.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::areas::{self, DifferenceAreas};
use crate::backend::transcript::Recorder;
use crate::backend::{Backend, BackendClient, CallError};
use crate::captions;
use crate::config::RunConfig;
use crate::dataset::{emit_dataset, EmitError, Manifest, DEFAULT_SHARD_SIZE};
use crate::diversity::{diversity_report, DiversityStats};
use crate::funnel::{Counts, FunnelReport, Quarantine, Rejection, StageCounts};
use crate::hash::{derive_seed, sha256_hex};
use crate::io::{append_line, read_json, read_jsonl, write_json, write_jsonl};
use crate::model::{CaptionPair, DifferenceSample, SampleKind};
use crate::removal;
use crate::synthesis::{prefilter_pairs, CaptionRecord, CaptionSource, PairStore, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    SynthCaptions,
    SynthPairs,
    Prefilter,
    DiffAreas,
    DiffCaptions,
    ObjectRemoval,
    Emit,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::SynthCaptions,
        Stage::SynthPairs,
        Stage::Prefilter,
        Stage::DiffAreas,
        Stage::DiffCaptions,
        Stage::ObjectRemoval,
        Stage::Emit,
        Stage::Stats,
    ];

    /// Stages that write a funnel row.
    pub const FUNNEL: [Stage; 6] = [
        Stage::SynthCaptions,
        Stage::SynthPairs,
        Stage::Prefilter,
        Stage::DiffAreas,
        Stage::DiffCaptions,
        Stage::ObjectRemoval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::SynthCaptions => crate::synthesis::STAGE_CAPTIONS,
            Stage::SynthPairs => crate::synthesis::STAGE_PAIRS,
            Stage::Prefilter => crate::synthesis::STAGE_PREFILTER,
            Stage::DiffAreas => areas::STAGE_AREAS,
            Stage::DiffCaptions => captions::STAGE_CAPTIONS,
            Stage::ObjectRemoval => removal::STAGE_REMOVAL,
            Stage::Emit => "emit",
            Stage::Stats => "stats",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.as_str() == name)
    }

    /// Stages whose outputs this one reads.
    pub fn needs(self) -> &'static [Stage] {
        match self {
            Stage::SynthCaptions => &[],
            Stage::SynthPairs => &[Stage::SynthCaptions],
            Stage::Prefilter => &[Stage::SynthPairs],
            Stage::DiffAreas => &[Stage::Prefilter],
            Stage::DiffCaptions => &[Stage::DiffAreas],
            Stage::ObjectRemoval => &[Stage::Prefilter],
            Stage::Emit => &[Stage::DiffCaptions, Stage::ObjectRemoval],
            Stage::Stats => &[Stage::Emit],
        }
    }

    /// The funnel row whose `kept` is this stage's `in`.
    pub fn upstream(self) -> Option<Stage> {
        match self {
            Stage::SynthCaptions | Stage::Emit | Stage::Stats => None,
            Stage::ObjectRemoval => Some(Stage::Prefilter),
            s => s.needs().first().copied(),
        }
    }

    fn unit(self) -> &'static str {
        match self {
            Stage::SynthCaptions => "caption",
            _ => "pair",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config digest mismatch: run was started with {expected}, got {found}")]
    ConfigMismatch { expected: String, found: String },
    #[error("caption source differs from the one the run was started with")]
    SourceMismatch,
    #[error("{0} already holds a run; resume it or pick another directory")]
    RunExists(String),
    #[error("no run state in {0}")]
    NoState(String),
    #[error("stage {stage} needs {needs}, which has not completed")]
    MissingStage { stage: Stage, needs: Stage },
    #[error("killed in {stage} after {items} items")]
    Killed { stage: Stage, items: usize },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Emit(#[from] EmitError),
    #[error("thread pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub config_digest: String,
    pub source_digest: String,
    /// In pipeline order.
    pub completed: Vec<Stage>,
    /// Checkpoint directory of each completed stage, relative to the run dir.
    pub checkpoints: BTreeMap<String, String>,
    pub transcript: Option<String>,
    /// Fixed when the run starts; resuming keeps these.
    #[serde(default = "default_shard_size")]
    pub shard_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
}

fn default_shard_size() -> usize {
    DEFAULT_SHARD_SIZE
}

impl RunState {
    pub fn is_complete(&self, stage: Stage) -> bool {
        self.completed.contains(&stage)
    }
}

pub const STATE_FILE: &str = "state.json";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";

/// Simulated crash: stop once `after_items` results of `stage` are journaled.
/// For emit and stats the stage is stopped before it starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KillPoint {
    pub stage: Stage,
    pub after_items: usize,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Stages to run; `None` is all of them.
    pub stages: Option<Vec<Stage>>,
    pub resume: bool,
    /// Wrap the backend in a recorder writing `transcript.jsonl`.
    pub record: bool,
    pub kill_at: Option<KillPoint>,
    /// Vocabulary and shard size only take effect when the run starts.
    pub vocab: Option<Vec<String>>,
    pub shard_size: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            stages: None,
            resume: false,
            record: true,
            kill_at: None,
            vocab: None,
            shard_size: DEFAULT_SHARD_SIZE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub state: RunState,
    pub funnel: FunnelReport,
    pub manifest: Option<Manifest>,
    pub diversity: Option<DiversityStats>,
}

/// Journal line: everything one input item produced in a stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ItemRecord<T> {
    id: String,
    #[serde(default = "none", skip_serializing_if = "Option::is_none")]
    kept: Option<T>,
    counts: Counts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    items: Option<Counts>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    rejections: Vec<Rejection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    quarantined: Vec<Quarantine>,
}

fn none<T>() -> Option<T> {
    None
}

impl<T> ItemRecord<T> {
    fn new(stage: Stage, id: impl Into<String>) -> Self {
        let mut counts = Counts::new(stage.unit());
        counts.input = 1;
        Self {
            id: id.into(),
            kept: None,
            counts,
            items: None,
            rejections: Vec::new(),
            quarantined: Vec::new(),
        }
    }

    fn keep(mut self, value: T) -> Self {
        self.counts.kept = 1;
        self.kept = Some(value);
        self
    }

    fn dropped(mut self, reason: &str) -> Self {
        self.counts.drop(reason, 1);
        self
    }

    fn quarantine(mut self, stage: Stage, err: &CallError) -> Self {
        self.counts.quarantined = 1;
        self.quarantined.push(Quarantine::new(stage.as_str(), self.id.clone(), err));
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Kept<T> {
    id: String,
    value: T,
}

struct Ctx<'a> {
    dir: &'a Path,
    cfg: &'a RunConfig,
    client: BackendClient,
    pool: rayon::ThreadPool,
    store: PairStore,
    kill_at: Option<KillPoint>,
}

impl Ctx<'_> {
    fn stage_dir(&self, stage: Stage) -> PathBuf {
        stage_dir(self.dir, stage)
    }

    fn work_dir(&self) -> PathBuf {
        self.dir.join("work")
    }
}

fn stage_dir(dir: &Path, stage: Stage) -> PathBuf {
    dir.join("stages").join(stage.as_str())
}

/// Journal lines parsed so far; a torn final line is ignored.
fn read_journal<T: DeserializeOwned>(path: &Path) -> Result<Vec<ItemRecord<T>>, PipelineError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::new();
    for (i, l) in lines.iter().enumerate() {
        match serde_json::from_str(l) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(io_err(path)(std::io::Error::other(format!("line {}: {e}", i + 1)))),
        }
    }
    Ok(out)
}

/// Runs `f` over every input not yet journaled, `max_in_flight` at a time,
/// and returns all records in input order.
fn run_items<I, T, F>(
    ctx: &Ctx<'_>,
    stage: Stage,
    inputs: &[I],
    id_of: impl Fn(&I) -> String,
    f: F,
) -> Result<Vec<ItemRecord<T>>, PipelineError>
where
    I: Sync,
    T: Serialize + DeserializeOwned + Send,
    F: Fn(&I) -> Result<ItemRecord<T>, PipelineError> + Sync,
{
    let dir = ctx.stage_dir(stage);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let journal = dir.join("journal.jsonl");
    let mut done: HashMap<String, ItemRecord<T>> =
        read_journal(&journal)?.into_iter().map(|r| (r.id.clone(), r)).collect();
    // A torn tail is dropped from the file too, so appends start on a clean line.
    rewrite_journal(&journal, &done, inputs, &id_of)?;
    let pending: Vec<&I> = inputs.iter().filter(|i| !done.contains_key(&id_of(i))).collect();
    let kill = ctx.kill_at.filter(|k| k.stage == stage).map(|k| k.after_items);
    if kill.is_some_and(|k| done.len() >= k) && !pending.is_empty() {
        return Err(PipelineError::Killed { stage, items: done.len() });
    }
    let batch = ctx.cfg.thresholds.max_in_flight.max(1);
    for chunk in pending.chunks(batch) {
        let results: Vec<Result<ItemRecord<T>, PipelineError>> =
            ctx.pool.install(|| chunk.par_iter().map(|i| f(i)).collect());
        for r in results {
            let r = r?;
            let line = serde_json::to_string(&r).expect("journal record serializes");
            append_line(&journal, &line).map_err(io_err(&journal))?;
            done.insert(r.id.clone(), r);
            if kill.is_some_and(|k| done.len() >= k) && done.len() < inputs.len() {
                return Err(PipelineError::Killed { stage, items: done.len() });
            }
        }
    }
    Ok(inputs
        .iter()
        .map(|i| done.remove(&id_of(i)).expect("every input journaled"))
        .collect())
}

fn rewrite_journal<I, T: Serialize>(
    path: &Path,
    done: &HashMap<String, ItemRecord<T>>,
    inputs: &[I],
    id_of: &impl Fn(&I) -> String,
) -> Result<(), PipelineError> {
    if !path.exists() {
        return Ok(());
    }
    let mut bytes = Vec::new();
    for i in inputs {
        if let Some(r) = done.get(&id_of(i)) {
            serde_json::to_writer(&mut bytes, r).expect("journal record serializes");
            bytes.push(b'\n');
        }
    }
    crate::io::atomic_write(path, &bytes).map_err(io_err(path))
}

/// Writes a finished stage's checkpoint and returns its kept outputs.
fn finish_stage<T: Serialize + Clone>(
    ctx: &Ctx<'_>,
    stage: Stage,
    records: Vec<ItemRecord<T>>,
) -> Result<Vec<Kept<T>>, PipelineError> {
    let dir = ctx.stage_dir(stage);
    let mut counts = Counts::new(stage.unit());
    let mut items: Option<Counts> = None;
    let mut rejections = Vec::new();
    let mut quarantined = Vec::new();
    let mut kept = Vec::new();
    for r in records {
        counts.merge(&r.counts);
        if let Some(i) = &r.items {
            items.get_or_insert_with(|| Counts::new(&i.unit)).merge(i);
        }
        rejections.extend(r.rejections);
        quarantined.extend(r.quarantined);
        if let Some(v) = r.kept {
            kept.push(Kept { id: r.id, value: v });
        }
    }
    let row = StageCounts {
        stage: stage.as_str().to_owned(),
        upstream: stage.upstream().map(|s| s.as_str().to_owned()),
        counts,
        items,
    };
    let p = dir.join("output.jsonl");
    write_jsonl(&p, &kept).map_err(io_err(&p))?;
    let p = dir.join("rejections.jsonl");
    write_jsonl(&p, &rejections).map_err(io_err(&p))?;
    let p = dir.join("quarantine.jsonl");
    write_jsonl(&p, &quarantined).map_err(io_err(&p))?;
    let p = dir.join("counts.json");
    write_json(&p, &row).map_err(io_err(&p))?;
    Ok(kept)
}

fn read_output<T: DeserializeOwned>(dir: &Path, stage: Stage) -> Result<Vec<Kept<T>>, PipelineError> {
    let p = stage_dir(dir, stage).join("output.jsonl");
    read_jsonl(&p).map_err(io_err(&p))
}

fn save_state(dir: &Path, state: &RunState) -> Result<(), PipelineError> {
    let p = dir.join(STATE_FILE);
    write_json(&p, state).map_err(io_err(&p))
}

pub fn load_state(dir: &Path) -> Result<RunState, PipelineError> {
    let p = dir.join(STATE_FILE);
    if !p.exists() {
        return Err(PipelineError::NoState(dir.display().to_string()));
    }
    read_json(&p).map_err(io_err(&p))
}

/// The funnel rows of every completed stage, in pipeline order.
pub fn funnel_report(dir: &Path) -> Result<FunnelReport, PipelineError> {
    let state = load_state(dir)?;
    let mut report = FunnelReport::default();
    for stage in Stage::FUNNEL {
        if state.is_complete(stage) {
            let p = stage_dir(dir, stage).join("counts.json");
            report.push(read_json(&p).map_err(io_err(&p))?);
        }
    }
    Ok(report)
}

/// Replacement samples first, then removal samples, each in pair order.
pub fn emitted_samples(dir: &Path) -> Result<Vec<DifferenceSample>, PipelineError> {
    let mut out = Vec::new();
    for stage in [Stage::DiffCaptions, Stage::ObjectRemoval] {
        for k in read_output::<Vec<DifferenceSample>>(dir, stage)? {
            out.extend(k.value);
        }
    }
    Ok(out)
}

/// Image pairs kept by synth-pairs, in input order.
pub fn synthesized_pairs(dir: &Path) -> Result<Vec<crate::model::ImagePair>, PipelineError> {
    let store = PairStore::open(&dir.join("pairs")).map_err(io_err(&dir.join("pairs")))?;
    kept_ids(dir, Stage::SynthPairs)?
        .iter()
        .map(|id| Ok(store.read(id)?.0))
        .collect()
}

fn source_digest(source: &CaptionSource) -> String {
    sha256_hex(source.to_jsonl().as_bytes())
}

/// Runs (or resumes) a pipeline in `dir`.
pub fn run(
    dir: &Path,
    cfg: &RunConfig,
    source: &CaptionSource,
    backend: Arc<dyn Backend>,
    opts: &RunOptions,
) -> Result<RunSummary, PipelineError> {
    let config_digest = cfg.digest();
    let src_digest = source_digest(source);
    let state_path = dir.join(STATE_FILE);
    let mut state = if opts.resume {
        let s = load_state(dir)?;
        if s.config_digest != config_digest {
            return Err(PipelineError::ConfigMismatch {
                expected: s.config_digest,
                found: config_digest,
            });
        }
        if s.source_digest != src_digest {
            return Err(PipelineError::SourceMismatch);
        }
        s
    } else {
        if state_path.exists() {
            return Err(PipelineError::RunExists(dir.display().to_string()));
        }
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join("config.toml");
        crate::io::atomic_write(&p, cfg.to_toml_string().as_bytes()).map_err(io_err(&p))?;
        let p = dir.join("input").join("captions.jsonl");
        crate::io::atomic_write(&p, source.to_jsonl().as_bytes()).map_err(io_err(&p))?;
        let s = RunState {
            run_id: sha256_hex(format!("{config_digest}/{src_digest}").as_bytes())[..16].to_owned(),
            config_digest,
            source_digest: src_digest,
            completed: Vec::new(),
            checkpoints: BTreeMap::new(),
            transcript: opts.record.then(|| TRANSCRIPT_FILE.to_owned()),
            shard_size: opts.shard_size,
            vocab: opts.vocab.clone(),
        };
        save_state(dir, &s)?;
        s
    };

    let backend: Arc<dyn Backend> = match &state.transcript {
        Some(name) if opts.record => {
            let p = dir.join(name);
            Arc::new(Recorder::open(backend, &p).map_err(io_err(&p))?)
        }
        _ => backend,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.thresholds.max_in_flight.max(1))
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    let pairs_dir = dir.join("pairs");
    let ctx = Ctx {
        dir,
        cfg,
        client: BackendClient::new(backend),
        pool,
        store: PairStore::open(&pairs_dir).map_err(io_err(&pairs_dir))?,
        kill_at: opts.kill_at,
    };

    let mut manifest = None;
    let mut diversity = None;
    for stage in Stage::ALL {
        if opts.stages.as_ref().is_some_and(|s| !s.contains(&stage)) {
            continue;
        }
        if state.is_complete(stage) {
            continue;
        }
        for &need in stage.needs() {
            if !state.is_complete(need) {
                return Err(PipelineError::MissingStage { stage, needs: need });
            }
        }
        tracing::info!(stage = stage.as_str(), "running");
        match stage {
            Stage::SynthCaptions => stage_synth_captions(&ctx, source)?,
            Stage::SynthPairs => stage_synth_pairs(&ctx)?,
            Stage::Prefilter => stage_prefilter(&ctx)?,
            Stage::DiffAreas => stage_diff_areas(&ctx)?,
            Stage::DiffCaptions => stage_diff_captions(&ctx)?,
            Stage::ObjectRemoval => stage_object_removal(&ctx)?,
            Stage::Emit => {
                check_kill(&ctx, stage)?;
                manifest = Some(stage_emit(&ctx, state.shard_size)?);
            }
            Stage::Stats => {
                check_kill(&ctx, stage)?;
                diversity = Some(stage_stats(&ctx, state.vocab.as_deref())?);
            }
        }
        state.completed.push(stage);
        state.completed.sort();
        let checkpoint = match stage {
            Stage::Emit => "dataset".to_owned(),
            Stage::Stats => "reports".to_owned(),
            s => format!("stages/{}", s.as_str()),
        };
        state.checkpoints.insert(stage.as_str().to_owned(), checkpoint);
        save_state(dir, &state)?;
        write_logs(dir, &state)?;
    }
    if manifest.is_none() && state.is_complete(Stage::Emit) {
        let p = dir.join("dataset").join("manifest.json");
        manifest = Some(read_json(&p).map_err(io_err(&p))?);
    }
    if diversity.is_none() && state.is_complete(Stage::Stats) {
        let p = dir.join("reports").join("diversity.json");
        diversity = Some(read_json(&p).map_err(io_err(&p))?);
    }
    Ok(RunSummary {
        funnel: funnel_report(dir)?,
        state,
        manifest,
        diversity,
    })
}

fn check_kill(ctx: &Ctx<'_>, stage: Stage) -> Result<(), PipelineError> {
    match ctx.kill_at {
        Some(k) if k.stage == stage => Err(PipelineError::Killed { stage, items: 0 }),
        _ => Ok(()),
    }
}

fn stage_synth_captions(ctx: &Ctx<'_>, source: &CaptionSource) -> Result<(), PipelineError> {
    let stage = Stage::SynthCaptions;
    let template = &ctx.cfg.prompts.rewrite;
    let seed = ctx.cfg.thresholds.seed;
    let records = run_items(ctx, stage, source.records(), |r: &CaptionRecord| r.id.clone(), |r| {
        let item = ItemRecord::new(stage, &r.id);
        Ok(
            match ctx.client.rewrite_caption(&r.id, &r.caption, template, derive_seed(seed, &r.id)) {
                Ok(p) => item.keep(p),
                Err(e) => item.quarantine(stage, &e),
            },
        )
    })?;
    finish_stage(ctx, stage, records)?;
    Ok(())
}

fn stage_synth_pairs(ctx: &Ctx<'_>) -> Result<(), PipelineError> {
    let stage = Stage::SynthPairs;
    let inputs: Vec<CaptionPair> = read_output(ctx.dir, Stage::SynthCaptions)?
        .into_iter()
        .map(|k| k.value)
        .collect();
    let seed = ctx.cfg.thresholds.seed;
    let records = run_items(ctx, stage, &inputs, |p: &CaptionPair| p.source_id.clone(), |p| {
        let item = ItemRecord::new(stage, &p.source_id);
        Ok(
            match ctx.client.generate_pair(&p.source_id, p, derive_seed(seed, &p.source_id)) {
                Ok(pair) => {
                    ctx.store.write(&pair, None)?;
                    item.keep(true)
                }
                Err(e) => item.quarantine(stage, &e),
            },
        )
    })?;
    finish_stage(ctx, stage, records)?;
    Ok(())
}

fn kept_ids(dir: &Path, stage: Stage) -> Result<Vec<String>, PipelineError> {
    Ok(read_output::<serde_json::Value>(dir, stage)?
        .into_iter()
        .map(|k| k.id)
        .collect())
}

fn stage_prefilter(ctx: &Ctx<'_>) -> Result<(), PipelineError> {
    let stage = Stage::Prefilter;
    let ids = kept_ids(ctx.dir, Stage::SynthPairs)?;
    let records = run_items(ctx, stage, &ids, String::clone, |id| {
        let (pair, _) = ctx.store.read(id)?;
        let pf = prefilter_pairs(vec![pair], &ctx.cfg.thresholds, &ctx.client);
        let sim = pf.kept.first().map(|sp| sp.similarity);
        Ok(ItemRecord {
            id: id.clone(),
            kept: sim,
            counts: pf.counts.counts,
            items: None,
            rejections: pf.rejections,
            quarantined: pf.quarantined,
        })
    })?;
    let kept = finish_stage(ctx, stage, records)?;
    for k in &kept {
        let mut side = ctx.store.read_sidecar(&k.id)?;
        side.similarity = Some(k.value);
        ctx.store.write_sidecar(&side)?;
    }
    Ok(())
}

fn stage_diff_areas(ctx: &Ctx<'_>) -> Result<(), PipelineError> {
    let stage = Stage::DiffAreas;
    let ids = kept_ids(ctx.dir, Stage::Prefilter)?;
    let records = run_items(ctx, stage, &ids, String::clone, |id| {
        let (pair, _) = ctx.store.read(id)?;
        let item = ItemRecord::new(stage, id);
        Ok(match areas::generate(&pair, &ctx.cfg.thresholds, &ctx.client) {
            Ok(out) => {
                let mut item = ItemRecord {
                    items: Some(out.areas.stage_counts.items()),
                    rejections: out.rejections,
                    quarantined: out.quarantined,
                    ..item
                };
                if out.areas.regions.is_empty() {
                    item = item.dropped("no_regions");
                } else {
                    item = item.keep(out.areas);
                }
                item
            }
            Err(e) => item.quarantine(stage, &e),
        })
    })?;
    finish_stage(ctx, stage, records)?;
    Ok(())
}

fn save_samples(ctx: &Ctx<'_>, samples: Vec<captions::RenderedSample>) -> Result<Vec<DifferenceSample>, PipelineError> {
    let work = ctx.work_dir();
    samples
        .into_iter()
        .map(|s| {
            let p = work.join(&s.sample.concat_image_ref);
            s.image
                .save_png(&p)
                .map_err(|e| io_err(&p)(std::io::Error::other(e.to_string())))?;
            Ok(s.sample)
        })
        .collect()
}

fn stage_diff_captions(ctx: &Ctx<'_>) -> Result<(), PipelineError> {
    let stage = Stage::DiffCaptions;
    let inputs: Vec<DifferenceAreas> = read_output(ctx.dir, Stage::DiffAreas)?
        .into_iter()
        .map(|k| k.value)
        .collect();
    let records = run_items(ctx, stage, &inputs, |a: &DifferenceAreas| a.pair_id.clone(), |a| {
        let (pair, _) = ctx.store.read(&a.pair_id)?;
        let out = captions::caption_pair(&pair, a, &ctx.cfg.thresholds, &ctx.cfg.prompts, &ctx.client);
        let samples = save_samples(ctx, out.samples)?;
        let item = ItemRecord {
            items: Some(out.items),
            rejections: out.rejections,
            quarantined: out.quarantined,
            ..ItemRecord::new(stage, &a.pair_id)
        };
        Ok(if samples.is_empty() {
            item.dropped("no_accepted")
        } else {
            item.keep(samples)
        })
    })?;
    finish_stage(ctx, stage, records)?;
    Ok(())
}

fn stage_object_removal(ctx: &Ctx<'_>) -> Result<(), PipelineError> {
    let stage = Stage::ObjectRemoval;
    let ids = kept_ids(ctx.dir, Stage::Prefilter)?;
    let records = run_items(ctx, stage, &ids, String::clone, |id| {
        let (pair, _) = ctx.store.read(id)?;
        let item = ItemRecord::new(stage, id);
        Ok(
            match removal::remove_objects(&pair, &ctx.cfg.thresholds, &ctx.cfg.prompts, &ctx.client) {
                Ok(out) => {
                    let samples = save_samples(ctx, out.samples)?;
                    let item = ItemRecord {
                        items: Some(out.items),
                        rejections: out.rejections,
                        quarantined: out.quarantined,
                        ..item
                    };
                    if samples.is_empty() {
                        item.dropped("no_samples")
                    } else {
                        item.keep(samples)
                    }
                }
                Err(e) => item.quarantine(stage, &e),
            },
        )
    })?;
    finish_stage(ctx, stage, records)?;
    Ok(())
}

fn stage_emit(ctx: &Ctx<'_>, shard_size: usize) -> Result<Manifest, PipelineError> {
    let samples = emitted_samples(ctx.dir)?;
    Ok(emit_dataset(&samples, &ctx.work_dir(), &ctx.dir.join("dataset"), shard_size)?)
}

fn stage_stats(ctx: &Ctx<'_>, vocab: Option<&[String]>) -> Result<DiversityStats, PipelineError> {
    let reports = ctx.dir.join("reports");
    let samples = emitted_samples(ctx.dir)?;
    let stats = diversity_report(
        samples
            .iter()
            .filter(|s| s.kind == SampleKind::ObjectReplacement)
            .map(|s| &s.provenance.captions),
        vocab,
    );
    let p = reports.join("diversity.json");
    write_json(&p, &stats).map_err(io_err(&p))?;
    let p = reports.join("diversity.txt");
    crate::io::atomic_write(&p, stats.to_table().as_bytes()).map_err(io_err(&p))?;
    Ok(stats)
}

/// Funnel reports and the run-wide rejection and quarantine logs, rebuilt
/// from the completed stages.
fn write_logs(dir: &Path, state: &RunState) -> Result<(), PipelineError> {
    let mut rejections: Vec<Rejection> = Vec::new();
    let mut quarantined: Vec<Quarantine> = Vec::new();
    for stage in Stage::FUNNEL {
        if !state.is_complete(stage) {
            continue;
        }
        let d = stage_dir(dir, stage);
        let p = d.join("rejections.jsonl");
        rejections.extend(read_jsonl::<Rejection>(&p).map_err(io_err(&p))?);
        let p = d.join("quarantine.jsonl");
        quarantined.extend(read_jsonl::<Quarantine>(&p).map_err(io_err(&p))?);
    }
    let p = dir.join("rejections.jsonl");
    write_jsonl(&p, &rejections).map_err(io_err(&p))?;
    let p = dir.join("quarantine.jsonl");
    write_jsonl(&p, &quarantined).map_err(io_err(&p))?;
    let funnel = funnel_report(dir)?;
    let p = dir.join("reports").join("funnel.json");
    write_json(&p, &funnel).map_err(io_err(&p))?;
    let p = dir.join("reports").join("funnel.txt");
    crate::io::atomic_write(&p, funnel.to_table().as_bytes()).map_err(io_err(&p))
}
