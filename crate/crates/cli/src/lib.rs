//! Command implementations behind the `pairdiff` binary.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use pairdiff_core::backend::{self, Backend};
use pairdiff_core::config::{RunConfig, ThresholdConfig};
use pairdiff_core::diversity::parse_vocab;
use pairdiff_core::funnel::FunnelReport;
use pairdiff_core::pipeline::{self, RunOptions, RunSummary, Stage, TRANSCRIPT_FILE};
use pairdiff_core::sweep::{build_pool, sweep, SweepReport};
use pairdiff_core::synthesis::CaptionSource;

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.thresholds.seed = s;
    }
    Ok(cfg)
}

pub fn load_captions(path: &Path) -> Result<CaptionSource> {
    let text = std::fs::read_to_string(path).with_context(|| format!("captions {}", path.display()))?;
    CaptionSource::parse_jsonl(&text).with_context(|| format!("captions {}", path.display()))
}

pub fn load_vocab(path: Option<&Path>) -> Result<Option<Vec<String>>> {
    path.map(|p| {
        std::fs::read_to_string(p)
            .map(|t| parse_vocab(&t))
            .with_context(|| format!("vocabulary {}", p.display()))
    })
    .transpose()
}

pub fn backend(uri: &str) -> Result<Arc<dyn Backend>> {
    backend::from_uri(uri).with_context(|| format!("backend {uri}"))
}

/// Config and captions a run directory was started with.
pub fn run_inputs(dir: &Path) -> Result<(RunConfig, CaptionSource)> {
    let cfg = RunConfig::load(&dir.join("config.toml")).with_context(|| format!("{} is not a run directory", dir.display()))?;
    Ok((cfg, load_captions(&dir.join("input").join("captions.jsonl"))?))
}

pub fn print_funnel(funnel: &FunnelReport) {
    print!("{}", funnel.to_table());
    for v in funnel.violations() {
        eprintln!("funnel violation: {v}");
    }
}

/// Continues (or starts) `dir` for `stages`, with the run's own inputs when
/// it already exists.
pub fn run_stages(dir: &Path, uri: &str, stages: Vec<Stage>, vocab: Option<Vec<String>>) -> Result<RunSummary> {
    let (cfg, src) = run_inputs(dir)?;
    let opts = RunOptions {
        stages: Some(stages),
        resume: true,
        vocab,
        ..RunOptions::default()
    };
    Ok(pipeline::run(dir, &cfg, &src, backend(uri)?, &opts)?)
}

/// Threshold variants read from `[configs.NAME]` tables, each overlaid on
/// `base`, sorted by name.
pub fn parse_sweep(text: &str, base: &ThresholdConfig) -> Result<Vec<(String, ThresholdConfig)>> {
    let doc: toml::Table = toml::from_str(text).context("sweep file")?;
    let Some(toml::Value::Table(configs)) = doc.get("configs") else {
        bail!("sweep file needs [configs.NAME] tables");
    };
    let mut out = Vec::new();
    for (name, overrides) in configs {
        let toml::Value::Table(overrides) = overrides else {
            bail!("configs.{name} must be a table");
        };
        let mut t = toml::Table::try_from(base).expect("thresholds serialize");
        for (k, v) in overrides {
            t.insert(k.clone(), v.clone());
        }
        let cfg: ThresholdConfig = toml::Value::Table(t).try_into().with_context(|| format!("configs.{name}"))?;
        cfg.validate().with_context(|| format!("configs.{name}"))?;
        out.push((name.clone(), cfg));
    }
    if out.is_empty() {
        bail!("sweep file lists no configs");
    }
    Ok(out)
}

/// Scores the synthesized pairs of `dir` once and evaluates every config.
pub fn run_sweep(dir: &Path, uri: &str, configs: &[(String, ThresholdConfig)]) -> Result<SweepReport> {
    let (cfg, _) = run_inputs(dir)?;
    let first = &configs[0].1;
    let pairs = pipeline::synthesized_pairs(dir)?;
    let client = backend::BackendClient::new(backend(uri)?);
    let pool = build_pool(&pairs, first, &cfg.prompts, &client);
    for (name, c) in configs {
        if !pool.compatible(c) {
            bail!("configs.{name}: seg_conf, iou and top_n must match the first config to share one candidate pool");
        }
    }
    let (report, survivors) = sweep(&pool, configs);
    let out = dir.join("sweep");
    pairdiff_core::io::write_json(&out.join("pool.json"), &pool)?;
    pairdiff_core::io::write_json(&out.join("report.json"), &report)?;
    pairdiff_core::io::write_json(&out.join("survivors.json"), &survivors)?;
    pairdiff_core::io::atomic_write(&out.join("report.txt"), report.to_table().as_bytes())?;
    Ok(report)
}

fn files_under(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_owned()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).with_context(|| d.display().to_string())? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).expect("under root").to_owned());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Relative paths whose bytes differ between two trees, including files
/// present on one side only.
pub fn tree_differences(a: &Path, b: &Path) -> Result<Vec<String>> {
    let fa = files_under(a)?;
    let fb = files_under(b)?;
    let mut diff: Vec<String> = Vec::new();
    for f in fa.iter().chain(&fb) {
        let (x, y) = (std::fs::read(a.join(f)).ok(), std::fs::read(b.join(f)).ok());
        if x != y {
            diff.push(f.display().to_string());
        }
    }
    diff.sort();
    diff.dedup();
    Ok(diff)
}

#[derive(Debug)]
pub struct ReplayOutcome {
    pub summary: RunSummary,
    pub differences: Vec<String>,
}

/// Re-executes `recorded` into `into`, answering every backend call from
/// the recorded transcript, and compares the dataset and reports.
pub fn replay(recorded: &Path, into: &Path) -> Result<ReplayOutcome> {
    let (cfg, src) = run_inputs(recorded)?;
    let state = pipeline::load_state(recorded)?;
    let transcript = recorded.join(TRANSCRIPT_FILE);
    if !transcript.exists() {
        bail!("{} has no transcript; run with recording on", recorded.display());
    }
    let uri = format!("stub:scripted:{}", transcript.display());
    let opts = RunOptions {
        record: false,
        vocab: state.vocab,
        shard_size: state.shard_size,
        ..RunOptions::default()
    };
    let summary = pipeline::run(into, &cfg, &src, backend(&uri)?, &opts)?;
    let mut differences = Vec::new();
    for sub in ["dataset", "reports"] {
        for d in tree_differences(&recorded.join(sub), &into.join(sub))? {
            differences.push(format!("{sub}/{d}"));
        }
    }
    Ok(ReplayOutcome { summary, differences })
}
