use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pairdiff_cli::*;
use pairdiff_core::pipeline::{self, RunOptions, Stage};
use pairdiff_review::{Catalogue, ReviewService, VoteStore};

#[derive(Parser)]
#[command(name = "pairdiff", version, about = "Synthesize image-difference instruction data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// `stub:scene`, `stub:scripted:<path>` or `http://host:port`.
    #[arg(long, env = "PAIRDIFF_BACKEND", default_value = "stub:scene")]
    backend: String,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the pipeline end to end (or resume it).
    Run {
        #[command(flatten)]
        common: Common,
        /// Threshold and prompt config (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Caption source, one `{"id", "caption"}` object per line.
        #[arg(long)]
        captions: Option<PathBuf>,
        /// Overrides the config's run seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resume: bool,
        /// Comma-separated subset of stages.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
        /// Object vocabulary, one name per line, for the diversity report.
        /// Like --shard-size, fixed when the run starts.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = pairdiff_core::dataset::DEFAULT_SHARD_SIZE)]
        shard_size: usize,
        /// Do not record backend calls.
        #[arg(long)]
        no_record: bool,
    },
    /// Score the run's synthesized pairs once and compare threshold configs.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// TOML with `[configs.NAME]` threshold overrides.
        #[arg(long)]
        configs: PathBuf,
    },
    /// Write the dataset of a run whose generation stages are done.
    Emit {
        #[command(flatten)]
        common: Common,
    },
    /// Funnel and diversity reports of a run.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Re-execute a recorded run from its transcript and compare outputs.
    Replay {
        /// The recorded run.
        #[arg(long)]
        from: PathBuf,
        /// Fresh directory for the replayed run.
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the review API over an emitted dataset.
    ServeReview {
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated annotator ids.
        #[arg(long, value_delimiter = ',', required = true)]
        annotators: Vec<String>,
        #[arg(long)]
        votes: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8090")]
        bind: String,
    },
    /// Serve a backend over the HTTP protocol.
    ServeBackend {
        #[arg(long, env = "PAIRDIFF_BACKEND", default_value = "stub:scene")]
        backend: String,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long, default_value_t = 64)]
        max_batch: usize,
    },
    /// Check an HTTP backend against the protocol.
    Conformance {
        /// Base URL, e.g. http://127.0.0.1:8080
        #[arg(long)]
        url: String,
    },
}

fn parse_stages(names: &[String]) -> Result<Vec<Stage>> {
    names
        .iter()
        .map(|n| Stage::parse(n).with_context(|| format!("unknown stage {n:?}")))
        .collect()
}

fn conserved(funnel: &pairdiff_core::funnel::FunnelReport) -> ExitCode {
    print_funnel(funnel);
    if funnel.is_conserved() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn serve<F: std::future::Future<Output = std::io::Result<()>>>(bind: &str, f: impl FnOnce(tokio::net::TcpListener) -> F) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let l = tokio::net::TcpListener::bind(bind).await.with_context(|| format!("bind {bind}"))?;
        println!("listening on http://{}", l.local_addr()?);
        f(l).await?;
        Ok(())
    })
}

fn main_inner(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Run {
            common,
            config,
            captions,
            seed,
            resume,
            stages,
            vocab,
            shard_size,
            no_record,
        } => {
            let (cfg, src) = if resume && config.is_none() && captions.is_none() {
                let (mut cfg, src) = run_inputs(&common.out)?;
                if let Some(s) = seed {
                    cfg.thresholds.seed = s;
                }
                (cfg, src)
            } else {
                let Some(captions) = captions else {
                    bail!("--captions is required for a new run");
                };
                (load_config(config.as_deref(), seed)?, load_captions(&captions)?)
            };
            let opts = RunOptions {
                stages: stages.as_deref().map(parse_stages).transpose()?,
                resume,
                record: !no_record,
                kill_at: None,
                vocab: load_vocab(vocab.as_deref())?,
                shard_size,
            };
            let s = pipeline::run(&common.out, &cfg, &src, backend(&common.backend)?, &opts)?;
            if let Some(m) = &s.manifest {
                println!(
                    "dataset: {} samples ({} replacement, {} removal)",
                    m.count, m.object_replacement, m.object_removal
                );
            }
            if let Some(d) = &s.diversity {
                print!("{}", d.to_table());
            }
            Ok(conserved(&s.funnel))
        }
        Cmd::Sweep { common, configs } => {
            let (cfg, _) = run_inputs(&common.out)?;
            let text = std::fs::read_to_string(&configs).with_context(|| configs.display().to_string())?;
            let variants = parse_sweep(&text, &cfg.thresholds)?;
            let s = run_stages(&common.out, &common.backend, vec![Stage::SynthCaptions, Stage::SynthPairs], None)?;
            let report = run_sweep(&common.out, &common.backend, &variants)?;
            print!("{}", report.to_table());
            Ok(conserved(&s.funnel))
        }
        Cmd::Emit { common } => {
            let s = run_stages(&common.out, &common.backend, vec![Stage::Emit], None)?;
            let m = s.manifest.context("emit did not run")?;
            println!("dataset: {} samples in {} shards", m.count, m.shards.len());
            Ok(conserved(&s.funnel))
        }
        Cmd::Stats { common, vocab } => {
            let vocab = load_vocab(vocab.as_deref())?;
            let samples = pipeline::emitted_samples(&common.out)?;
            let stats = pairdiff_core::diversity::diversity_report(
                samples
                    .iter()
                    .filter(|s| s.kind == pairdiff_core::model::SampleKind::ObjectReplacement)
                    .map(|s| &s.provenance.captions),
                vocab.as_deref(),
            );
            let reports = common.out.join("reports");
            pairdiff_core::io::write_json(&reports.join("diversity.json"), &stats)?;
            pairdiff_core::io::atomic_write(&reports.join("diversity.txt"), stats.to_table().as_bytes())?;
            print!("{}", stats.to_table());
            Ok(conserved(&pipeline::funnel_report(&common.out)?))
        }
        Cmd::Replay { from, out } => {
            let r = replay(&from, &out)?;
            let code = conserved(&r.summary.funnel);
            if r.differences.is_empty() {
                println!("replay identical");
                Ok(code)
            } else {
                for d in &r.differences {
                    eprintln!("differs: {d}");
                }
                Ok(ExitCode::from(3))
            }
        }
        Cmd::ServeReview {
            dataset,
            annotators,
            votes,
            bind,
        } => {
            let cat = Catalogue::from_dataset(&dataset)?;
            let svc = Arc::new(ReviewService::new(cat, annotators, VoteStore::open(&votes)?));
            serve(&bind, |l| pairdiff_review::serve(l, svc))?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::ServeBackend { backend: uri, bind, max_batch } => {
            let b = backend(&uri)?;
            serve(&bind, |l| pairdiff_core::backend::server::serve(l, b, max_batch))?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Conformance { url } => {
            let (checks, _) = pairdiff_core::backend::conformance::run_conformance(&url);
            let mut ok = true;
            for c in &checks {
                println!("{} {}{}", if c.passed { "PASS" } else { "FAIL" }, c.name, if c.detail.is_empty() { String::new() } else { format!(": {}", c.detail) });
                ok &= c.passed;
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    match main_inner(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
