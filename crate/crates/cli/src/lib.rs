//! `rtl` command implementations.
//!
//! Exit codes: 0 success, 2 usage or configuration errors, 3 runtime
//! failures. `RTL_THREADS` caps the worker pool used by parallel commands.

pub mod plot;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rtl_core::checkpoint::{write_atomic, Checkpoint};
use rtl_core::config::{ConfigError, RunConfig};
use rtl_core::evalx::{
    compare_domains, evaluate, transfer_protocol, write_metrics_csv, MetricsRow, DEFAULT_MIN_OUTCOMES,
    DEFAULT_RUNS,
};
use rtl_core::telemetry::read_telemetry;
use rtl_core::evalx::read_report;
use rtl_core::terrain::{clamp_slopes, generate_heightfield};
use rtl_core::train::{domain_setup, train, RunPaths, TrainError};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::usage(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "rtl", version, about = "Rover navigation lab: train, evaluate and transfer PPO rover policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint with deterministic actions.
    Eval(EvalArgs),
    /// Zero-shot transfer: repeated evaluations in the transfer domain.
    Transfer(TransferArgs),
    /// Render telemetry or a transfer report as SVG.
    Plot(PlotArgs),
    /// Export a domain's heightfield.
    Terrain(TerrainArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    pub config: PathBuf,
    /// Overrides `master_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint of the same run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print a progress line every N iterations (0 for none).
    #[arg(long, default_value_t = 10)]
    pub progress: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Domain name from the checkpoint's run configuration.
    #[arg(long, default_value = "farm")]
    pub domain: String,
    /// Episodes to run (every episode ends in exactly one outcome).
    #[arg(long, default_value_t = DEFAULT_MIN_OUTCOMES)]
    pub min_outcomes: usize,
    /// Seed for episode layouts.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also evaluate in this domain with the same seed and outcome count.
    #[arg(long)]
    pub compare: Option<String>,
    /// Metrics CSV destination.
    #[arg(long, default_value = "metrics.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Checkpoint file to transfer.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Independent evaluation runs; run `i` uses seed `seed + i`.
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    pub runs: usize,
    /// Episodes per run.
    #[arg(long, default_value_t = DEFAULT_MIN_OUTCOMES)]
    pub min_outcomes: usize,
    /// Base seed for episode layouts.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Target domain; defaults to the run's `transfer_domain`.
    #[arg(long)]
    pub domain: Option<String>,
    /// Report CSV destination.
    #[arg(long, default_value = "transfer.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false, id = "input")]
pub struct PlotInput {
    /// Telemetry CSV: reward and successes per iteration.
    #[arg(long)]
    pub telemetry: Option<PathBuf>,
    /// Transfer report CSV: successes and failures per run.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[command(flatten)]
    pub input: PlotInput,
    /// SVG destination.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TerrainArgs {
    /// Run configuration; the built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "farm")]
    pub domain: String,
    /// Overrides the terrain seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Height grid CSV destination.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional 8-bit grayscale preview (PGM).
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

/// Caps the global rayon pool from `RTL_THREADS`.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("RTL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("RTL_THREADS must be a positive integer, got `{v}`")))?;
    // A second initialization only happens in-process (tests); keep the first.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Terrain(a) => cmd_terrain(a),
    }
}

pub fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    let resume = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.run_digest != cfg.digest() {
                return Err(CliError::usage(format!(
                    "checkpoint `{}` belongs to run {}, but the configuration resolves to {}",
                    p.display(),
                    ck.run_digest,
                    cfg.digest()
                )));
            }
            Some(ck)
        }
        None => None,
    };
    let paths = RunPaths::new(&cfg.output_dir);
    eprintln!(
        "training `{}` on {} for {} env steps -> {}",
        cfg.digest().get(..12).unwrap_or_default(),
        cfg.train_domain,
        cfg.ppo.total_env_steps,
        paths.root.display()
    );
    let every = a.progress;
    let summary = train(cfg, &paths, resume, |row| {
        if every > 0 && row.iteration % every == 0 {
            eprintln!(
                "iter {:5} steps {:9} reward {:8.4} S {:3} C {:3} O {:3} T {:3} kl {:.4}",
                row.iteration,
                row.env_steps,
                row.mean_reward,
                row.success_count,
                row.collision_count,
                row.oob_count,
                row.timeout_count,
                row.mean_kl
            );
        }
    })?;
    println!(
        "done: {} iterations, {} env steps, {} training successes, best mean reward {}",
        summary.iterations,
        summary.env_steps,
        summary.total_successes,
        summary
            .best_mean_reward
            .map_or("-".into(), |r| format!("{r:.6}"))
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path, None).map_err(|e| CliError::runtime(format!("refusing checkpoint `{}`: {e}", path.display())))
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("cannot create `{}`: {e}", dir.display())))?;
    }
    write_atomic(path, bytes).map_err(|e| CliError::runtime(format!("cannot write `{}`: {e}", path.display())))
}

fn setup(cfg: &RunConfig, domain: &str) -> Result<(Arc<rtl_core::env::EnvSettings>, Arc<rtl_core::terrain::Heightfield>)> {
    if cfg.domain_config(domain).is_none() {
        let known: Vec<&str> = cfg.domain.keys().map(String::as_str).collect();
        return Err(CliError::usage(format!(
            "unknown domain `{domain}` (known: {})",
            known.join(", ")
        )));
    }
    Ok(domain_setup(cfg, domain)?)
}

pub fn cmd_eval(a: EvalArgs) -> Result<()> {
    if a.min_outcomes == 0 {
        return Err(CliError::usage("--min-outcomes must be at least 1"));
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let (s, t) = setup(&ck.config, &a.domain)?;
    let mut rows = Vec::new();
    match &a.compare {
        None => {
            let run = evaluate(&ck.params, &s, &t, a.min_outcomes, a.seed).map_err(|e| CliError::runtime(e.to_string()))?;
            rows.push(MetricsRow::new(&a.domain, &run));
        }
        Some(other) => {
            let (s2, t2) = setup(&ck.config, other)?;
            let c = compare_domains(&ck.params, (&a.domain, &s, &t), (other, &s2, &t2), a.min_outcomes, a.seed)
                .map_err(|e| CliError::runtime(e.to_string()))?;
            print!("{}", c.table());
            for (name, run) in c.names.iter().zip(&c.runs) {
                rows.push(MetricsRow::new(name, run));
            }
        }
    }
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &rows).map_err(|e| CliError::runtime(e.to_string()))?;
    write_output(&a.out, &buf)?;
    for r in &rows {
        println!(
            "{}: {} successes / {} outcomes (success rate {:.4}), {} collisions, {} oob, {} timeouts",
            r.domain, r.successes, r.total_outcomes, r.success_rate, r.collisions, r.oob, r.timeouts
        );
    }
    Ok(())
}

pub fn cmd_transfer(a: TransferArgs) -> Result<()> {
    if a.runs == 0 || a.min_outcomes == 0 {
        return Err(CliError::usage("--runs and --min-outcomes must be at least 1"));
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let domain = a.domain.clone().unwrap_or_else(|| ck.config.transfer_domain.clone());
    let (s, t) = setup(&ck.config, &domain)?;
    let report = transfer_protocol(&ck.params, &s, &t, a.runs, a.min_outcomes, a.seed)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf).map_err(|e| CliError::runtime(e.to_string()))?;
    write_output(&a.out, &buf)?;
    for (i, r) in report.runs.iter().enumerate() {
        println!(
            "run {i:2} seed {:4}: success rate {:.4} ({} / {})",
            r.seed,
            r.metrics.success_rate(),
            r.metrics.successes,
            r.metrics.total_outcomes()
        );
    }
    println!(
        "{domain}: mean success rate {:.4}, best {:.4} over {} runs",
        report.mean_success_rate(),
        report.best_success_rate(),
        report.runs.len()
    );
    Ok(())
}

pub fn cmd_plot(a: PlotArgs) -> Result<()> {
    let read = |p: &PathBuf| fs::read(p).map_err(|e| CliError::usage(format!("cannot read `{}`: {e}", p.display())));
    let svg = match (&a.input.telemetry, &a.input.report) {
        (Some(p), _) => {
            let rows = read_telemetry(read(p)?.as_slice())
                .map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))?;
            plot::telemetry_svg(&rows)
        }
        (None, Some(p)) => {
            let rows = read_report(read(p)?.as_slice()).map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))?;
            plot::report_svg(&rows)
        }
        (None, None) => return Err(CliError::usage("one of --telemetry or --report is required")),
    };
    write_output(&a.out, svg.as_bytes())
}

pub fn cmd_terrain(a: TerrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(rtl_core::config::Profile::Desk),
    };
    if let Some(seed) = a.seed {
        cfg.terrain.seed = seed;
    }
    let domain = cfg
        .domain_config(&a.domain)
        .ok_or_else(|| CliError::usage(format!("unknown domain `{}`", a.domain)))?;
    let hf = generate_heightfield(&domain.terrain).map_err(|e| CliError::usage(e.to_string()))?;
    let hf = clamp_slopes(&hf, domain.terrain.slope_threshold);
    let mut csv = Vec::new();
    hf.write_csv(&mut csv).map_err(|e| CliError::runtime(e.to_string()))?;
    write_output(&a.out, &csv)?;
    if let Some(p) = &a.pgm {
        let mut img = Vec::new();
        hf.write_pgm(&mut img).map_err(|e| CliError::runtime(e.to_string()))?;
        write_output(p, &img)?;
    }
    println!("{} x {} cells of {} m", hf.cols(), hf.rows(), hf.cell_size());
    Ok(())
}
