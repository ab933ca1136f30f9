//! Command-line entry point.

mod commands;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::attribution::AttributionMode;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::steering::{BackendKind, Gating};

pub const CONFIG_ENV: &str = "LTSFS_CONFIG";

#[derive(Debug, Parser)]
#[command(
    name = "ltsfs",
    version,
    about = "Layer attribution and layerwise sparse feature steering on a planted toy transformer"
)]
pub struct Cli {
    /// TOML run configuration; unset fields take their defaults.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Overrides the dataset seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for evaluation and attribution.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Proceed despite stale inputs and take over a held lock.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Token,
    Sentence,
    Both,
}

impl From<ModeArg> for AttributionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Token => AttributionMode::Token,
            ModeArg::Sentence => AttributionMode::Sentence,
            ModeArg::Both => AttributionMode::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    MeanShift,
    NullSpace,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::MeanShift => BackendKind::MeanShift,
            BackendArg::NullSpace => BackendKind::NullSpace,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GatingArg {
    Hard,
    Soft,
}

impl From<GatingArg> for Gating {
    fn from(g: GatingArg) -> Self {
        match g {
            GatingArg::Hard => Gating::Hard,
            GatingArg::Soft => Gating::Soft,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the planted (or random) model and write its weight file.
    BuildModel,
    /// Generate calibration, reference and evaluation samples from the model.
    GenData,
    /// Score every layer on the calibration split.
    Attribute {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Fit the steering backend and allocate per-layer intensities.
    Plan {
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
        #[arg(long, value_enum)]
        gating: Option<GatingArg>,
        #[arg(long)]
        r_s: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Compare unsteered, uniform and layerwise decoding.
    SteerEval {
        /// Evaluate on the samples of another run directory.
        #[arg(long)]
        eval_dir: Option<PathBuf>,
        /// Run the multi-seed planted benchmark instead of the stored artifacts.
        #[arg(long, conflicts_with = "eval_dir")]
        benchmark: bool,
    },
    /// Ablation tables: the r_s grid, granularity modes and soft gating.
    SweepRs,
    /// Per-token latency of steered against unsteered decoding.
    Bench {
        #[arg(long)]
        tokens: Option<usize>,
    },
    /// Render a summary of every recorded result.
    Report,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Stale(_) => 2,
        Error::Invariant(_) => 3,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.dataset.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_cli(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("threads: {e}")))?;
    }
    let cfg = load_config(&cli)?;
    commands::dispatch(&cfg, &cli.command, cli.force)
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run_cli(cli) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                Error::Missing(items) | Error::Stale(items) => {
                    for i in items {
                        eprintln!("error: {i}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            exit_code(&e)
        }
    }
}
