//! `proplab`: batch pipelines for propagator estimation and evaluation.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use proplab::evaluation::{ModelKind, SweepAxis};
use proplab::impact::KernelFamily;

use crate::config::{ConfigError, RunConfig};

/// Estimation, evaluation and simulation of concave price-impact propagators.
#[derive(Debug, Parser)]
#[command(name = "proplab", version, about)]
pub struct Cli {
    /// TOML run configuration; `PROPLAB_<SECTION>__<KEY>` variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed for the simulators and the metaorder proxy.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Caps the number of worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Writes the resolved configuration and input/output hashes to
    /// `manifest.json` in the output directory.
    #[arg(long, global = true)]
    pub manifest: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct OutArgs {
    /// Output directory (created if missing).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Episode CSV: normalized (`return`, `volume` columns) unless `--bars`.
    #[arg(long)]
    pub episodes: Option<PathBuf>,
    /// The input holds raw bars (first/high/low/last/signed_volume) to normalize.
    #[arg(long)]
    pub bars: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulates episodes (and optionally ticks) from a known kernel.
    Simulate {
        #[command(flatten)]
        out: OutArgs,
        /// Also simulate a tick stream for the metaorder proxy.
        #[arg(long)]
        ticks: bool,
    },
    /// Builds synthetic metaorders from a tick file.
    Proxy {
        /// Tick CSV (`timestamp_ns,asset_id,signed_volume,price`).
        #[arg(long)]
        ticks: Option<PathBuf>,
        /// One trader id per tick instead of random assignment.
        #[arg(long)]
        ids_file: Option<PathBuf>,
        #[arg(long)]
        n_t: Option<usize>,
        #[arg(long)]
        min_children: Option<usize>,
        /// Also write one binned episode per metaorder.
        #[arg(long)]
        episodes: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Ridge estimate and its projection onto the admissible cone.
    Estimate {
        #[command(flatten)]
        data: DataArgs,
        /// Skip the projection and write the raw estimate only.
        #[arg(long)]
        no_project: bool,
        /// Comma-separated λ values; one output directory per value.
        #[arg(long, value_delimiter = ',')]
        lambda_grid: Option<Vec<f64>>,
        /// True kernel (CSV or JSON) for error reporting and the confidence radius.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Sub-Gaussian noise constant for the confidence radius.
        #[arg(long)]
        noise_r: Option<f64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Grid-search fit of a parametric kernel family.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// `1exp`, `2exp` or `power`.
        #[arg(long)]
        family: KernelFamily,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Rolling in-sample / out-of-sample R² of several models.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<ModelKind>>,
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
        /// Add a notional-weighted market portfolio asset (requires `--bars`).
        #[arg(long)]
        market_portfolio: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// R² as a function of the concavity exponent.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: Option<ModelKind>,
        /// `self`, `cross` or `both`.
        #[arg(long, value_parser = parse_axis)]
        axis: Option<SweepAxis>,
        #[arg(long, value_delimiter = ',')]
        c_grid: Option<Vec<f64>>,
        #[arg(long)]
        horizon: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Constructs a trade schedule with negative execution cost.
    Manipulate {
        /// Kernel file: parametric JSON, tensor JSON or tensor CSV.
        #[arg(long)]
        kernel: PathBuf,
        /// Concavity exponent of the impact function.
        #[arg(long)]
        c: Option<f64>,
        #[command(flatten)]
        out: OutArgs,
    },
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    match s.to_ascii_lowercase().as_str() {
        "self" | "self_impact" => Ok(SweepAxis::SelfImpact),
        "cross" | "cross_impact" => Ok(SweepAxis::CrossImpact),
        "both" => Ok(SweepAxis::Both),
        other => Err(format!("unknown axis `{other}`; expected self, cross or both")),
    }
}

/// Raised when the projection stops at its iteration cap; exit code 4.
#[derive(Debug)]
pub struct NotConverged(pub String);

impl std::fmt::Display for NotConverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "projection did not converge: {}", self.0)
    }
}

impl std::error::Error for NotConverged {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.chain().any(|c| c.is::<ConfigError>()) {
        2
    } else if e.chain().any(|c| c.is::<NotConverged>()) {
        4
    } else {
        3
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(config::config_error("--threads must be ≥ 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow::anyhow!("cannot size the thread pool: {e}"))?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), std::env::vars())?;
    cfg.apply_seed(cli.seed);
    commands::dispatch(&cli, cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
