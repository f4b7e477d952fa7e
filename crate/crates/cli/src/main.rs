//! `lramp`: instance generation, AMP runs, state-evolution sweeps, phase
//! diagrams and spectral baselines for low-rank matrix estimation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Globals;
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "lramp", version, about = "Low-rank matrix estimation by approximate message passing")]
struct Cli {
    /// Master seed; overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "LRAMP_THREADS")]
    threads: Option<usize>,
    /// Output file (stdout when absent; required by `gen`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML experiment file; every field has a default.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted instance and write it to --out.
    Gen {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        delta: Option<f64>,
        /// Do not store the planted factors.
        #[arg(long)]
        blind: bool,
    },
    /// Run AMP on a generated or stored instance; writes a JSON report.
    Amp {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Instance container written by `gen`.
        #[arg(long)]
        instance: Option<PathBuf>,
        /// Per-iteration CSV (t, diff, mse, overlap).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        damping: Option<f64>,
        #[arg(long)]
        t_min: Option<usize>,
        #[arg(long)]
        t_max: Option<usize>,
    },
    /// State-evolution sweep over Δ; writes CSV.
    Se {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Report Δ r² in the delta column.
        #[arg(long)]
        rescale: bool,
    },
    /// Transition thresholds for a list of ranks; writes CSV.
    Phase {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
        /// Monte Carlo draws per M_r evaluation.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        grid_points: Option<usize>,
    },
    /// Top eigenvectors of S and Y against the planted factor; writes CSV.
    Spectral {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(short, long)]
        k: Option<usize>,
    },
    /// AMP on several channels at matched Δ against state evolution; writes CSV.
    Compare {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        n: Option<usize>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::field("threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::field("threads", e))?;
    }
    let g = Globals {
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::Gen { cfg, n, delta, blind } => {
            let mut c: config::GenConfig = config::load(cfg.config.as_deref())?;
            if let Some(n) = n {
                c.instance.n = n;
            }
            if delta.is_some() {
                c.instance.delta = delta;
            }
            c.blind |= blind;
            commands::gen(c, &g)
        }
        Command::Amp {
            cfg,
            instance,
            trace,
            damping,
            t_min,
            t_max,
        } => {
            let mut c: config::AmpConfig = config::load(cfg.config.as_deref())?;
            if instance.is_some() {
                c.instance_file = instance;
            }
            if let Some(d) = damping {
                c.amp.damping = d;
            }
            if let Some(t) = t_min {
                c.amp.t_min = t;
            }
            if let Some(t) = t_max {
                c.amp.t_max = t;
            }
            commands::amp(c, &g, trace.as_deref())
        }
        Command::Se { cfg, rescale } => {
            let mut c: config::SeConfig = config::load(cfg.config.as_deref())?;
            c.rescale |= rescale;
            commands::se(c, &g)
        }
        Command::Phase {
            cfg,
            ranks,
            samples,
            grid_points,
        } => {
            let mut c: config::PhaseConfig = config::load(cfg.config.as_deref())?;
            if let Some(r) = ranks {
                c.ranks = r;
            }
            if samples.is_some() {
                c.transition.samples = samples;
            }
            if let Some(p) = grid_points {
                c.transition.grid_points = p;
            }
            commands::phase(c, &g)
        }
        Command::Spectral { cfg, instance, k } => {
            let mut c: config::SpectralConfig = config::load(cfg.config.as_deref())?;
            if instance.is_some() {
                c.instance_file = instance;
            }
            if let Some(k) = k {
                c.k = k;
            }
            commands::spectral(c, &g)
        }
        Command::Compare { cfg, n } => {
            let mut c: config::CompareConfig = config::load(cfg.config.as_deref())?;
            if let Some(n) = n {
                c.n = n;
            }
            commands::compare(c, &g)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
