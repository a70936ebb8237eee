//! `fairdiff` — fair tabular data generation with guided diffusion.
//!
//! Subcommands: `prepare`, `train`, `sample`, `evaluate`, `lodo`. All state
//! flows through the config file's `output_dir`; every command is
//! deterministic given (inputs, config, seed).
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric
//! error.

mod artifacts;
mod commands;
mod config;
mod schema_io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "fairdiff", version, about = "Fair tabular data generation with guided diffusion")]
struct Cli {
    /// Experiment config file (TOML with dotted keys).
    #[arg(long, global = true, default_value = "fairdiff.toml")]
    config: PathBuf,
    /// Thread budget hint; the current implementation runs sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate the schema, encode the data CSV and cache the result.
    Prepare,
    /// Train the score network and the two guidance classifiers.
    Train {
        /// Override `training.iterations`.
        #[arg(long)]
        iterations: Option<u64>,
        /// Continue from the last checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Generate synthetic rows from the trained models.
    Sample {
        #[arg(long)]
        num_samples: Option<usize>,
        /// Label-guidance strength.
        #[arg(long)]
        lambda_y: Option<f32>,
        /// Sensitive-entropy guidance strength.
        #[arg(long)]
        lambda_z: Option<f32>,
        /// Reverse-integration steps.
        #[arg(long)]
        steps: Option<usize>,
        /// `prior`, `uniform` or `fixed:<class index>`.
        #[arg(long)]
        label_policy: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path (default `<output_dir>/synthetic.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a downstream classifier on synthetic data and report accuracy
    /// and fairness ratios on real held-out domains.
    Evaluate {
        /// Synthetic CSV produced by `sample`.
        #[arg(long)]
        syn: PathBuf,
        /// Real domain to evaluate on (category name of the domain column).
        #[arg(long, conflicts_with = "all_domains")]
        target_domain: Option<String>,
        /// Evaluate every domain and append the unweighted average.
        #[arg(long)]
        all_domains: bool,
    },
    /// Leave-one-domain-out selection over candidate configurations.
    Lodo {
        /// TOML file with `[[candidate]]` override tables.
        #[arg(long)]
        candidates: PathBuf,
        /// Override `lodo.budget` (iterations per fold).
        #[arg(long)]
        budget: Option<u64>,
    },
}

fn run(cli: Cli) -> fairdiff_core::Result<()> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if cfg.threads == 0 {
        return Err(fairdiff_core::Error::Usage("threads must be >= 1".into()));
    }
    match cli.cmd {
        Cmd::Prepare => commands::prepare(&cfg),
        Cmd::Train { iterations, resume } => commands::train(&cfg, iterations, resume),
        Cmd::Sample { num_samples, lambda_y, lambda_z, steps, label_policy, seed, out } => {
            commands::sample(
                &cfg,
                commands::SampleFlags { num_samples, lambda_y, lambda_z, steps, label_policy, seed, out },
            )
        }
        Cmd::Evaluate { syn, target_domain, all_domains } => {
            commands::evaluate(&cfg, &syn, target_domain.as_deref(), all_domains)
        }
        Cmd::Lodo { candidates, budget } => commands::lodo(&cfg, &candidates, budget),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
