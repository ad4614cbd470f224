use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use bae_cli::{Overrides, Pipeline, PipelineConfig, Profile, Which};

#[derive(Parser)]
#[command(
    name = "bae",
    about = "Bayesian inversion with a cheap coarse model, corrected for approximation error",
    version
)]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true, default_value = "bae.toml")]
    config: PathBuf,
    /// Override the output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Override the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker-pool size.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Apply a preset problem size (slice study only).
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the truth on the fine model and add measurement noise.
    Synthesize,
    /// Sample the naive posterior (coarse model, noise-only likelihood).
    Naive,
    /// Build the approximation-error ensemble and its statistics.
    Errors,
    /// Sample the corrected posterior (coarse model, total-error likelihood).
    Bae,
    /// Posterior predictive quantiles for a completed chain.
    Predict {
        #[arg(long, value_enum, default_value = "bae")]
        which: WhichArg,
        /// Add error-model draws to the predictive curves.
        #[arg(long)]
        noisy: bool,
    },
    /// Closed-form posteriors for the polynomial problem.
    Oracle,
    /// Marginal histograms, feasibility table and telemetry.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    Naive,
    Bae,
}

impl From<WhichArg> for Which {
    fn from(which: WhichArg) -> Which {
        match which {
            WhichArg::Naive => Which::Naive,
            WhichArg::Bae => Which::Bae,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        output: cli.output,
        workers: cli.workers,
        profile: cli.profile,
    };
    let cfg = PipelineConfig::load(&cli.config, &overrides)?;
    let pipeline = Pipeline::new(cfg)?;
    match cli.command {
        Command::Synthesize => pipeline.cmd_synthesize()?,
        Command::Naive => pipeline.cmd_naive()?,
        Command::Errors => pipeline.cmd_errors()?,
        Command::Bae => pipeline.cmd_bae()?,
        Command::Predict { which, noisy } => pipeline.cmd_predict(which.into(), noisy)?,
        Command::Oracle => pipeline.cmd_oracle()?,
        Command::Report => pipeline.cmd_report()?,
    };
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
