//! `fundus-t2d` command-line front-end.
//!
//! Usage errors exit with status 2; runtime failures exit with status 1 and
//! print one `CODE: message` line on standard error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Context;
use config::{ExperimentConfig, Layout};

#[derive(Parser)]
#[command(name = "fundus-t2d", version, about = "Retinal-image T2D screening experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overrides the root seed of the configuration.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Worker threads. Computation is single-threaded; accepted for
    /// interface compatibility.
    #[arg(long, value_name = "INT", default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (images + manifest).
    Synth(Common),
    /// Split individuals into train / validation / test.
    Split(Common),
    /// Train one model per seed and evaluate it on the test split.
    Train(Common),
    /// Test-time-augmentation predictions for every image.
    Predict(Common),
    /// Referral curves (CSV + SVG) per uncertainty measure.
    Refer(Common),
    /// Individual-level aggregation of image predictions.
    Aggregate(Common),
    /// Summary tables from earlier outputs.
    Report(Common),
}

fn run(command: Command) -> fundus_t2d::Result<()> {
    let (Command::Synth(c)
    | Command::Split(c)
    | Command::Train(c)
    | Command::Predict(c)
    | Command::Refer(c)
    | Command::Aggregate(c)
    | Command::Report(c)) = &command;
    let cfg = ExperimentConfig::load(&c.config)?.resolve(c.seed)?;
    let ctx = Context::new(cfg, Layout { out: c.out.clone() });
    match command {
        Command::Synth(_) => commands::synth(&ctx),
        Command::Split(_) => commands::split(&ctx),
        Command::Train(_) => commands::train(&ctx),
        Command::Predict(_) => commands::predict(&ctx),
        Command::Refer(_) => commands::refer(&ctx),
        Command::Aggregate(_) => commands::aggregate_cmd(&ctx),
        Command::Report(_) => commands::report(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
