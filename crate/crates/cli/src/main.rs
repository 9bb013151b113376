//! `speechground` command-line driver.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const VERSION: &str = env!("SPEECHGROUND_VERSION");

#[derive(Parser, Debug)]
#[command(name = "speechground", version = VERSION, about = "Speech-guided 3D grounding on synthetic rooms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val scenes and utterances.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        scenes: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        val_scenes: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        utterances_per_scene: Option<u64>,
    },
    /// Train a model on `<data>/train`, validating on `<data>/val`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint and write the accuracy breakdown.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fusion weight; defaults to the config's `beta`.
        #[arg(long)]
        beta: Option<f64>,
        /// Subdirectory of `--data` to score.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Train and score a sweep over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// modules | alignment | beta | rate | noise
        #[arg(long)]
        sweep: String,
        /// Comma-separated values for rate and noise sweeps.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Comma-separated seeds; defaults to seed, seed+1, seed+2.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Dataset root; a small split is generated from the seed when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Render charts from ablation tables and run logs.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Ablation CSV or run log; repeatable.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common, scenes, val_scenes, utterances_per_scene } => {
            commands::gen_data(&common, scenes, val_scenes, utterances_per_scene)
        }
        Command::Train { common, data } => commands::train(&common, &data),
        Command::Eval { common, data, checkpoint, beta, split } => commands::eval(&common, &data, &checkpoint, beta, &split),
        Command::Ablate { common, data, sweep, values, seeds } => commands::ablate(&common, &data, &sweep, &values, &seeds),
        Command::Gradcheck { common, data, eps } => commands::gradcheck(&common, data.as_deref(), eps),
        Command::Plot { common, inputs } => commands::plot(&common, &inputs),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
