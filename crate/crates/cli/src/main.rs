//! `fcdd`: synthesise, split, train, score, evaluate and explain.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(
    name = "fcdd",
    version,
    about = "One-class damage detection with fully convolutional data description"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Option<Command>,
}

/// Settings shared by every command. Precedence: defaults, then `--config`,
/// then `--set`, then command flags.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// key=value config file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. `--set train.epochs=5`
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the accepted config keys with their defaults and exit
    #[arg(long, global = true)]
    list_keys: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic defect corpus (normal/ and anomalous/ PNGs)
    Synth(commands::SynthArgs),
    /// Scan a dataset directory and write a stratified split manifest
    Split(commands::SplitArgs),
    /// Train a detector on the train split of a manifest
    Train(commands::TrainArgs),
    /// Score one split of a manifest
    Score(commands::ScoreArgs),
    /// Calibrate a threshold and report test metrics
    Eval(commands::EvalArgs),
    /// Render explanation heatmaps for images
    Heatmap(commands::HeatmapArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if cli.common.list_keys {
        print!("{}", commands::key_listing());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a command is required (synth, split, train, score, eval, heatmap); see --help");
        return ExitCode::from(2);
    };
    let result = match command {
        Command::Synth(a) => commands::synth(&cli.common, a),
        Command::Split(a) => commands::split(&cli.common, a),
        Command::Train(a) => commands::train(&cli.common, a),
        Command::Score(a) => commands::score(&cli.common, a),
        Command::Eval(a) => commands::eval(&cli.common, a),
        Command::Heatmap(a) => commands::heatmap(&cli.common, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
