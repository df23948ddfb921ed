//! `confdepth`: synthetic stereo data, ensemble confidence, confidence-aware
//! depth refinement and evaluation from the command line.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod colormap;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{Command, RunArgs};
use crate::config::Override;
use crate::error::CliError;

const OVERRIDE_HELP: &str = "Any other --key=value flag sets a config field and wins over the file; \
nested fields use dots (--refine.lr=5) and list items an index (--scenes.0.k=3). \
Values are read as JSON when they parse, as strings otherwise.";

#[derive(Parser)]
#[command(name = "confdepth", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render synthetic stereo scenes with artifacts and a disparity ensemble.
    GenData(Common),
    /// Per-sample ensemble variance and confidence maps.
    Confidence(Common),
    /// Refine depth under the confidence-weighted loss.
    Refine(Common),
    /// Run the confidence-head / confidence-loss grid and the sigma sweep.
    Ablate(Common),
    /// Score predicted depth maps against ground truth.
    Eval(Common),
    /// Evaluate and render depth, error and confidence overlays.
    Report(Common),
    /// Train the confidence head on ensemble labels.
    TrainHead(Common),
}

#[derive(Args)]
#[command(after_help = OVERRIDE_HELP)]
struct Common {
    /// JSON config file; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

/// Separates `--key=value` config overrides from the arguments clap knows.
fn split_args(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<Override>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match Override::parse(&a) {
            Some(o) if o.key != "config" && o.key != "out" => overrides.push(o),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("CONFDEPTH_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("CONFDEPTH_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, overrides) = split_args(std::env::args());
    let cli = Cli::parse_from(args);
    let (cmd, common) = match cli.command {
        Cmd::GenData(c) => (Command::GenData, c),
        Cmd::Confidence(c) => (Command::Confidence, c),
        Cmd::Refine(c) => (Command::Refine, c),
        Cmd::Ablate(c) => (Command::Ablate, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::Report(c) => (Command::Report, c),
        Cmd::TrainHead(c) => (Command::TrainHead, c),
    };
    let run_args = RunArgs {
        config: common.config.as_deref(),
        out: &common.out,
        force: common.force,
        overrides: &overrides,
    };
    match init_threads().and_then(|_| commands::run(cmd, &run_args)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            log::debug!("{e:?}");
            ExitCode::from(e.exit_code())
        }
    }
}
