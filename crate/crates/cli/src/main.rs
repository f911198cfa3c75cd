//! `pixie`: one static binary wiring the material pipeline end to end —
//! synthesize voxel scenes, segment features into parts, sample materials
//! under constraints, train and run the material predictor, simulate the
//! result with MPM, and score the outputs.
//!
//! Every subcommand is a pure function of its input files and the run
//! config; flags override config keys. Success exits 0; any failure prints
//! `{"error": {"code", "message"}}` on stderr and exits nonzero. Outputs
//! are staged to temp files and renamed into place, so failed commands
//! leave no partial files.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::Context;
use error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "pixie",
    version,
    about = "Voxel feature grids to material fields to motion",
    propagate_version = true
)]
struct Cli {
    /// Run-config JSON; every flag below overrides the matching key.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker thread count (0 = all cores). Falls back to PIXIE_THREADS.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Force reproducible single-threaded execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene: grids, labels and materials.
    Synth(commands::synth::SynthArgs),
    /// Label occupied voxels with the cosine-nearest part query.
    Segment(commands::segment::SegmentArgs),
    /// Draw concrete materials from a ranged spec under constraints.
    Sample(commands::sample::SampleArgs),
    /// Paint part labels with sampled materials into a material grid.
    Paint(commands::paint::PaintArgs),
    /// Train the material predictor on a directory of scenes.
    Train(commands::train::TrainArgs),
    /// Run a trained model over a feature grid.
    Predict(commands::predict::PredictArgs),
    /// Simulate a material field with the MPM solver.
    Sim(commands::sim::SimArgs),
    /// Score predictions, compare trajectories, aggregate metrics.
    Eval(commands::eval::EvalArgs),
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            emit_error("usage", &e.to_string());
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            emit_error(err.code(), &err.to_string());
            1
        }
    }
}

fn emit_error(code: &str, message: &str) {
    let payload = serde_json::json!({ "error": { "code": code, "message": message } });
    eprintln!("{payload}");
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let ctx = Context::load(cli.config.as_deref(), cli.deterministic)?;
    init_threads(cli.threads, ctx.deterministic)?;
    match &cli.command {
        Command::Synth(args) => commands::synth::run(&ctx, args),
        Command::Segment(args) => commands::segment::run(&ctx, args),
        Command::Sample(args) => commands::sample::run(&ctx, args),
        Command::Paint(args) => commands::paint::run(&ctx, args),
        Command::Train(args) => commands::train::run(&ctx, args),
        Command::Predict(args) => commands::predict::run(&ctx, args),
        Command::Sim(args) => commands::sim::run(&ctx, args),
        Command::Eval(args) => commands::eval::run(&ctx, args),
    }
}

/// Configures the global worker pool. Priority: deterministic mode (one
/// thread), then --threads, then PIXIE_THREADS; otherwise the library
/// default. All reductions are fixed-order, so results are identical for
/// any thread count — deterministic mode just removes scheduling variance.
fn init_threads(flag: Option<usize>, deterministic: bool) -> Result<(), CliError> {
    let requested = if deterministic {
        Some(1)
    } else if let Some(n) = flag {
        Some(n)
    } else {
        match std::env::var("PIXIE_THREADS") {
            Ok(raw) => Some(raw.trim().parse::<usize>().map_err(|_| {
                CliError::Config(format!("PIXIE_THREADS must be an integer, got {raw:?}"))
            })?),
            Err(_) => None,
        }
    };
    if let Some(n) = requested {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("failed to configure thread pool: {e}")))?;
    }
    Ok(())
}
