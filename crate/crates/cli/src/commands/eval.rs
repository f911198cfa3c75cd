//! `pixie eval`: metric reports. `pred` scores a prediction grid against
//! ground-truth materials, `traj` computes per-frame RMSE between two
//! trajectories, `aggregate` pools per-scene metric files into mean and
//! standard error.

use std::path::PathBuf;

use clap::{Args, Subcommand};

use pixie_core::eval::{self, TrajectoryRmse};
use pixie_core::io;
use pixie_core::predictor::{self, Metrics};
use pixie_core::real::Real;

use crate::commands::at;
use crate::config::Context;
use crate::error::CliError;
use crate::output::{read_json, write_json, write_string, Stage};

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(subcommand)]
    pub which: EvalCommand,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Score a prediction grid against ground-truth materials.
    Pred(EvalPredArgs),
    /// Per-frame position RMSE between two trajectories of equal shape.
    Traj(EvalTrajArgs),
    /// Pool per-scene metric JSON files into mean and standard error.
    Aggregate(EvalAggregateArgs),
}

#[derive(Args, Debug)]
pub struct EvalPredArgs {
    /// Prediction grid (PXGRID1, 11 f32 channels).
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    /// Ground-truth material class grid.
    #[arg(long, value_name = "FILE")]
    pub class: PathBuf,
    /// Ground-truth material parameter grid.
    #[arg(long, value_name = "FILE")]
    pub params: PathBuf,
    /// Occupancy mask restricting the comparison.
    #[arg(long, value_name = "FILE")]
    pub mask: PathBuf,
    /// Metrics JSON output (also printed to stdout).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalTrajArgs {
    /// Trajectory under test (PXFRAME1).
    #[arg(long, value_name = "FILE")]
    pub traj: PathBuf,
    /// Reference trajectory of identical shape (PXFRAME1).
    #[arg(long, value_name = "FILE")]
    pub reference: PathBuf,
    /// RMSE JSON output (also printed to stdout).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Optional per-frame RMSE CSV.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalAggregateArgs {
    /// Per-scene metric JSON files, as written by `eval pred`.
    #[arg(long = "input", value_name = "FILE", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Report JSON output (also printed to stdout).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Optional fixed-column CSV (metric, mean, stderr).
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
}

pub fn run(ctx: &Context, args: &EvalArgs) -> Result<(), CliError> {
    match &args.which {
        EvalCommand::Pred(a) => run_pred(ctx, a),
        EvalCommand::Traj(a) => run_traj(a),
        EvalCommand::Aggregate(a) => run_aggregate(a),
    }
}

fn run_pred(ctx: &Context, args: &EvalPredArgs) -> Result<(), CliError> {
    let pred = io::read_prediction_grid::<f64>(&args.pred).map_err(at(&args.pred))?;
    let material =
        io::read_material_grid::<f64>(&args.class, &args.params).map_err(at(&args.class))?;
    let mask = io::read_occupancy(&args.mask).map_err(at(&args.mask))?;
    let (target, _clamped) = ctx.stats().normalize_grid(&material, &mask)?;
    let metrics = predictor::evaluate(&pred, &target, &mask)?;

    if let Some(out) = &args.out {
        let mut stage = Stage::new();
        write_json(&stage.path_for(out)?, &metrics)?;
        stage.commit()?;
    }
    println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
    Ok(())
}

fn run_traj(args: &EvalTrajArgs) -> Result<(), CliError> {
    let traj = io::read_trajectory::<f64>(&args.traj).map_err(at(&args.traj))?;
    let reference = io::read_trajectory::<f64>(&args.reference).map_err(at(&args.reference))?;
    let rmse: TrajectoryRmse<f64> = eval::trajectory_rmse(&traj, &reference)?;

    let mut stage = Stage::new();
    if let Some(out) = &args.out {
        write_json(&stage.path_for(out)?, &rmse)?;
    }
    if let Some(csv) = &args.csv {
        write_string(&stage.path_for(csv)?, &rmse.to_csv())?;
    }
    stage.commit()?;

    println!(
        "{}",
        serde_json::json!({
            "frames": rmse.per_frame.len(),
            "mean_rmse": rmse.mean.to64(),
        })
    );
    Ok(())
}

fn run_aggregate(args: &EvalAggregateArgs) -> Result<(), CliError> {
    let mut per_scene = Vec::with_capacity(args.inputs.len());
    for path in &args.inputs {
        let metrics: Metrics = read_json(path)?;
        per_scene.push(metrics);
    }
    let report = eval::aggregate(&per_scene)?;

    let mut stage = Stage::new();
    if let Some(out) = &args.out {
        write_string(&stage.path_for(out)?, &(report.to_json() + "\n"))?;
    }
    if let Some(csv) = &args.csv {
        write_string(&stage.path_for(csv)?, &report.to_csv())?;
    }
    stage.commit()?;

    println!("{}", report.to_json());
    Ok(())
}
