//! `pixie train`: fit the predictor on a directory of scenes. Each scene is
//! a subdirectory holding `features.pxgrid`, `occupancy.pxgrid`,
//! `material_class.pxgrid` and `material_params.pxgrid` (the layout written
//! by `pixie synth`); subdirectories are visited in sorted order.

use std::path::{Path, PathBuf};

use clap::Args;

use pixie_core::io;
use pixie_core::materials::NormStats;
use pixie_core::predictor::{self, PredictorModel, TrainExample};
use pixie_core::real::Real;

use crate::commands::at;
use crate::config::Context;
use crate::error::CliError;
use crate::output::Stage;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory with one scene subdirectory per example.
    #[arg(long, value_name = "DIR")]
    pub data_dir: PathBuf,
    /// Output model checkpoint (PXMODEL1).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Optional per-epoch loss trace CSV.
    #[arg(long, value_name = "FILE")]
    pub loss_csv: Option<PathBuf>,
    /// Epoch count override.
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Initial learning-rate override.
    #[arg(long, value_name = "LR")]
    pub learning_rate: Option<f64>,
    /// Hidden width override.
    #[arg(long, value_name = "H")]
    pub hidden: Option<usize>,
    /// Cross-entropy weight override.
    #[arg(long, value_name = "L")]
    pub lambda: Option<f64>,
    /// Parameter-init seed override.
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,
}

/// Loads every scene subdirectory of `dir`, sorted by name.
pub fn load_dataset(
    dir: &Path,
    stats: &NormStats<f64>,
) -> Result<Vec<TrainExample<f64>>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::file(dir, e))?;
    let mut scene_dirs: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::file(dir, e))?;
        if entry.file_type().map_err(|e| CliError::file(dir, e))?.is_dir() {
            scene_dirs.push(entry.path());
        }
    }
    scene_dirs.sort();
    if scene_dirs.is_empty() {
        return Err(CliError::Input(format!(
            "dataset directory {} has no scene subdirectories",
            dir.display()
        )));
    }
    let mut examples = Vec::with_capacity(scene_dirs.len());
    for scene in &scene_dirs {
        let features = io::read_feature_grid::<f64>(scene.join("features.pxgrid"))
            .map_err(at(&scene.join("features.pxgrid")))?;
        let mask = io::read_occupancy(scene.join("occupancy.pxgrid"))
            .map_err(at(&scene.join("occupancy.pxgrid")))?;
        let material = io::read_material_grid::<f64>(
            scene.join("material_class.pxgrid"),
            scene.join("material_params.pxgrid"),
        )
        .map_err(at(scene))?;
        let (target, _clamped) = stats.normalize_grid(&material, &mask)?;
        examples.push(TrainExample {
            features,
            target,
            mask,
        });
    }
    Ok(examples)
}

pub fn run(ctx: &Context, args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = ctx.config.train.clone();
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;

    let stats = ctx.stats();
    let examples = load_dataset(&args.data_dir, &stats)?;
    let d = examples[0].features.dims().d;
    let model = PredictorModel::<f64>::init(d, cfg.hidden, cfg.seed)?;
    let (model, trace) = predictor::train(model, &examples, &cfg)?;

    let mut stage = Stage::new();
    io::save_model(stage.path_for(&args.out)?, &model).map_err(at(&args.out))?;
    if let Some(csv) = &args.loss_csv {
        io::write_loss_trace_csv(stage.path_for(csv)?, &trace).map_err(at(csv))?;
    }
    stage.commit()?;

    let final_loss = trace.last().expect("trace is never empty");
    println!(
        "{}",
        serde_json::json!({
            "scenes": examples.len(),
            "d": d,
            "hidden": cfg.hidden,
            "epochs_run": trace.len() - 1,
            "final_loss": final_loss.total.to64(),
            "out": args.out,
        })
    );
    Ok(())
}
