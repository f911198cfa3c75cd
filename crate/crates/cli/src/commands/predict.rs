//! `pixie predict`: run a trained model over a feature grid, writing the
//! raw 11-channel prediction and/or the denormalized material field.

use std::path::PathBuf;

use clap::Args;

use pixie_core::io;
use pixie_core::predictor;

use crate::commands::{at, materialize_prediction};
use crate::config::Context;
use crate::error::CliError;
use crate::output::Stage;

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Model checkpoint (PXMODEL1).
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Feature grid (PXGRID1, f32 channels).
    #[arg(long, value_name = "FILE")]
    pub features: PathBuf,
    /// Occupancy mask (PXGRID1, bool).
    #[arg(long, value_name = "FILE")]
    pub mask: PathBuf,
    /// Raw prediction grid output (PXGRID1, 11 f32 channels).
    #[arg(long, value_name = "FILE")]
    pub out_pred: Option<PathBuf>,
    /// Denormalized material class grid output (pair with --out-params).
    #[arg(long, value_name = "FILE", requires = "out_params")]
    pub out_class: Option<PathBuf>,
    /// Denormalized material parameter grid output (pair with --out-class).
    #[arg(long, value_name = "FILE", requires = "out_class")]
    pub out_params: Option<PathBuf>,
}

pub fn run(ctx: &Context, args: &PredictArgs) -> Result<(), CliError> {
    if args.out_pred.is_none() && args.out_class.is_none() {
        return Err(CliError::Input(
            "nothing to write: pass --out-pred and/or --out-class/--out-params".into(),
        ));
    }
    let model = io::load_model::<f64>(&args.model).map_err(at(&args.model))?;
    let features = io::read_feature_grid::<f64>(&args.features).map_err(at(&args.features))?;
    let mask = io::read_occupancy(&args.mask).map_err(at(&args.mask))?;
    let pred = predictor::forward(&model, &features, &mask)?;

    let mut stage = Stage::new();
    if let Some(out) = &args.out_pred {
        io::write_prediction_grid(stage.path_for(out)?, &pred).map_err(at(out))?;
    }
    if let (Some(out_class), Some(out_params)) = (&args.out_class, &args.out_params) {
        let grid = materialize_prediction(&pred, &mask, &ctx.stats())?;
        io::write_material_grid(stage.path_for(out_class)?, stage.path_for(out_params)?, &grid)
            .map_err(at(out_class))?;
    }
    stage.commit()?;

    println!(
        "{}",
        serde_json::json!({
            "n": pred.n(),
            "occupied": mask.count_occupied(),
            "d": model.d(),
            "hidden": model.h(),
        })
    );
    Ok(())
}
