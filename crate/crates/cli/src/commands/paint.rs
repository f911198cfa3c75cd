//! `pixie paint`: turn part labels plus sampled materials into a concrete
//! per-voxel material grid. The query set fixes which part name stands
//! behind each label index.

use std::path::PathBuf;

use clap::Args;

use pixie_core::io;
use pixie_core::segmentation::paint_materials;

use crate::commands::{at, load_queries, SampleFile};
use crate::config::Context;
use crate::error::CliError;
use crate::output::{read_json, Stage};

#[derive(Args, Debug)]
pub struct PaintArgs {
    /// Part-label grid (PXGRID1, u8).
    #[arg(long, value_name = "FILE")]
    pub labels: PathBuf,
    /// Sampled materials JSON, as written by `pixie sample`.
    #[arg(long, value_name = "FILE")]
    pub samples: PathBuf,
    /// Query set fixing the part order; defaults to the config's.
    #[arg(long, value_name = "FILE")]
    pub queries: Option<PathBuf>,
    /// Output material class grid (PXGRID1, u8).
    #[arg(long, value_name = "FILE")]
    pub out_class: PathBuf,
    /// Output material parameter grid (PXGRID1, f32 x 3).
    #[arg(long, value_name = "FILE")]
    pub out_params: PathBuf,
}

pub fn run(ctx: &Context, args: &PaintArgs) -> Result<(), CliError> {
    let labels = io::read_part_labels(&args.labels).map_err(at(&args.labels))?;
    let samples: SampleFile = read_json(&args.samples)?;
    let queries = load_queries(ctx, args.queries.as_deref())?;

    let mut palette = Vec::with_capacity(queries.parts.len());
    for part in &queries.parts {
        let entry = samples.get(&part.name).ok_or_else(|| {
            CliError::Input(format!(
                "samples file {} has no entry for part {:?}",
                args.samples.display(),
                part.name
            ))
        })?;
        palette.push((entry.class, entry.params()?));
    }
    let grid = paint_materials(&labels, &palette)?;

    let mut stage = Stage::new();
    io::write_material_grid(
        stage.path_for(&args.out_class)?,
        stage.path_for(&args.out_params)?,
        &grid,
    )
    .map_err(at(&args.out_class))?;
    stage.commit()?;

    println!(
        "{}",
        serde_json::json!({
            "parts": palette.len(),
            "painted": grid.implied_mask().count_occupied(),
            "out_class": args.out_class,
            "out_params": args.out_params,
        })
    );
    Ok(())
}
