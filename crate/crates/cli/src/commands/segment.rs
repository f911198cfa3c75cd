//! `pixie segment`: label every occupied voxel with the cosine-nearest
//! part query.

use std::path::PathBuf;

use clap::Args;

use pixie_core::io;
use pixie_core::segmentation;

use crate::commands::{at, load_queries};
use crate::config::Context;
use crate::error::CliError;
use crate::output::Stage;

#[derive(Args, Debug)]
pub struct SegmentArgs {
    /// Feature grid (PXGRID1, f32 channels).
    #[arg(long, value_name = "FILE")]
    pub features: PathBuf,
    /// Occupancy mask (PXGRID1, bool).
    #[arg(long, value_name = "FILE")]
    pub mask: PathBuf,
    /// Query set JSON; defaults to the config's `query_set`.
    #[arg(long, value_name = "FILE")]
    pub queries: Option<PathBuf>,
    /// Output part-label grid (PXGRID1, u8).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

pub fn run(ctx: &Context, args: &SegmentArgs) -> Result<(), CliError> {
    let features = io::read_feature_grid::<f64>(&args.features).map_err(at(&args.features))?;
    let mask = io::read_occupancy(&args.mask).map_err(at(&args.mask))?;
    let queries = load_queries(ctx, args.queries.as_deref())?;
    let segmentation = segmentation::segment(&features, &mask, &queries)?;

    let mut stage = Stage::new();
    io::write_part_labels(stage.path_for(&args.out)?, &segmentation.labels)
        .map_err(at(&args.out))?;
    stage.commit()?;

    println!(
        "{}",
        serde_json::json!({
            "parts": queries.parts.len(),
            "occupied": mask.count_occupied(),
            "ties": segmentation.ties,
            "zero_norm_voxels": segmentation.zero_norm_voxels,
            "out": args.out,
        })
    );
    Ok(())
}
