//! `pixie synth`: generate a synthetic scene (features, density, occupancy,
//! part labels, ground-truth materials) from a scene spec JSON.

use std::path::PathBuf;

use clap::Args;

use pixie_core::io;
use pixie_core::synth::{self, SynthSceneSpec};

use crate::commands::{at, SampleEntry, SampleFile};
use crate::config::Context;
use crate::error::CliError;
use crate::output::{write_json, Stage};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Scene spec JSON (parts, shapes, feature means, ranged materials).
    #[arg(long, value_name = "FILE")]
    pub spec: PathBuf,
    /// Directory receiving the generated grids.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Grid resolution override (voxels per axis); defaults to config dims.
    #[arg(long, value_name = "N")]
    pub n: Option<usize>,
    /// Seed override for the spec's material sampling and feature noise.
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,
    /// Also write a one-channel occupancy-indicator feature grid.
    #[arg(long)]
    pub occupancy_features: bool,
}

pub fn run(ctx: &Context, args: &SynthArgs) -> Result<(), CliError> {
    let mut spec: SynthSceneSpec = crate::output::read_json(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let n = args.n.unwrap_or(ctx.config.dims.n);
    let scene = synth::generate::<f64>(&spec, n, &ctx.config.bounds)?;
    let mask = scene.mask();

    let dir = args.out_dir.as_path();
    let mut stage = Stage::new();
    io::write_feature_grid(stage.path_for(dir.join("features.pxgrid"))?, &scene.features)
        .map_err(at(dir))?;
    io::write_density_grid(stage.path_for(dir.join("density.pxgrid"))?, &scene.density)
        .map_err(at(dir))?;
    io::write_occupancy(stage.path_for(dir.join("occupancy.pxgrid"))?, &mask).map_err(at(dir))?;
    io::write_part_labels(stage.path_for(dir.join("labels.pxgrid"))?, &scene.labels)
        .map_err(at(dir))?;
    io::write_material_grid(
        stage.path_for(dir.join("material_class.pxgrid"))?,
        stage.path_for(dir.join("material_params.pxgrid"))?,
        &scene.materials,
    )
    .map_err(at(dir))?;
    let palette: SampleFile = spec
        .parts
        .iter()
        .zip(&scene.palette)
        .map(|(part, (class, params))| (part.name.clone(), SampleEntry::new(*class, params)))
        .collect();
    write_json(&stage.path_for(dir.join("palette.json"))?, &palette)?;
    if args.occupancy_features {
        let occ = synth::occupancy_features::<f64>(&mask);
        io::write_feature_grid(stage.path_for(dir.join("occupancy_features.pxgrid"))?, &occ)
            .map_err(at(dir))?;
    }
    stage.commit()?;

    println!(
        "{}",
        serde_json::json!({
            "n": n,
            "feature_dim": scene.features.dims().d,
            "occupied": mask.count_occupied(),
            "parts": scene.palette.len(),
            "out_dir": dir,
        })
    );
    Ok(())
}
