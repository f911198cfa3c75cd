//! `pixie sim`: sample particles from a material field and run the MPM
//! solver. Input is either a concrete material grid (`--class/--params`) or
//! a raw prediction plus mask (`--pred/--mask`), which is materialized with
//! the config's normalization bounds first. The simulation grid is always
//! fitted to the config's scene bounds.

use std::path::PathBuf;

use clap::Args;

use pixie_core::io;
use pixie_core::mpm;

use crate::commands::{at, materialize_prediction};
use crate::config::Context;
use crate::error::CliError;
use crate::output::Stage;

/// A `x,y,z` triple of finite floats as a single flag value.
#[derive(Clone, Copy, Debug)]
pub struct Vec3Arg(pub [f64; 3]);

pub fn parse_vec3(s: &str) -> Result<Vec3Arg, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated numbers, got {s:?}"));
    }
    let mut v = [0.0f64; 3];
    for (slot, part) in v.iter_mut().zip(&parts) {
        let x: f64 = part
            .trim()
            .parse()
            .map_err(|e| format!("bad component {part:?}: {e}"))?;
        if !x.is_finite() {
            return Err(format!("component {part:?} must be finite"));
        }
        *slot = x;
    }
    Ok(Vec3Arg(v))
}

#[derive(Args, Debug)]
pub struct SimArgs {
    /// Material class grid input (pair with --params).
    #[arg(long, value_name = "FILE", requires = "params", conflicts_with_all = ["pred", "mask"])]
    pub class: Option<PathBuf>,
    /// Material parameter grid input (pair with --class).
    #[arg(long, value_name = "FILE", requires = "class")]
    pub params: Option<PathBuf>,
    /// Raw prediction grid input (pair with --mask).
    #[arg(long, value_name = "FILE", requires = "mask")]
    pub pred: Option<PathBuf>,
    /// Occupancy mask for --pred.
    #[arg(long, value_name = "FILE", requires = "pred")]
    pub mask: Option<PathBuf>,
    /// Output trajectory (PXFRAME1).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Directory receiving one ascii PLY point cloud per frame.
    #[arg(long, value_name = "DIR")]
    pub ply_dir: Option<PathBuf>,
    /// Optional flat CSV of positions (frame, id, x, y, z).
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
    /// Frame count override.
    #[arg(long, value_name = "N")]
    pub frames: Option<usize>,
    /// Frame time-step override (seconds).
    #[arg(long, value_name = "DT")]
    pub dt: Option<f64>,
    /// Gravity override as `x,y,z` (m/s^2).
    #[arg(long, value_name = "X,Y,Z", value_parser = parse_vec3, allow_hyphen_values = true)]
    pub gravity: Option<Vec3Arg>,
    /// Wind acceleration override as `x,y,z` (m/s^2).
    #[arg(long, value_name = "X,Y,Z", value_parser = parse_vec3, allow_hyphen_values = true)]
    pub wind: Option<Vec3Arg>,
    /// Particle-jitter seed; defaults to the config's `seed`.
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,
}

pub fn run(ctx: &Context, args: &SimArgs) -> Result<(), CliError> {
    let mut sim = ctx.config.sim.clone();
    if let Some(v) = args.frames {
        sim.frames = v;
    }
    if let Some(v) = args.dt {
        sim.dt = v;
    }
    if let Some(v) = args.gravity {
        sim.gravity = v.0;
    }
    if let Some(v) = args.wind {
        sim.wind = v.0;
    }
    let bounds = ctx.config.bounds;
    sim.fit_bounds(&bounds);
    sim.validate()?;

    let (material, mask) = match (&args.class, &args.pred) {
        (Some(class_path), None) => {
            let params_path = args.params.as_ref().expect("clap enforces --params");
            let grid =
                io::read_material_grid::<f64>(class_path, params_path).map_err(at(class_path))?;
            let mask = grid.implied_mask();
            (grid, mask)
        }
        (None, Some(pred_path)) => {
            let mask_path = args.mask.as_ref().expect("clap enforces --mask");
            let pred = io::read_prediction_grid::<f64>(pred_path).map_err(at(pred_path))?;
            let mask = io::read_occupancy(mask_path).map_err(at(mask_path))?;
            let grid = materialize_prediction(&pred, &mask, &ctx.stats())?;
            (grid, mask)
        }
        (None, None) => {
            return Err(CliError::Input(
                "no material input: pass --class/--params or --pred/--mask".into(),
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap rejects --class with --pred"),
    };

    let seed = args.seed.unwrap_or(ctx.config.seed);
    let particles =
        mpm::sample_particles(&material, &mask, &bounds, sim.particles_per_voxel, seed)?;
    let particle_count = particles.len();
    let (trajectory, stats) = mpm::run(sim, particles)?;

    let mut stage = Stage::new();
    io::write_trajectory(stage.path_for(&args.out)?, &trajectory).map_err(at(&args.out))?;
    if let Some(csv) = &args.csv {
        io::write_trajectory_csv(stage.path_for(csv)?, &trajectory).map_err(at(csv))?;
    }
    if let Some(ply_dir) = &args.ply_dir {
        for frame in 0..trajectory.frame_count() {
            let name = ply_dir.join(format!("frame_{frame:04}.ply"));
            io::write_frame_ply(stage.path_for(&name)?, &trajectory, frame).map_err(at(&name))?;
        }
    }
    stage.commit()?;

    println!(
        "{}",
        serde_json::json!({
            "frames": trajectory.frame_count(),
            "particles": particle_count,
            "total_substeps": stats.total_substeps,
            "max_mass_error_rel": stats.max_mass_error_rel,
            "out": args.out,
        })
    );
    Ok(())
}
