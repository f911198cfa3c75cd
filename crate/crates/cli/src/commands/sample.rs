//! `pixie sample`: draw one concrete material per part from a ranged spec,
//! rejecting joints that violate its constraints.

use std::path::PathBuf;

use clap::Args;

use pixie_core::materials;
use pixie_core::synth::DEFAULT_SAMPLE_TRIES;

use crate::commands::{load_material_spec, sample_file_from};
use crate::config::Context;
use crate::error::CliError;
use crate::output::{write_json, Stage};

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Ranged material spec JSON; defaults to the config's `material_spec`.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Sampling seed; defaults to the config's `seed`.
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,
    /// Rejection-sampling budget before giving up.
    #[arg(long, value_name = "N", default_value_t = DEFAULT_SAMPLE_TRIES)]
    pub max_tries: usize,
    /// Output sampled-materials JSON.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

pub fn run(ctx: &Context, args: &SampleArgs) -> Result<(), CliError> {
    let spec = load_material_spec(ctx, args.spec.as_deref())?;
    let seed = args.seed.unwrap_or(ctx.config.seed);
    let joint = materials::sample_spec::<f64>(&spec, seed, args.max_tries)?;
    let file = sample_file_from(&joint);

    let mut stage = Stage::new();
    write_json(&stage.path_for(&args.out)?, &file)?;
    stage.commit()?;

    println!(
        "{}",
        serde_json::json!({
            "parts": file.len(),
            "seed": seed,
            "constraints": spec.constraints.len(),
            "out": args.out,
        })
    );
    Ok(())
}
