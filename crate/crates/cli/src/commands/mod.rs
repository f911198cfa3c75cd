//! Subcommand implementations plus the small pieces they share: the sampled
//! materials JSON schema and the prediction-to-material conversion.

pub mod eval;
pub mod paint;
pub mod predict;
pub mod sample;
pub mod segment;
pub mod sim;
pub mod synth;
pub mod train;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use pixie_core::grid::OccupancyMask;
use pixie_core::io::IoError;
use pixie_core::materials::{
    ContinuousParams, MaterialClass, MaterialGrid, MaterialSpec, NormStats, SampledMaterials,
    CLASS_COUNT,
};
use pixie_core::predictor::PredictionGrid;
use pixie_core::segmentation::QuerySet;

use crate::config::Context;
use crate::error::CliError;
use crate::output::read_json;

/// `map_err` adapter pinning a grid/model/trajectory codec error to the
/// user-visible path it concerns (for writes: the final destination, not
/// the staging temp file).
pub fn at(path: &(impl AsRef<Path> + ?Sized)) -> impl Fn(IoError) -> CliError + '_ {
    let path = path.as_ref();
    move |source| CliError::format_at(path, source)
}

/// One concrete sampled material as stored in samples/palette JSON files.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub class: MaterialClass,
    #[serde(rename = "E")]
    pub e: f64,
    pub nu: f64,
    pub density: f64,
}

impl SampleEntry {
    pub fn new(class: MaterialClass, params: &ContinuousParams<f64>) -> Self {
        Self {
            class,
            e: params.young_modulus,
            nu: params.poisson_ratio,
            density: params.density,
        }
    }

    pub fn params(&self) -> Result<ContinuousParams<f64>, CliError> {
        Ok(ContinuousParams::new(self.e, self.nu, self.density)?)
    }
}

/// Sampled materials file: part name to concrete material, sorted by name.
pub type SampleFile = BTreeMap<String, SampleEntry>;

pub fn sample_file_from(materials: &SampledMaterials<f64>) -> SampleFile {
    materials
        .iter()
        .map(|(name, (class, params))| (name.clone(), SampleEntry::new(*class, params)))
        .collect()
}

/// Loads the query set from an explicit flag or the config's `query_set`.
pub fn load_queries(ctx: &Context, flag: Option<&Path>) -> Result<QuerySet<f64>, CliError> {
    let path = match flag {
        Some(p) => p.to_path_buf(),
        None => match &ctx.config.query_set {
            Some(p) => ctx.resolve(p),
            None => {
                return Err(CliError::Config(
                    "no query set: pass --queries or set query_set in the config".into(),
                ))
            }
        },
    };
    let queries: QuerySet<f64> = read_json(&path)?;
    queries.validate()?;
    Ok(queries)
}

/// Loads the ranged material spec from a flag or the config's
/// `material_spec`, validating it by compilation.
pub fn load_material_spec(ctx: &Context, flag: Option<&Path>) -> Result<MaterialSpec, CliError> {
    let path = match flag {
        Some(p) => p.to_path_buf(),
        None => match &ctx.config.material_spec {
            Some(p) => ctx.resolve(p),
            None => {
                return Err(CliError::Config(
                    "no material spec: pass --spec or set material_spec in the config".into(),
                ))
            }
        },
    };
    let spec: MaterialSpec = read_json(&path)?;
    spec.compile()?;
    Ok(spec)
}

/// Converts raw predictions into a concrete material grid: the class is the
/// argmax over the non-background logits (occupancy already decides what is
/// background), the continuous channels are denormalized.
pub fn materialize_prediction(
    pred: &PredictionGrid<f64>,
    mask: &OccupancyMask,
    stats: &NormStats<f64>,
) -> Result<MaterialGrid<f64>, CliError> {
    if pred.n() != mask.n() {
        return Err(CliError::Input(format!(
            "prediction grid is {}^3 but mask is {}^3",
            pred.n(),
            mask.n()
        )));
    }
    let mut grid = MaterialGrid::new_background(pred.n());
    for v in mask.occupied_indices() {
        let logits = pred.logits(v);
        let mut best = 1usize;
        for c in 2..CLASS_COUNT {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        let class = MaterialClass::from_u8(best as u8).expect("logit index is a valid class");
        let params = stats.denormalize(pred.continuous(v));
        grid.set(v, class, params);
    }
    Ok(grid)
}
