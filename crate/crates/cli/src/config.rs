//! Run configuration: a single JSON document shared by every subcommand.
//! Flags override individual keys; unknown keys are rejected so experiment
//! manifests stay trustworthy.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pixie_core::grid::{GridDims, SceneBounds};
use pixie_core::materials::NormStats;
use pixie_core::mpm::SimConfig;
use pixie_core::predictor::TrainConfig;

use crate::error::CliError;

/// Physical normalization bounds as written in config files; converted to
/// log-space [`NormStats`] before use.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormBounds {
    #[serde(rename = "E")]
    pub e: [f64; 2],
    pub nu: [f64; 2],
    pub density: [f64; 2],
}

impl Default for NormBounds {
    fn default() -> Self {
        Self {
            e: [8e2, 8e10],
            nu: [0.15, 0.45],
            density: [40.0, 3e3],
        }
    }
}

impl NormBounds {
    pub fn stats(&self) -> Result<NormStats<f64>, CliError> {
        Ok(NormStats::from_physical(self.e, self.nu, self.density)?)
    }
}

/// Evaluation knobs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Occupancy threshold when deriving masks from density grids.
    pub alpha: f64,
    /// Cross-entropy weight used when reporting losses.
    pub lambda: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda: 1.0,
        }
    }
}

/// Top-level run configuration. Every section has defaults, so `{}` is a
/// valid document; unknown keys anywhere are errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// World-space box enclosing every grid in the run.
    pub bounds: SceneBounds<f64>,
    /// Default grid resolution and feature channel count.
    pub dims: GridDims,
    /// Physical bounds behind parameter normalization.
    pub norm_stats: NormBounds,
    /// Default ranged material spec, resolved relative to the config file.
    pub material_spec: Option<PathBuf>,
    /// Default part query set, resolved relative to the config file.
    pub query_set: Option<PathBuf>,
    pub train: TrainConfig,
    pub sim: SimConfig<f64>,
    pub eval: EvalSection,
    /// Default seed for sampling, particle jitter and synthesis overrides.
    pub seed: u64,
    /// Forces single-threaded execution for reproducible runs.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bounds: SceneBounds::unit(),
            dims: GridDims { n: 32, d: 16 },
            norm_stats: NormBounds::default(),
            material_spec: None,
            query_set: None,
            train: TrainConfig::default(),
            sim: SimConfig::default(),
            eval: EvalSection::default(),
            seed: 0,
            deterministic: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        GridDims::new(self.dims.n, self.dims.d)?;
        SceneBounds::new(self.bounds.min, self.bounds.max)?;
        self.norm_stats.stats()?;
        self.train.validate()?;
        self.sim.validate()?;
        if !self.eval.alpha.is_finite() || self.eval.alpha < 0.0 {
            return Err(CliError::Config(
                "eval.alpha must be non-negative and finite".into(),
            ));
        }
        if !self.eval.lambda.is_finite() || self.eval.lambda < 0.0 {
            return Err(CliError::Config(
                "eval.lambda must be non-negative and finite".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let file = File::open(path).map_err(|e| CliError::file(path, e))?;
        let config: RunConfig = serde_json::from_reader(BufReader::new(file)).map_err(|e| {
            CliError::Json {
                path: path.to_path_buf(),
                source: e,
            }
        })?;
        config
            .validate()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }
}

/// A validated config plus the directory it was loaded from, used to
/// resolve relative paths written inside the file.
pub struct Context {
    pub config: RunConfig,
    pub deterministic: bool,
    config_dir: PathBuf,
}

impl Context {
    pub fn load(path: Option<&Path>, deterministic_flag: bool) -> Result<Self, CliError> {
        let (config, config_dir) = match path {
            Some(p) => {
                let config = RunConfig::load(p)?;
                let dir = match p.parent() {
                    Some(parent) if !parent.as_os_str().is_empty() => parent.to_path_buf(),
                    _ => PathBuf::from("."),
                };
                (config, dir)
            }
            None => (RunConfig::default(), PathBuf::from(".")),
        };
        let deterministic = deterministic_flag || config.deterministic;
        Ok(Self {
            config,
            deterministic,
            config_dir,
        })
    }

    /// Resolves a path taken from the config file against its directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.config_dir.join(path)
        }
    }

    pub fn stats(&self) -> NormStats<f64> {
        self.config
            .norm_stats
            .stats()
            .expect("config was validated on load")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_document_parses_to_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.dims, GridDims { n: 32, d: 16 });
        assert_eq!(cfg.seed, 0);
        assert!(!cfg.deterministic);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [
            r#"{"mystery": 1}"#,
            r#"{"dims": {"n": 8, "d": 4, "extra": 1}}"#,
            r#"{"bounds": {"min": [0,0,0], "max": [1,1,1], "pad": 2}}"#,
            r#"{"norm_stats": {"E": [1,2], "nu": [0.2,0.3], "density": [1,2], "x": 0}}"#,
            r#"{"train": {"epochs": 3, "momentum": 0.9}}"#,
            r#"{"sim": {"frames": 5, "integrator": "rk4"}}"#,
            r#"{"eval": {"alpha": 0.5, "beta": 1.0}}"#,
        ] {
            assert!(
                serde_json::from_str::<RunConfig>(doc).is_err(),
                "document should be rejected: {doc}"
            );
        }
    }

    #[test]
    fn invalid_sections_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.eval.alpha = f64::NAN;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.bounds.max = cfg.bounds.min;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.train.epochs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn context_resolves_relative_paths_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"query_set": "queries.json"}"#).unwrap();
        let ctx = Context::load(Some(&path), false).unwrap();
        let q = ctx.config.query_set.clone().unwrap();
        assert_eq!(ctx.resolve(&q), dir.path().join("queries.json"));
        assert_eq!(
            ctx.resolve(Path::new("/abs/queries.json")),
            PathBuf::from("/abs/queries.json")
        );
    }

    #[test]
    fn deterministic_flag_overrides_config() {
        let ctx = Context::load(None, true).unwrap();
        assert!(ctx.deterministic);
        let ctx = Context::load(None, false).unwrap();
        assert!(!ctx.deterministic);
    }
}
