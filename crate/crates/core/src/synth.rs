//! Synthetic scene generation: geometric parts with per-part feature
//! embeddings, Gaussian feature noise, and jointly sampled materials.
//!
//! A scene spec lists named parts, each a shape primitive placed in world
//! coordinates with a mean feature embedding. `generate` rasterizes the
//! parts onto a voxel grid (a voxel belongs to a part when its center lies
//! inside the shape; later parts take precedence where shapes overlap),
//! draws per-voxel features `mean + noise * N(0, 1)`, samples one material
//! per part from the attached ranged spec, and paints the result. All
//! randomness derives from the spec seed, so output is bitwise
//! deterministic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{
    DensityGrid, FeatureGrid, GridDims, GridError, OccupancyMask, PartLabelGrid, SceneBounds,
    PART_UNASSIGNED,
};
use crate::materials::{MaterialError, MaterialGrid, MaterialSpec};
use crate::real::Real;
use crate::segmentation::{paint_materials, SegmentError};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Constraint-rejection budget used when a caller does not supply one.
pub const DEFAULT_SAMPLE_TRIES: usize = 10_000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

/// A solid placed in world coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase", tag = "kind")]
pub enum Shape {
    #[serde(rename = "box")]
    Box { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Union of child shapes.
    Union { shapes: Vec<Shape> },
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Box { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
            Shape::Sphere { center, radius } => {
                let d2: f64 = (0..3).map(|a| (p[a] - center[a]) * (p[a] - center[a])).sum();
                d2 <= radius * radius
            }
            Shape::Union { shapes } => shapes.iter().any(|s| s.contains(p)),
        }
    }

    fn validate(&self, depth: usize) -> Result<(), SynthError> {
        if depth > 64 {
            return Err(SynthError::InvalidSpec("shape nesting too deep".into()));
        }
        match self {
            Shape::Box { min, max } => {
                for a in 0..3 {
                    if !min[a].is_finite() || !max[a].is_finite() || min[a] >= max[a] {
                        return Err(SynthError::InvalidSpec(format!(
                            "degenerate box: min {min:?}, max {max:?}"
                        )));
                    }
                }
                Ok(())
            }
            Shape::Sphere { center, radius } => {
                if center.iter().any(|c| !c.is_finite()) || !radius.is_finite() || *radius <= 0.0
                {
                    return Err(SynthError::InvalidSpec(format!(
                        "degenerate sphere: center {center:?}, radius {radius}"
                    )));
                }
                Ok(())
            }
            Shape::Union { shapes } => {
                if shapes.is_empty() {
                    return Err(SynthError::InvalidSpec("empty union".into()));
                }
                for s in shapes {
                    s.validate(depth + 1)?;
                }
                Ok(())
            }
        }
    }
}

/// One named scene part: a shape and its mean feature embedding.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthPart {
    pub name: String,
    pub shape: Shape,
    /// Mean embedding; per-voxel features are this plus isotropic noise.
    pub mean: Vec<f64>,
}

/// Full scene description. Parts are painted in declaration order; where
/// shapes overlap, the later part wins.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSceneSpec {
    pub seed: u64,
    pub feature_dim: usize,
    /// Isotropic feature noise scale (standard deviation).
    pub noise: f64,
    pub parts: Vec<SynthPart>,
    /// Ranged materials; part names must match the scene parts exactly.
    pub materials: MaterialSpec,
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.feature_dim == 0 {
            return Err(SynthError::InvalidSpec("feature_dim must be positive".into()));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(SynthError::InvalidSpec(format!(
                "noise {} must be finite and non-negative",
                self.noise
            )));
        }
        if self.parts.is_empty() {
            return Err(SynthError::InvalidSpec("no parts".into()));
        }
        if self.parts.len() >= PART_UNASSIGNED as usize {
            return Err(SynthError::InvalidSpec(format!(
                "at most {} parts supported",
                PART_UNASSIGNED - 1
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for part in &self.parts {
            if !seen.insert(part.name.as_str()) {
                return Err(SynthError::InvalidSpec(format!(
                    "duplicate part name {:?}",
                    part.name
                )));
            }
            if part.mean.len() != self.feature_dim {
                return Err(SynthError::InvalidSpec(format!(
                    "part {:?} mean has length {}, expected {}",
                    part.name,
                    part.mean.len(),
                    self.feature_dim
                )));
            }
            if part.mean.iter().any(|v| !v.is_finite()) {
                return Err(SynthError::InvalidSpec(format!(
                    "part {:?} mean contains a non-finite value",
                    part.name
                )));
            }
            part.shape.validate(0)?;
            if !self.materials.parts.contains_key(&part.name) {
                return Err(SynthError::InvalidSpec(format!(
                    "part {:?} has no material ranges",
                    part.name
                )));
            }
        }
        for name in self.materials.parts.keys() {
            if !seen.contains(name.as_str()) {
                return Err(SynthError::InvalidSpec(format!(
                    "material ranges for unknown part {name:?}"
                )));
            }
        }
        Ok(())
    }
}

/// A generated scene: aligned voxel grids plus the per-part sample that
/// produced the material field.
#[derive(Clone, Debug)]
pub struct SynthScene<T: Real> {
    pub features: FeatureGrid<T>,
    pub density: DensityGrid<T>,
    pub materials: MaterialGrid<T>,
    pub labels: PartLabelGrid,
    /// `(class, params)` per part, in part declaration order.
    pub palette: Vec<(crate::materials::MaterialClass, crate::materials::ContinuousParams<T>)>,
}

impl<T: Real> SynthScene<T> {
    pub fn mask(&self) -> OccupancyMask {
        self.materials.implied_mask()
    }
}

/// Rasterizes a scene spec onto an `n^3` grid over `bounds`.
///
/// Feature noise is drawn only for occupied voxels, in voxel layout order,
/// from a dedicated RNG stream, so the output is bitwise deterministic in
/// the seed. Material sampling uses the spec's constraint set with the
/// default rejection budget.
pub fn generate<T: Real>(
    spec: &SynthSceneSpec,
    n: usize,
    bounds: &SceneBounds<T>,
) -> Result<SynthScene<T>, SynthError> {
    spec.validate()?;
    let dims = GridDims::new(n, spec.feature_dim)?;
    let sampled = crate::materials::sample_spec::<T>(
        &spec.materials,
        spec.seed,
        DEFAULT_SAMPLE_TRIES,
    )?;
    let palette: Vec<_> = spec
        .parts
        .iter()
        .map(|p| sampled[&p.name])
        .collect();

    // Stream 1 is reserved for feature noise; material sampling consumed
    // the default stream of the same seed inside `sample_spec`.
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);

    let d = spec.feature_dim;
    let mut features = vec![T::zero(); dims.elements()];
    let mut density = vec![T::zero(); dims.voxels()];
    let mut labels = PartLabelGrid::new_unassigned(n);
    for v in 0..dims.voxels() {
        let [x, y, z] = dims.voxel_coords(v);
        let center_t = bounds.voxel_center(n, [x, y, z]);
        let center = [center_t[0].to64(), center_t[1].to64(), center_t[2].to64()];
        let mut owner: Option<usize> = None;
        for (i, part) in spec.parts.iter().enumerate() {
            if part.shape.contains(center) {
                owner = Some(i);
            }
        }
        let Some(part_index) = owner else {
            continue;
        };
        labels.set(v, part_index as u8);
        density[v] = T::one();
        let mean = &spec.parts[part_index].mean;
        for c in 0..d {
            let noise: f64 = noise_rng.sample(StandardNormal);
            features[v * d + c] = T::of(mean[c] + spec.noise * noise);
        }
    }

    let features = FeatureGrid::from_data(dims, features)?;
    let density = DensityGrid::from_data(n, density)?;
    let materials = paint_materials(&labels, &palette)?;
    Ok(SynthScene {
        features,
        density,
        materials,
        labels,
        palette,
    })
}

/// Single-channel occupancy indicator features (1 inside, 0 outside): the
/// deliberately impoverished input for feature-ablation experiments.
pub fn occupancy_features<T: Real>(mask: &OccupancyMask) -> FeatureGrid<T> {
    let n = mask.n();
    let dims = GridDims { n, d: 1 };
    let data = mask
        .data()
        .iter()
        .map(|b| if *b { T::one() } else { T::zero() })
        .collect();
    FeatureGrid::from_data(dims, data).expect("indicator data is finite and sized")
}
