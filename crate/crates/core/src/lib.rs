//! Voxel material inference and simulation core.
//!
//! This crate turns voxelized visual-feature grids into per-voxel physical
//! material fields — a discrete material class plus Young's modulus,
//! Poisson's ratio, and density — and couples them to an explicit material
//! point method solver so the inferred fields can be exercised under
//! gravity and wind. The pipeline, end to end:
//!
//! 1. [`synth`] generates labeled scenes: geometric parts carrying feature
//!    embeddings, with materials drawn from ranged specs in [`materials`]
//!    subject to declarative cross-part constraints from [`constraint`].
//! 2. [`segmentation`] assigns occupied voxels to named parts by cosine
//!    similarity against query embeddings, and paints per-part material
//!    samples onto the grid.
//! 3. [`predictor`] is a voxel-local two-stage network (projection +
//!    neighborhood-pooled head) trained with a masked composite loss to map
//!    features to material class logits and normalized continuous
//!    parameters.
//! 4. [`mpm`] converts a material grid into particles and advances them
//!    with APIC transfers, a fixed corotated elastic model, and per-class
//!    plastic return maps.
//! 5. [`eval`] scores predictions and trajectories; [`io`] fixes the
//!    on-disk formats for grids, models, and trajectories.
//!
//! All numeric kernels are generic over the [`Real`] scalar; the aliases
//! below pin the common `f64` instantiation (and an `f32` grid for
//! memory-constrained feature volumes).

pub mod constraint;
pub mod eval;
pub mod grid;
pub mod io;
pub mod materials;
pub mod mpm;
pub mod predictor;
pub mod real;
pub mod segmentation;
pub mod synth;

pub use real::Real;

/// Default-precision (`f64`) instantiations of the core types.
pub type FeatureGrid64 = grid::FeatureGrid<f64>;
pub type DensityGrid64 = grid::DensityGrid<f64>;
pub type SceneBounds64 = grid::SceneBounds<f64>;
pub type MaterialGrid64 = materials::MaterialGrid<f64>;
pub type ContinuousParams64 = materials::ContinuousParams<f64>;
pub type NormStats64 = materials::NormStats<f64>;
pub type QuerySet64 = segmentation::QuerySet<f64>;
pub type PredictionGrid64 = predictor::PredictionGrid<f64>;
pub type PredictorModel64 = predictor::PredictorModel<f64>;
pub type SimConfig64 = mpm::SimConfig<f64>;
pub type Particle64 = mpm::Particle<f64>;
pub type Trajectory64 = mpm::Trajectory<f64>;
pub type SynthScene64 = synth::SynthScene<f64>;

/// Single-precision feature volume, for large grids where `f32` features
/// suffice (the on-disk payload is `f32` either way).
pub type FeatureGrid32 = grid::FeatureGrid<f32>;
