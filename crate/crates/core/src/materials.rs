//! Material classes, per-voxel physical parameters and range specs.
//!
//! A material is a discrete class plus three continuous parameters: Young's
//! modulus `E` (Pa), Poisson ratio `nu`, and density `rho` (kg/m^3). Grids
//! carry one material per voxel; [`NormStats`] maps parameters to and from
//! the normalized `[-1, 1]` space used by the predictor (log10 for `E` and
//! `rho`, linear for `nu`). [`sample_spec`] draws concrete materials from
//! ranged specs under user constraints.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraint::{self, ConstraintExpr, EvalError, ParseError};
use crate::grid::OccupancyMask;
use crate::real::Real;

/// Number of material classes, including background.
pub const CLASS_COUNT: usize = 8;

/// Discrete material classes. The `u8` encoding is part of the file format
/// and must not be reordered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum MaterialClass {
    Background = 0,
    Elastic = 1,
    Rigid = 2,
    Metal = 3,
    Sand = 4,
    Snow = 5,
    Plasticine = 6,
    Foam = 7,
}

impl MaterialClass {
    /// All classes in encoding order.
    pub const ALL: [MaterialClass; CLASS_COUNT] = [
        MaterialClass::Background,
        MaterialClass::Elastic,
        MaterialClass::Rigid,
        MaterialClass::Metal,
        MaterialClass::Sand,
        MaterialClass::Snow,
        MaterialClass::Plasticine,
        MaterialClass::Foam,
    ];

    #[inline]
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Result<Self, MaterialError> {
        Self::ALL
            .get(v as usize)
            .copied()
            .ok_or(MaterialError::UnknownClass(v))
    }

    pub fn name(self) -> &'static str {
        match self {
            MaterialClass::Background => "background",
            MaterialClass::Elastic => "elastic",
            MaterialClass::Rigid => "rigid",
            MaterialClass::Metal => "metal",
            MaterialClass::Sand => "sand",
            MaterialClass::Snow => "snow",
            MaterialClass::Plasticine => "plasticine",
            MaterialClass::Foam => "foam",
        }
    }
}

impl std::fmt::Display for MaterialClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Errors from material validation, conversion and sampling.
#[derive(Debug, Error)]
pub enum MaterialError {
    #[error("invalid continuous params: {0}")]
    InvalidParams(String),
    #[error("invalid normalization stats: {0}")]
    InvalidStats(String),
    #[error("poisson ratio {nu} too close to 0.5 for non-rigid class {class}")]
    NuNearIncompressible { nu: f64, class: MaterialClass },
    #[error("unknown material class code {0}")]
    UnknownClass(u8),
    #[error("invalid material grid: {0}")]
    InvalidGrid(String),
    #[error("material spec declares no parts")]
    EmptySpec,
    #[error("part {part}: invalid {what} range")]
    InvalidRange { part: String, what: &'static str },
    #[error("part name {0:?} is not a valid identifier")]
    BadPartName(String),
    #[error("constraint {text:?}: {source}")]
    ConstraintParse {
        text: String,
        #[source]
        source: ParseError,
    },
    #[error("constraint {constraint:?} references undeclared part {part:?}")]
    UnknownPartRef { part: String, constraint: String },
    #[error("constraint {constraint:?}: {source}")]
    ConstraintEval {
        constraint: String,
        #[source]
        source: EvalError,
    },
    #[error(
        "no sample satisfied all constraints after {tries} tries\
        {}", last_violated.as_ref().map(|c| format!(" (last violated: {c})")).unwrap_or_default()
    )]
    SamplingExhausted {
        tries: usize,
        last_violated: Option<String>,
    },
    #[error("max_tries must be at least 1")]
    ZeroTries,
}

/// Continuous material parameters. Invariants: all finite, `E > 0`,
/// `0 < nu < 0.5`, `rho > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousParams<T: Real> {
    #[serde(rename = "E")]
    pub young_modulus: T,
    #[serde(rename = "nu")]
    pub poisson_ratio: T,
    #[serde(rename = "density")]
    pub density: T,
}

impl<T: Real> ContinuousParams<T> {
    pub fn new(young_modulus: T, poisson_ratio: T, density: T) -> Result<Self, MaterialError> {
        let p = Self {
            young_modulus,
            poisson_ratio,
            density,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), MaterialError> {
        let half = T::of(0.5);
        if !self.young_modulus.is_finite()
            || !self.poisson_ratio.is_finite()
            || !self.density.is_finite()
        {
            return Err(MaterialError::InvalidParams("non-finite value".into()));
        }
        if self.young_modulus <= T::zero() {
            return Err(MaterialError::InvalidParams(format!(
                "young modulus {} must be positive",
                self.young_modulus.to64()
            )));
        }
        if self.poisson_ratio <= T::zero() || self.poisson_ratio >= half {
            return Err(MaterialError::InvalidParams(format!(
                "poisson ratio {} must lie in (0, 0.5)",
                self.poisson_ratio.to64()
            )));
        }
        if self.density <= T::zero() {
            return Err(MaterialError::InvalidParams(format!(
                "density {} must be positive",
                self.density.to64()
            )));
        }
        Ok(())
    }

    /// Parameters as the canonical `[E, nu, rho]` triple.
    #[inline]
    pub fn triple(&self) -> [T; 3] {
        [self.young_modulus, self.poisson_ratio, self.density]
    }
}

/// Lame coefficients from Young's modulus and Poisson ratio, returned as
/// `(mu, lambda)`.
///
/// `mu = E / (2 (1 + nu))`, `lambda = E nu / ((1 + nu) (1 - 2 nu))`.
pub fn lame_from<T: Real>(e: T, nu: T) -> Result<(T, T), MaterialError> {
    let half = T::of(0.5);
    if !e.is_finite() || e <= T::zero() {
        return Err(MaterialError::InvalidParams(format!(
            "young modulus {} must be positive and finite",
            e.to64()
        )));
    }
    if !nu.is_finite() || nu <= T::zero() || nu >= half {
        return Err(MaterialError::InvalidParams(format!(
            "poisson ratio {} must lie in (0, 0.5)",
            nu.to64()
        )));
    }
    let one = T::one();
    let two = T::of(2.0);
    let mu = e / (two * (one + nu));
    let lambda = e * nu / ((one + nu) * (one - two * nu));
    Ok((mu, lambda))
}

/// [`lame_from`] with the near-incompressibility guard applied to every
/// class except `Rigid` (whose elasticity is never integrated): `nu > 0.49`
/// is rejected because `lambda` blows up as `nu -> 0.5`.
pub fn lame_for_class<T: Real>(
    class: MaterialClass,
    e: T,
    nu: T,
) -> Result<(T, T), MaterialError> {
    if class != MaterialClass::Rigid && nu > T::of(0.49) {
        return Err(MaterialError::NuNearIncompressible {
            nu: nu.to64(),
            class,
        });
    }
    lame_from(e, nu)
}

/// Per-voxel material field: a class grid plus an `[E, nu, rho]` triple per
/// voxel. Background voxels hold zeroed parameters by convention.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialGrid<T: Real> {
    n: usize,
    class: Vec<MaterialClass>,
    params: Vec<[T; 3]>,
}

impl<T: Real> MaterialGrid<T> {
    /// Grid with every voxel background.
    pub fn new_background(n: usize) -> Self {
        Self {
            n,
            class: vec![MaterialClass::Background; n * n * n],
            params: vec![[T::zero(); 3]; n * n * n],
        }
    }

    /// Builds a grid from parallel class/parameter arrays, validating that
    /// non-background voxels carry legal parameters and background voxels
    /// are zeroed.
    pub fn from_parts(
        n: usize,
        class: Vec<MaterialClass>,
        params: Vec<[T; 3]>,
    ) -> Result<Self, MaterialError> {
        let voxels = n * n * n;
        if class.len() != voxels || params.len() != voxels {
            return Err(MaterialError::InvalidGrid(format!(
                "expected {} voxels, got {} classes / {} params",
                voxels,
                class.len(),
                params.len()
            )));
        }
        for (v, (c, p)) in class.iter().zip(&params).enumerate() {
            if *c == MaterialClass::Background {
                if p.iter().any(|x| *x != T::zero()) {
                    return Err(MaterialError::InvalidGrid(format!(
                        "background voxel {v} has nonzero params"
                    )));
                }
            } else {
                ContinuousParams::new(p[0], p[1], p[2]).map_err(|e| {
                    MaterialError::InvalidGrid(format!("voxel {v}: {e}"))
                })?;
            }
        }
        Ok(Self { n, class, params })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.class.len()
    }

    #[inline]
    pub fn class_at(&self, v: usize) -> MaterialClass {
        self.class[v]
    }

    #[inline]
    pub fn params_at(&self, v: usize) -> [T; 3] {
        self.params[v]
    }

    /// Parameter struct of an occupied voxel. Only meaningful when
    /// `class_at(v) != Background`.
    #[inline]
    pub fn params_struct_at(&self, v: usize) -> ContinuousParams<T> {
        let [e, nu, rho] = self.params[v];
        ContinuousParams {
            young_modulus: e,
            poisson_ratio: nu,
            density: rho,
        }
    }

    pub fn set(&mut self, v: usize, class: MaterialClass, params: ContinuousParams<T>) {
        self.class[v] = class;
        self.params[v] = params.triple();
    }

    pub fn clear(&mut self, v: usize) {
        self.class[v] = MaterialClass::Background;
        self.params[v] = [T::zero(); 3];
    }

    #[inline]
    pub fn classes(&self) -> &[MaterialClass] {
        &self.class
    }

    #[inline]
    pub fn params(&self) -> &[[T; 3]] {
        &self.params
    }

    /// Checks the pairing invariant against an occupancy mask: a voxel is
    /// background exactly when it is unoccupied.
    pub fn validate_against(&self, mask: &OccupancyMask) -> Result<(), MaterialError> {
        if mask.n() != self.n {
            return Err(MaterialError::InvalidGrid(format!(
                "mask n = {}, material n = {}",
                mask.n(),
                self.n
            )));
        }
        for v in 0..self.voxels() {
            let background = self.class[v] == MaterialClass::Background;
            if background == mask.is_occupied(v) {
                return Err(MaterialError::InvalidGrid(format!(
                    "voxel {v}: class {} vs occupied {}",
                    self.class[v],
                    mask.is_occupied(v)
                )));
            }
        }
        Ok(())
    }

    /// Occupancy mask implied by the class grid (`class != Background`).
    pub fn implied_mask(&self) -> OccupancyMask {
        let mut mask = OccupancyMask::new_empty(self.n);
        for v in 0..self.voxels() {
            mask.set(v, self.class[v] != MaterialClass::Background);
        }
        mask
    }
}

/// Normalization bounds mapping physical parameters into `[-1, 1]`:
/// `x_norm = 2 (x - min) / (max - min) - 1` applied to
/// `{log10 E, nu, log10 rho}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats<T: Real> {
    pub log_e: [T; 2],
    pub nu: [T; 2],
    pub log_rho: [T; 2],
}

impl<T: Real> NormStats<T> {
    /// Builds stats from physical (non-log) bounds.
    pub fn from_physical(e: [T; 2], nu: [T; 2], rho: [T; 2]) -> Result<Self, MaterialError> {
        let all = e.iter().chain(nu.iter()).chain(rho.iter());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(MaterialError::InvalidStats("non-finite bound".into()));
        }
        if e[0] <= T::zero() || rho[0] <= T::zero() {
            return Err(MaterialError::InvalidStats(
                "log-scale bounds must be positive".into(),
            ));
        }
        if nu[0] <= T::zero() || nu[1] >= T::of(0.5) {
            return Err(MaterialError::InvalidStats(
                "poisson bounds must lie in (0, 0.5)".into(),
            ));
        }
        let stats = Self {
            log_e: [e[0].log10(), e[1].log10()],
            nu,
            log_rho: [rho[0].log10(), rho[1].log10()],
        };
        for [lo, hi] in [stats.log_e, stats.nu, stats.log_rho] {
            if hi <= lo {
                return Err(MaterialError::InvalidStats(
                    "each bound pair needs min < max".into(),
                ));
            }
        }
        Ok(stats)
    }

    /// Default bounds spanning the in-context material tables:
    /// `E` in `[8e2, 8e10]` Pa, `nu` in `[0.15, 0.45]`, `rho` in
    /// `[40, 3000]` kg/m^3.
    pub fn default_bounds() -> Self {
        Self::from_physical(
            [T::of(8e2), T::of(8e10)],
            [T::of(0.15), T::of(0.45)],
            [T::of(40.0), T::of(3e3)],
        )
        .expect("default bounds are valid")
    }

    fn scale_one(x: T, lo: T, hi: T) -> (T, bool) {
        let clamped = x < lo || x > hi;
        let x = x.max(lo).min(hi);
        let two = T::of(2.0);
        (two * (x - lo) / (hi - lo) - T::one(), clamped)
    }

    /// Maps parameters into normalized `[-1, 1]^3`. Out-of-bound inputs are
    /// clamped; the flag reports whether any channel was clamped.
    pub fn normalize(&self, params: &ContinuousParams<T>) -> ([T; 3], bool) {
        let (e, ce) = Self::scale_one(params.young_modulus.log10(), self.log_e[0], self.log_e[1]);
        let (nu, cn) = Self::scale_one(params.poisson_ratio, self.nu[0], self.nu[1]);
        let (rho, cr) = Self::scale_one(params.density.log10(), self.log_rho[0], self.log_rho[1]);
        ([e, nu, rho], ce || cn || cr)
    }

    /// Inverse of [`NormStats::normalize`]. Inputs are expected in
    /// `[-1, 1]` and are clamped to that interval first, which keeps the
    /// output a valid [`ContinuousParams`].
    pub fn denormalize(&self, values: [T; 3]) -> ContinuousParams<T> {
        let half = T::of(0.5);
        let unscale = |y: T, lo: T, hi: T| -> T {
            let y = y.max(-T::one()).min(T::one());
            (y + T::one()) * half * (hi - lo) + lo
        };
        let ten = T::of(10.0);
        ContinuousParams {
            young_modulus: ten.powf(unscale(values[0], self.log_e[0], self.log_e[1])),
            poisson_ratio: unscale(values[1], self.nu[0], self.nu[1]),
            density: ten.powf(unscale(values[2], self.log_rho[0], self.log_rho[1])),
        }
    }

    /// Normalizes every occupied voxel of a material grid. Returns the
    /// normalized grid and the number of voxels that needed clamping.
    pub fn normalize_grid(
        &self,
        material: &MaterialGrid<T>,
        mask: &OccupancyMask,
    ) -> Result<(NormalizedMaterialGrid<T>, usize), MaterialError> {
        material.validate_against(mask)?;
        let voxels = material.voxels();
        let mut class = vec![MaterialClass::Background; voxels];
        let mut values = vec![[T::zero(); 3]; voxels];
        let mut clamped = 0usize;
        for v in 0..voxels {
            if !mask.is_occupied(v) {
                continue;
            }
            let params = material.params_struct_at(v);
            let (norm, was_clamped) = self.normalize(&params);
            class[v] = material.class_at(v);
            values[v] = norm;
            if was_clamped {
                clamped += 1;
            }
        }
        Ok((
            NormalizedMaterialGrid {
                n: material.n(),
                class,
                values,
            },
            clamped,
        ))
    }
}

/// A material grid in normalized space: per-voxel class plus
/// `[log10 E, nu, log10 rho]` scaled to `[-1, 1]`. Background voxels hold
/// `Background` and zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedMaterialGrid<T: Real> {
    pub n: usize,
    pub class: Vec<MaterialClass>,
    pub values: Vec<[T; 3]>,
}

/// Ranged material description for one named part.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartSpec {
    pub class: MaterialClass,
    #[serde(rename = "E")]
    pub e: [f64; 2],
    pub nu: [f64; 2],
    pub density: [f64; 2],
}

/// Ranged materials for a set of named parts plus constraint expressions
/// that every joint sample must satisfy.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    pub parts: BTreeMap<String, PartSpec>,
    #[serde(default)]
    pub constraints: Vec<String>,
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl MaterialSpec {
    /// Validates ranges and parses constraints. Every range must be finite
    /// with `min <= max` (degenerate point ranges are allowed), `E` and
    /// `rho` positive, `nu` inside `(0, 0.5)`, and every constraint
    /// reference must name a declared part.
    pub fn compile(&self) -> Result<CompiledMaterialSpec, MaterialError> {
        if self.parts.is_empty() {
            return Err(MaterialError::EmptySpec);
        }
        for (name, part) in &self.parts {
            if !is_identifier(name) {
                return Err(MaterialError::BadPartName(name.clone()));
            }
            if part.class == MaterialClass::Background {
                return Err(MaterialError::InvalidRange {
                    part: name.clone(),
                    what: "class (background is not samplable)",
                });
            }
            let check = |r: [f64; 2], positive: bool| -> bool {
                r.iter().all(|v| v.is_finite()) && r[0] <= r[1] && (!positive || r[0] > 0.0)
            };
            if !check(part.e, true) {
                return Err(MaterialError::InvalidRange {
                    part: name.clone(),
                    what: "E",
                });
            }
            if !check(part.nu, false) || part.nu[0] <= 0.0 || part.nu[1] >= 0.5 {
                return Err(MaterialError::InvalidRange {
                    part: name.clone(),
                    what: "nu",
                });
            }
            if !check(part.density, true) {
                return Err(MaterialError::InvalidRange {
                    part: name.clone(),
                    what: "density",
                });
            }
        }
        let mut constraints = Vec::with_capacity(self.constraints.len());
        for text in &self.constraints {
            let expr = constraint::parse(text).map_err(|source| MaterialError::ConstraintParse {
                text: text.clone(),
                source,
            })?;
            for part in expr.referenced_parts() {
                if !self.parts.contains_key(part) {
                    return Err(MaterialError::UnknownPartRef {
                        part: part.to_string(),
                        constraint: text.clone(),
                    });
                }
            }
            constraints.push((text.clone(), expr));
        }
        Ok(CompiledMaterialSpec {
            parts: self.parts.clone(),
            constraints,
        })
    }
}

/// A validated [`MaterialSpec`] with parsed constraint ASTs.
#[derive(Clone, Debug)]
pub struct CompiledMaterialSpec {
    pub parts: BTreeMap<String, PartSpec>,
    pub constraints: Vec<(String, ConstraintExpr)>,
}

/// Joint sample of one material per part, keyed by part name.
pub type SampledMaterials<T> = BTreeMap<String, (MaterialClass, ContinuousParams<T>)>;

fn draw_log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    let u: f64 = rng.random();
    let x = 10f64.powf(lo.log10() + u * (hi.log10() - lo.log10()));
    x.clamp(lo, hi)
}

fn draw_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    let u: f64 = rng.random();
    (lo + u * (hi - lo)).clamp(lo, hi)
}

/// Rejection-samples one material per part until every constraint holds.
///
/// `E` and `rho` are drawn log10-uniformly over their ranges, `nu`
/// uniformly; parts are drawn in name order from a ChaCha stream seeded by
/// `seed`, so results are reproducible. Fails after `max_tries` rejected
/// joint samples, reporting the first constraint violated on the final try.
pub fn sample_spec<T: Real>(
    spec: &MaterialSpec,
    seed: u64,
    max_tries: usize,
) -> Result<SampledMaterials<T>, MaterialError> {
    let compiled = spec.compile()?;
    sample_compiled(&compiled, seed, max_tries)
}

/// [`sample_spec`] against a pre-compiled spec.
pub fn sample_compiled<T: Real>(
    compiled: &CompiledMaterialSpec,
    seed: u64,
    max_tries: usize,
) -> Result<SampledMaterials<T>, MaterialError> {
    if max_tries == 0 {
        return Err(MaterialError::ZeroTries);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_violated = None;
    for _ in 0..max_tries {
        let mut draw: BTreeMap<String, ContinuousParams<f64>> = BTreeMap::new();
        for (name, part) in &compiled.parts {
            let e = draw_log_uniform(&mut rng, part.e[0], part.e[1]);
            let nu = draw_uniform(&mut rng, part.nu[0], part.nu[1]);
            let rho = draw_log_uniform(&mut rng, part.density[0], part.density[1]);
            draw.insert(
                name.clone(),
                ContinuousParams::new(e, nu, rho)
                    .map_err(|e| MaterialError::InvalidParams(format!("part {name}: {e}")))?,
            );
        }
        let mut ok = true;
        for (text, expr) in &compiled.constraints {
            let holds = constraint::evaluate(expr, &draw).map_err(|source| {
                MaterialError::ConstraintEval {
                    constraint: text.clone(),
                    source,
                }
            })?;
            if !holds {
                last_violated = Some(text.clone());
                ok = false;
                break;
            }
        }
        if ok {
            let mut out = SampledMaterials::new();
            for (name, params) in draw {
                let class = compiled.parts[&name].class;
                let converted = ContinuousParams::new(
                    T::of(params.young_modulus),
                    T::of(params.poisson_ratio),
                    T::of(params.density),
                )
                .map_err(|e| MaterialError::InvalidParams(format!("part {name}: {e}")))?;
                out.insert(name, (class, converted));
            }
            return Ok(out);
        }
    }
    Err(MaterialError::SamplingExhausted {
        tries: max_tries,
        last_violated,
    })
}
