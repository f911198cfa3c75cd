//! Explicit MLS/APIC material point method on a fixed cubic grid.
//!
//! Each step follows the classic explicit pipeline:
//!
//! 1. **P2G** — scatter particle mass and APIC momentum to grid nodes with
//!    quadratic B-spline weights, together with internal forces
//!    `-V0 P(F) F^T grad(w)` from the fixed corotated stress.
//! 2. **Grid update** — divide momentum by mass, apply gravity, ramped wind
//!    and damping, then enforce the per-face boundary bands.
//! 3. **G2P** — gather PIC velocities and the APIC affine matrix, advect
//!    particles symplectically, update `F` by the velocity gradient and run
//!    the per-class plastic return map.
//!
//! Kinematic (rigid) particles contribute mass and momentum in P2G but are
//! never moved or deformed. Time stepping is guarded by a CFL bound on
//! `dt (|v|max + cmax)`, where `cmax` is the largest elastic wave speed
//! `sqrt((lambda + 2 mu) / rho)`; steps that exceed it are split
//! automatically.

pub mod constitutive;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{OccupancyMask, SceneBounds};
use crate::materials::{lame_for_class, ContinuousParams, MaterialClass, MaterialError, MaterialGrid};
use crate::real::Real;
use constitutive::{elastic_stress_for, return_map_for, PlasticState, PlasticityTable};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Number of grid nodes in each boundary band.
pub const DEFAULT_BOUNDARY_WIDTH: usize = 3;

#[derive(Debug, Error)]
pub enum MpmError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("material error: {0}")]
    Material(#[from] MaterialError),
    #[error("particle {particle} has a non-finite state at frame {frame}")]
    NonFiniteState { particle: usize, frame: usize },
    #[error("particle {particle} left the simulation domain")]
    OutOfDomain { particle: usize },
    #[error("SVD failed to converge for particle {particle}")]
    SvdFailure { particle: usize },
    #[error("deformation gradient of particle {particle} is degenerate")]
    DegenerateDeformation { particle: usize },
    #[error("deformation gradient of particle {particle} has determinant {det} <= 0")]
    NonPositiveDeterminant { particle: usize, det: f64 },
    #[error(
        "step of {dt} needed more than {max_splits} CFL substeps (stable dt {stable}); \
         the simulation is likely diverging"
    )]
    CflRunaway {
        dt: f64,
        stable: f64,
        max_splits: usize,
    },
    #[error("simulation has no particles")]
    NoParticles,
}

/// Velocity condition applied to a grid boundary band.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryKind {
    /// Zero the full velocity.
    Sticky,
    /// Zero the wall-normal component.
    Slip,
    /// Leave velocities untouched.
    Open,
}

/// Per-face boundary conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundaryConfig {
    pub x_min: BoundaryKind,
    pub x_max: BoundaryKind,
    pub y_min: BoundaryKind,
    pub y_max: BoundaryKind,
    pub z_min: BoundaryKind,
    pub z_max: BoundaryKind,
}

impl BoundaryConfig {
    pub fn uniform(kind: BoundaryKind) -> Self {
        Self {
            x_min: kind,
            x_max: kind,
            y_min: kind,
            y_max: kind,
            z_min: kind,
            z_max: kind,
        }
    }
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self::uniform(BoundaryKind::Sticky)
    }
}

/// Simulation parameters. `grid_res` counts cells per axis; the node grid
/// has `grid_res + 1` nodes per axis and spans
/// `[origin, origin + grid_res * dx]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig<T: Real> {
    pub origin: [T; 3],
    pub grid_res: usize,
    pub dx: T,
    /// Frame time step; split into CFL substeps automatically when needed.
    pub dt: T,
    pub frames: usize,
    /// Fixed substeps per frame, each of length `dt / substeps`.
    pub substeps: usize,
    pub gravity: [T; 3],
    pub wind: [T; 3],
    /// Frames over which wind strength ramps linearly from `1/n` to full.
    /// Zero applies full wind from the first frame.
    pub wind_ramp_frames: usize,
    /// Rayleigh-style velocity damping `v /= 1 + dt * damping`.
    pub damping: T,
    pub cfl_factor: T,
    pub boundary: BoundaryConfig,
    /// Width of each boundary band, in grid nodes.
    pub boundary_width: usize,
    /// Particles sampled per occupied voxel.
    pub particles_per_voxel: usize,
    /// Cap on automatic CFL splits within a single `dt`.
    pub max_substep_splits: usize,
    pub plasticity: PlasticityTable<T>,
    /// Record per-frame velocities alongside positions.
    pub record_velocities: bool,
}

impl<T: Real> Default for SimConfig<T> {
    fn default() -> Self {
        Self {
            origin: [T::zero(); 3],
            grid_res: 32,
            dx: T::of(1.0 / 32.0),
            dt: T::of(1e-3),
            frames: 60,
            substeps: 1,
            gravity: [T::zero(); 3],
            wind: [T::zero(); 3],
            wind_ramp_frames: 0,
            damping: T::zero(),
            cfl_factor: T::of(0.5),
            boundary: BoundaryConfig::default(),
            boundary_width: DEFAULT_BOUNDARY_WIDTH,
            particles_per_voxel: 8,
            max_substep_splits: 4096,
            plasticity: PlasticityTable::default(),
            record_velocities: false,
        }
    }
}

impl<T: Real> SimConfig<T> {
    /// Domain edge length `grid_res * dx`.
    pub fn domain_extent(&self) -> T {
        T::of(self.grid_res as f64) * self.dx
    }

    /// Grid spacing and origin chosen so the node grid covers `bounds`
    /// exactly along its largest axis (the bounds here are always cubic).
    pub fn fit_bounds(&mut self, bounds: &SceneBounds<T>) {
        let extent = bounds.extent();
        let longest = extent[0].max(extent[1]).max(extent[2]);
        self.origin = bounds.min;
        self.dx = longest / T::of(self.grid_res as f64);
    }

    pub fn validate(&self) -> Result<(), MpmError> {
        let fail = |msg: &str| Err(MpmError::InvalidConfig(msg.to_string()));
        if !(self.dx > T::zero()) || !self.dx.is_finite() {
            return fail("dx must be positive and finite");
        }
        if !(self.dt > T::zero()) || !self.dt.is_finite() {
            return fail("dt must be positive and finite");
        }
        if self.frames == 0 {
            return fail("frames must be at least 1");
        }
        if self.substeps == 0 {
            return fail("substeps must be at least 1");
        }
        if !(self.cfl_factor > T::zero()) || self.cfl_factor > T::one() {
            return fail("cfl_factor must lie in (0, 1]");
        }
        if self.damping < T::zero() || !self.damping.is_finite() {
            return fail("damping must be non-negative and finite");
        }
        if self.particles_per_voxel == 0 {
            return fail("particles_per_voxel must be at least 1");
        }
        if self.max_substep_splits == 0 {
            return fail("max_substep_splits must be at least 1");
        }
        if self.boundary_width == 0 {
            return fail("boundary_width must be at least 1");
        }
        if self.grid_res < 2 * self.boundary_width + 2 {
            return fail("grid_res must exceed twice the boundary width plus one");
        }
        for v in self
            .origin
            .iter()
            .chain(self.gravity.iter())
            .chain(self.wind.iter())
        {
            if !v.is_finite() {
                return fail("origin, gravity and wind must be finite");
            }
        }
        Ok(())
    }

    /// Wind scale for a zero-based frame index: ramps linearly and reaches
    /// full strength at frame `wind_ramp_frames - 1`.
    pub fn wind_scale(&self, frame: usize) -> T {
        if self.wind_ramp_frames == 0 {
            return T::one();
        }
        let s = (frame as f64 + 1.0) / self.wind_ramp_frames as f64;
        T::of(s.min(1.0))
    }
}

/// One material point.
#[derive(Clone, Debug)]
pub struct Particle<T: Real> {
    pub position: Vector3<T>,
    pub velocity: Vector3<T>,
    /// APIC affine velocity matrix `C`.
    pub affine: Matrix3<T>,
    /// Elastic deformation gradient `F`.
    pub deformation: Matrix3<T>,
    pub mass: T,
    /// Rest volume `V0`.
    pub volume: T,
    pub class: MaterialClass,
    pub params: ContinuousParams<T>,
    pub mu: T,
    pub lambda: T,
    /// Rest density, used for the elastic wave speed in the CFL bound.
    pub rest_density: T,
    /// Kinematic particles scatter mass and momentum but never move.
    pub kinematic: bool,
    pub plastic: PlasticState<T>,
}

impl<T: Real> Particle<T> {
    /// Builds a particle at rest for the given material.
    pub fn at_rest(
        position: Vector3<T>,
        class: MaterialClass,
        params: ContinuousParams<T>,
        mass: T,
        volume: T,
    ) -> Result<Self, MpmError> {
        let (mu, lambda) = lame_for_class(class, params.young_modulus, params.poisson_ratio)?;
        Ok(Self {
            position,
            velocity: Vector3::zeros(),
            affine: Matrix3::zeros(),
            deformation: Matrix3::identity(),
            mass,
            volume,
            class,
            params,
            mu,
            lambda,
            rest_density: params.density,
            kinematic: class == MaterialClass::Rigid,
            plastic: PlasticState::default(),
        })
    }
}

/// Samples `particles_per_voxel` jittered particles in every occupied voxel
/// of a material grid. Particle mass is `density * voxel_volume / ppv`, so
/// the voxel's mass is conserved exactly. Deterministic in `seed`.
pub fn sample_particles<T: Real>(
    materials: &MaterialGrid<T>,
    mask: &OccupancyMask,
    bounds: &SceneBounds<T>,
    particles_per_voxel: usize,
    seed: u64,
) -> Result<Vec<Particle<T>>, MpmError> {
    if particles_per_voxel == 0 {
        return Err(MpmError::InvalidConfig(
            "particles_per_voxel must be at least 1".to_string(),
        ));
    }
    materials.validate_against(mask)?;
    let n = materials.n();
    let spacing = bounds.spacing(n);
    let voxel_volume = bounds.voxel_volume(n);
    let ppv = T::of(particles_per_voxel as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut particles = Vec::with_capacity(mask.count_occupied() * particles_per_voxel);
    for voxel in 0..mask.data().len() {
        if !mask.is_occupied(voxel) {
            continue;
        }
        let class = materials.class_at(voxel);
        let params = materials.params_struct_at(voxel);
        let [x, y, z] = crate::grid::GridDims { n, d: 1 }.voxel_coords(voxel);
        let corner = [
            bounds.min[0] + T::of(x as f64) * spacing[0],
            bounds.min[1] + T::of(y as f64) * spacing[1],
            bounds.min[2] + T::of(z as f64) * spacing[2],
        ];
        let mass = params.density * voxel_volume / ppv;
        let volume = voxel_volume / ppv;
        for _ in 0..particles_per_voxel {
            let jitter = [
                T::of(rng.random::<f64>()),
                T::of(rng.random::<f64>()),
                T::of(rng.random::<f64>()),
            ];
            let position = Vector3::new(
                corner[0] + jitter[0] * spacing[0],
                corner[1] + jitter[1] * spacing[1],
                corner[2] + jitter[2] * spacing[2],
            );
            particles.push(Particle::at_rest(position, class, params, mass, volume)?);
        }
    }
    Ok(particles)
}

/// Diagnostics for one frame step.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct StepStats {
    /// CFL substeps actually taken within the frame step.
    pub substeps: usize,
    /// Largest relative difference between total grid mass after P2G and
    /// total particle mass, over the substeps.
    pub max_mass_error_rel: f64,
    /// Total grid mass after the last P2G of the step.
    pub grid_mass: f64,
}

/// Aggregate diagnostics for a whole run.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct RunStats {
    pub total_substeps: usize,
    pub max_mass_error_rel: f64,
}

/// Recorded simulation output: per-frame particle positions, plus
/// velocities when requested.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T: Real> {
    pub positions: Vec<Vec<[T; 3]>>,
    pub velocities: Option<Vec<Vec<[T; 3]>>>,
}

impl<T: Real> Trajectory<T> {
    pub fn frame_count(&self) -> usize {
        self.positions.len()
    }

    pub fn particle_count(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }
}

const SPLINE_SUPPORT: usize = 3;

/// Quadratic B-spline weights along one axis. `fx` is the particle offset
/// from the base node in cell units, in `[0.5, 1.5]`.
#[inline]
fn spline_weights<T: Real>(fx: T) -> ([T; SPLINE_SUPPORT], [T; SPLINE_SUPPORT]) {
    let half = T::of(0.5);
    let one = T::one();
    let w = [
        half * (T::of(1.5) - fx) * (T::of(1.5) - fx),
        T::of(0.75) - (fx - one) * (fx - one),
        half * (fx - half) * (fx - half),
    ];
    // d/dfx of each weight.
    let dw = [fx - T::of(1.5), (one - fx) * T::of(2.0), fx - half];
    (w, dw)
}

struct Kernel<T: Real> {
    base: [i64; 3],
    w: [[T; SPLINE_SUPPORT]; 3],
    dw: [[T; SPLINE_SUPPORT]; 3],
    /// Particle offset from the base node in cell units.
    fx: [T; 3],
}

/// Explicit MPM state: particles plus scratch grids.
pub struct MpmState<T: Real> {
    pub config: SimConfig<T>,
    pub particles: Vec<Particle<T>>,
    grid_mass: Vec<T>,
    /// Holds momentum during P2G, velocity after the grid update.
    grid_vel: Vec<Vector3<T>>,
    grid_force: Vec<Vector3<T>>,
    nodes_per_axis: usize,
    frame: usize,
}

impl<T: Real> MpmState<T> {
    pub fn new(config: SimConfig<T>, particles: Vec<Particle<T>>) -> Result<Self, MpmError> {
        config.validate()?;
        if particles.is_empty() {
            return Err(MpmError::NoParticles);
        }
        let extent = config.domain_extent();
        for (i, p) in particles.iter().enumerate() {
            if p.position.iter().any(|v| !v.is_finite())
                || p.velocity.iter().any(|v| !v.is_finite())
            {
                return Err(MpmError::NonFiniteState {
                    particle: i,
                    frame: 0,
                });
            }
            for axis in 0..3 {
                let local = p.position[axis] - config.origin[axis];
                if local < T::zero() || local > extent {
                    return Err(MpmError::OutOfDomain { particle: i });
                }
            }
            if !(p.mass > T::zero()) || !(p.volume > T::zero()) {
                return Err(MpmError::InvalidConfig(format!(
                    "particle {i} must have positive mass and volume"
                )));
            }
        }
        let nodes_per_axis = config.grid_res + 1;
        let node_count = nodes_per_axis * nodes_per_axis * nodes_per_axis;
        Ok(Self {
            config,
            particles,
            grid_mass: vec![T::zero(); node_count],
            grid_vel: vec![Vector3::zeros(); node_count],
            grid_force: vec![Vector3::zeros(); node_count],
            nodes_per_axis,
            frame: 0,
        })
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn total_mass(&self) -> T {
        self.particles
            .iter()
            .fold(T::zero(), |acc, p| acc + p.mass)
    }

    pub fn total_momentum(&self) -> Vector3<T> {
        self.particles
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.velocity * p.mass)
    }

    #[inline]
    fn node_index(&self, i: i64, j: i64, k: i64) -> usize {
        let m = self.nodes_per_axis as i64;
        ((i * m + j) * m + k) as usize
    }

    fn kernel(&self, position: &Vector3<T>) -> Kernel<T> {
        let inv_dx = T::one() / self.config.dx;
        let mut base = [0i64; 3];
        let mut w = [[T::zero(); SPLINE_SUPPORT]; 3];
        let mut dw = [[T::zero(); SPLINE_SUPPORT]; 3];
        let mut fx = [T::zero(); 3];
        let max_base = self.nodes_per_axis as i64 - SPLINE_SUPPORT as i64;
        for axis in 0..3 {
            let local = (position[axis] - self.config.origin[axis]) * inv_dx;
            let b = (local - T::of(0.5)).floor();
            let mut bi = b.to64() as i64;
            // Keep the 3-node stencil inside the grid; particles this close
            // to the boundary sit inside the boundary bands anyway.
            bi = bi.clamp(0, max_base);
            let f = local - T::of(bi as f64);
            let (ws, dws) = spline_weights(f);
            base[axis] = bi;
            w[axis] = ws;
            dw[axis] = dws;
            fx[axis] = f;
        }
        Kernel { base, w, dw, fx }
    }

    /// Largest stable dt under the CFL bound
    /// `dt * (|v|max + cmax) <= cfl_factor * dx`.
    pub fn stable_dt(&self) -> T {
        let mut speed = T::zero();
        for p in &self.particles {
            let v = p.velocity.norm();
            if v > speed {
                speed = v;
            }
            if !p.kinematic {
                let mut mu = p.mu;
                let mut lambda = p.lambda;
                if p.class == MaterialClass::Snow {
                    let h = p.plastic.snow_hardening_factor(&self.config.plasticity);
                    mu = mu * h;
                    lambda = lambda * h;
                }
                let c = ((lambda + T::of(2.0) * mu) / p.rest_density).sqrt();
                if v + c > speed {
                    speed = v + c;
                }
            }
        }
        if speed > T::zero() {
            self.config.cfl_factor * self.config.dx / speed
        } else {
            T::of(f64::INFINITY)
        }
    }

    /// Advances one frame step of length `dt`, splitting into CFL substeps
    /// as needed. `wind_scale` multiplies the wind acceleration.
    pub fn step(&mut self, dt: T, wind_scale: T) -> Result<StepStats, MpmError> {
        let mut stats = StepStats::default();
        let mut remaining = dt;
        loop {
            let stable = self.stable_dt();
            if stats.substeps >= self.config.max_substep_splits {
                return Err(MpmError::CflRunaway {
                    dt: dt.to64(),
                    stable: stable.to64(),
                    max_splits: self.config.max_substep_splits,
                });
            }
            let sub = if stable < remaining { stable } else { remaining };
            self.advance(sub, wind_scale, &mut stats)?;
            stats.substeps += 1;
            remaining = remaining - sub;
            if remaining <= T::zero() {
                break;
            }
        }
        Ok(stats)
    }

    /// One explicit substep: P2G, grid update, G2P.
    fn advance(&mut self, dt: T, wind_scale: T, stats: &mut StepStats) -> Result<(), MpmError> {
        let dx = self.config.dx;
        let inv_dx = T::one() / dx;
        self.grid_mass.fill(T::zero());
        self.grid_vel.fill(Vector3::zeros());
        self.grid_force.fill(Vector3::zeros());

        // P2G: mass, APIC momentum and internal force.
        for idx in 0..self.particles.len() {
            let p = &self.particles[idx];
            let kernel = self.kernel(&p.position);
            let stress = if p.kinematic {
                None
            } else {
                let (mut mu, mut lambda) = (p.mu, p.lambda);
                if p.class == MaterialClass::Snow {
                    let h = p.plastic.snow_hardening_factor(&self.config.plasticity);
                    mu = mu * h;
                    lambda = lambda * h;
                }
                let piola = elastic_stress_for(&p.deformation, mu, lambda, idx)?;
                Some(piola * p.deformation.transpose() * p.volume)
            };
            let p = &self.particles[idx];
            for i in 0..SPLINE_SUPPORT {
                for j in 0..SPLINE_SUPPORT {
                    for k in 0..SPLINE_SUPPORT {
                        let node = self.node_index(
                            kernel.base[0] + i as i64,
                            kernel.base[1] + j as i64,
                            kernel.base[2] + k as i64,
                        );
                        let w = kernel.w[0][i] * kernel.w[1][j] * kernel.w[2][k];
                        let grad = Vector3::new(
                            kernel.dw[0][i] * kernel.w[1][j] * kernel.w[2][k] * inv_dx,
                            kernel.w[0][i] * kernel.dw[1][j] * kernel.w[2][k] * inv_dx,
                            kernel.w[0][i] * kernel.w[1][j] * kernel.dw[2][k] * inv_dx,
                        );
                        let dpos = Vector3::new(
                            (T::of(i as f64) - kernel.fx[0]) * dx,
                            (T::of(j as f64) - kernel.fx[1]) * dx,
                            (T::of(k as f64) - kernel.fx[2]) * dx,
                        );
                        self.grid_mass[node] = self.grid_mass[node] + w * p.mass;
                        self.grid_vel[node] +=
                            (p.velocity + p.affine * dpos) * (w * p.mass);
                        if let Some(kappa) = &stress {
                            self.grid_force[node] -= kappa * grad;
                        }
                    }
                }
            }
        }

        let grid_mass_total = self
            .grid_mass
            .iter()
            .fold(T::zero(), |acc, m| acc + *m)
            .to64();
        let particle_mass_total = self.total_mass().to64();
        let rel = if particle_mass_total > 0.0 {
            ((grid_mass_total - particle_mass_total) / particle_mass_total).abs()
        } else {
            0.0
        };
        stats.grid_mass = grid_mass_total;
        if rel > stats.max_mass_error_rel {
            stats.max_mass_error_rel = rel;
        }

        // Grid update: momentum -> velocity, body forces, damping, walls.
        let gravity = Vector3::new(
            self.config.gravity[0],
            self.config.gravity[1],
            self.config.gravity[2],
        );
        let wind = Vector3::new(self.config.wind[0], self.config.wind[1], self.config.wind[2])
            * wind_scale;
        let damp = T::one() / (T::one() + dt * self.config.damping);
        let m = self.nodes_per_axis;
        let width = self.config.boundary_width;
        let bc = self.config.boundary;
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    let node = (i * m + j) * m + k;
                    let mass = self.grid_mass[node];
                    if !(mass > T::zero()) {
                        continue;
                    }
                    let mut v = self.grid_vel[node] / mass
                        + (self.grid_force[node] / mass + gravity + wind) * dt;
                    v *= damp;
                    apply_boundary(&mut v, i, m, width, bc.x_min, bc.x_max, 0);
                    apply_boundary(&mut v, j, m, width, bc.y_min, bc.y_max, 1);
                    apply_boundary(&mut v, k, m, width, bc.z_min, bc.z_max, 2);
                    self.grid_vel[node] = v;
                }
            }
        }

        // G2P: gather, advect, update F, apply plasticity.
        let four = T::of(4.0);
        let table = self.config.plasticity;
        let frame = self.frame;
        for idx in 0..self.particles.len() {
            if self.particles[idx].kinematic {
                continue;
            }
            let kernel = self.kernel(&self.particles[idx].position);
            let mut velocity = Vector3::zeros();
            let mut b = Matrix3::zeros();
            for i in 0..SPLINE_SUPPORT {
                for j in 0..SPLINE_SUPPORT {
                    for k in 0..SPLINE_SUPPORT {
                        let node = self.node_index(
                            kernel.base[0] + i as i64,
                            kernel.base[1] + j as i64,
                            kernel.base[2] + k as i64,
                        );
                        if !(self.grid_mass[node] > T::zero()) {
                            continue;
                        }
                        let w = kernel.w[0][i] * kernel.w[1][j] * kernel.w[2][k];
                        let dpos = Vector3::new(
                            (T::of(i as f64) - kernel.fx[0]) * dx,
                            (T::of(j as f64) - kernel.fx[1]) * dx,
                            (T::of(k as f64) - kernel.fx[2]) * dx,
                        );
                        let vw = self.grid_vel[node] * w;
                        velocity += vw;
                        b += vw * dpos.transpose();
                    }
                }
            }
            let affine = b * (four * inv_dx * inv_dx);
            let p = &mut self.particles[idx];
            p.velocity = velocity;
            p.affine = affine;
            p.position += velocity * dt;
            let f_trial = (Matrix3::identity() + affine * dt) * p.deformation;
            let (f_new, plastic) =
                return_map_for(p.class, &f_trial, p.mu, p.lambda, &table, p.plastic, idx)?;
            p.deformation = f_new;
            p.plastic = plastic;
            if p.position.iter().any(|v| !v.is_finite())
                || p.velocity.iter().any(|v| !v.is_finite())
            {
                return Err(MpmError::NonFiniteState {
                    particle: idx,
                    frame,
                });
            }
        }
        Ok(())
    }

    /// Per-particle positions in input order.
    pub fn positions(&self) -> Vec<[T; 3]> {
        self.particles
            .iter()
            .map(|p| [p.position[0], p.position[1], p.position[2]])
            .collect()
    }

    /// Per-particle velocities in input order.
    pub fn velocities(&self) -> Vec<[T; 3]> {
        self.particles
            .iter()
            .map(|p| [p.velocity[0], p.velocity[1], p.velocity[2]])
            .collect()
    }
}

/// Zeroes the appropriate velocity components on the two boundary bands of
/// one axis. `index` is the node index along the axis, `m` the node count.
#[inline]
fn apply_boundary<T: Real>(
    v: &mut Vector3<T>,
    index: usize,
    m: usize,
    width: usize,
    min_kind: BoundaryKind,
    max_kind: BoundaryKind,
    axis: usize,
) {
    let kind = if index < width {
        min_kind
    } else if index + width >= m {
        max_kind
    } else {
        return;
    };
    match kind {
        BoundaryKind::Sticky => *v = Vector3::zeros(),
        BoundaryKind::Slip => v[axis] = T::zero(),
        BoundaryKind::Open => {}
    }
}

/// Runs a full simulation, recording one snapshot per frame (after that
/// frame's steps). Returns the trajectory and aggregate diagnostics.
pub fn run<T: Real>(
    config: SimConfig<T>,
    particles: Vec<Particle<T>>,
) -> Result<(Trajectory<T>, RunStats), MpmError> {
    let frames = config.frames;
    let substeps = config.substeps;
    let sub_dt = config.dt / T::of(substeps as f64);
    let record_velocities = config.record_velocities;
    let mut state = MpmState::new(config, particles)?;
    let mut trajectory = Trajectory {
        positions: Vec::with_capacity(frames),
        velocities: record_velocities.then(|| Vec::with_capacity(frames)),
    };
    let mut stats = RunStats::default();
    for frame in 0..frames {
        let wind_scale = state.config.wind_scale(frame);
        for _ in 0..substeps {
            let step = state.step(sub_dt, wind_scale)?;
            stats.total_substeps += step.substeps;
            if step.max_mass_error_rel > stats.max_mass_error_rel {
                stats.max_mass_error_rel = step.max_mass_error_rel;
            }
        }
        state.frame += 1;
        trajectory.positions.push(state.positions());
        if let Some(vels) = trajectory.velocities.as_mut() {
            vels.push(state.velocities());
        }
    }
    Ok((trajectory, stats))
}
