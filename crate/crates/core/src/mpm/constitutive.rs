//! Constitutive models: fixed corotated elasticity plus per-class plastic
//! return mappings in diagonal (Hencky strain) space.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::MpmError;
use crate::materials::MaterialClass;
use crate::real::Real;

/// Class-default plasticity constants. Every value can be overridden from
/// the simulation config.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlasticityTable<T: Real> {
    /// Von Mises yield stress for `Metal` (Pa).
    pub metal_yield_stress: T,
    /// Von Mises yield stress for `Plasticine` (Pa).
    pub plasticine_yield_stress: T,
    /// Drucker-Prager friction angle for `Sand` (degrees).
    pub sand_friction_deg: T,
    /// Snow singular-value clamp: compression limit `theta_c`.
    pub snow_theta_c: T,
    /// Snow singular-value clamp: stretch limit `theta_s`.
    pub snow_theta_s: T,
    /// Snow hardening coefficient `xi` in `exp(xi (1 - Jp))`.
    pub snow_hardening: T,
    /// Lower clamp on the snow hardening factor.
    pub snow_hardening_min: T,
    /// Upper clamp on the snow hardening factor.
    pub snow_hardening_max: T,
}

impl<T: Real> Default for PlasticityTable<T> {
    fn default() -> Self {
        Self {
            metal_yield_stress: T::of(2e8),
            plasticine_yield_stress: T::of(3e3),
            sand_friction_deg: T::of(30.0),
            snow_theta_c: T::of(2.5e-2),
            snow_theta_s: T::of(7.5e-3),
            snow_hardening: T::of(10.0),
            snow_hardening_min: T::of(0.1),
            snow_hardening_max: T::of(5.0),
        }
    }
}

/// Per-particle plastic state. Only snow uses it today: `jp` accumulates
/// the determinant of the discarded plastic deformation and drives
/// hardening.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlasticState<T: Real> {
    pub jp: T,
}

impl<T: Real> Default for PlasticState<T> {
    fn default() -> Self {
        Self { jp: T::one() }
    }
}

impl<T: Real> PlasticState<T> {
    /// Snow hardening factor `clamp(exp(xi (1 - jp)))` applied to both Lame
    /// coefficients at stress time.
    pub fn snow_hardening_factor(&self, table: &PlasticityTable<T>) -> T {
        let raw = (table.snow_hardening * (T::one() - self.jp)).exp();
        raw.max(table.snow_hardening_min)
            .min(table.snow_hardening_max)
    }
}

/// Singular value decomposition of a 3x3 matrix with both factors fixed up
/// to proper rotations (`det U = det V = +1`), so `U V^T` is the polar
/// rotation of the input.
#[derive(Clone, Debug)]
pub struct Svd3<T: Real> {
    pub u: Matrix3<T>,
    pub sigma: Vector3<T>,
    pub v: Matrix3<T>,
}

impl<T: Real> Svd3<T> {
    /// Recomposes `U diag(sigma) V^T` for a replacement `sigma`.
    pub fn recompose(&self, sigma: Vector3<T>) -> Matrix3<T> {
        self.u * Matrix3::from_diagonal(&sigma) * self.v.transpose()
    }
}

/// Decomposes `f`, flipping signs so both factors are rotations. Requires
/// `det f > 0`; with that, all returned singular values are positive.
pub fn svd3<T: Real>(f: &Matrix3<T>, particle: usize) -> Result<Svd3<T>, MpmError> {
    if f.iter().any(|v| !v.is_finite()) {
        return Err(MpmError::DegenerateDeformation { particle });
    }
    let svd = f
        .try_svd(true, true, T::default_epsilon(), 500)
        .ok_or(MpmError::SvdFailure { particle })?;
    let mut u = svd.u.ok_or(MpmError::SvdFailure { particle })?;
    let mut v = svd.v_t.ok_or(MpmError::SvdFailure { particle })?.transpose();
    let mut sigma = svd.singular_values;
    if u.determinant() < T::zero() {
        u.column_mut(2).neg_mut();
        sigma[2] = -sigma[2];
    }
    if v.determinant() < T::zero() {
        v.column_mut(2).neg_mut();
        sigma[2] = -sigma[2];
    }
    if sigma.iter().any(|s| !s.is_finite() || *s <= T::zero()) {
        return Err(MpmError::DegenerateDeformation { particle });
    }
    Ok(Svd3 { u, sigma, v })
}

/// Cofactor matrix of `f`, equal to `det(f) * f^{-T}` without forming the
/// inverse.
fn cofactor<T: Real>(f: &Matrix3<T>) -> Matrix3<T> {
    let c0 = f.column(0).clone_owned();
    let c1 = f.column(1).clone_owned();
    let c2 = f.column(2).clone_owned();
    Matrix3::from_columns(&[c1.cross(&c2), c2.cross(&c0), c0.cross(&c1)])
}

/// First Piola-Kirchhoff stress of the fixed corotated model:
///
/// `P(F) = 2 mu (F - R) + lambda (J - 1) J F^{-T}`
///
/// with `R` the polar rotation of `F` and `J = det F`. Rejects non-finite
/// input and `det F <= 0`.
pub fn elastic_stress<T: Real>(
    f: &Matrix3<T>,
    mu: T,
    lambda: T,
) -> Result<Matrix3<T>, MpmError> {
    elastic_stress_for(f, mu, lambda, usize::MAX)
}

pub(crate) fn elastic_stress_for<T: Real>(
    f: &Matrix3<T>,
    mu: T,
    lambda: T,
    particle: usize,
) -> Result<Matrix3<T>, MpmError> {
    if f.iter().any(|v| !v.is_finite()) {
        return Err(MpmError::DegenerateDeformation { particle });
    }
    let j = f.determinant();
    if !(j > T::zero()) {
        return Err(MpmError::NonPositiveDeterminant {
            particle,
            det: j.to64(),
        });
    }
    let svd = svd3(f, particle)?;
    let r = svd.u * svd.v.transpose();
    let two = T::of(2.0);
    // J F^{-T} is the cofactor matrix, so no inversion is needed.
    Ok((f - r) * (two * mu) + cofactor(f) * (lambda * (j - T::one())))
}

/// Applies the plastic return mapping of `class` to a trial deformation
/// gradient, returning the projected gradient and updated plastic state.
///
/// * `Background`, `Elastic`, `Foam`, `Rigid`: identity.
/// * `Metal`, `Plasticine`: von Mises projection of the Hencky-strain
///   deviator at the class yield stress.
/// * `Sand`: Drucker-Prager cone projection; hydrostatic tension collapses
///   to the cone apex (`F = R`).
/// * `Snow`: singular values clamped to `[1 - theta_c, 1 + theta_s]`, with
///   the discarded volume ratio accumulated into `jp`.
///
/// Every branch is a projection: applying it twice equals applying it once.
pub fn return_map<T: Real>(
    class: MaterialClass,
    f_trial: &Matrix3<T>,
    mu: T,
    lambda: T,
    table: &PlasticityTable<T>,
    state: PlasticState<T>,
) -> Result<(Matrix3<T>, PlasticState<T>), MpmError> {
    return_map_for(class, f_trial, mu, lambda, table, state, usize::MAX)
}

pub(crate) fn return_map_for<T: Real>(
    class: MaterialClass,
    f_trial: &Matrix3<T>,
    mu: T,
    lambda: T,
    table: &PlasticityTable<T>,
    state: PlasticState<T>,
    particle: usize,
) -> Result<(Matrix3<T>, PlasticState<T>), MpmError> {
    match class {
        MaterialClass::Background
        | MaterialClass::Elastic
        | MaterialClass::Foam
        | MaterialClass::Rigid => Ok((*f_trial, state)),
        MaterialClass::Metal => {
            von_mises(f_trial, mu, table.metal_yield_stress, particle).map(|f| (f, state))
        }
        MaterialClass::Plasticine => {
            von_mises(f_trial, mu, table.plasticine_yield_stress, particle).map(|f| (f, state))
        }
        MaterialClass::Sand => drucker_prager(f_trial, mu, lambda, table, particle)
            .map(|f| (f, state)),
        MaterialClass::Snow => snow_clamp(f_trial, table, state, particle),
    }
}

/// Von Mises projection in Hencky space: if the strain deviator exceeds
/// `tau_y / (2 mu)` in norm it is radially shrunk onto the yield surface.
fn von_mises<T: Real>(
    f_trial: &Matrix3<T>,
    mu: T,
    yield_stress: T,
    particle: usize,
) -> Result<Matrix3<T>, MpmError> {
    let svd = svd3(f_trial, particle)?;
    let eps = svd.sigma.map(|s| s.ln());
    let third = T::one() / T::of(3.0);
    let mean = (eps[0] + eps[1] + eps[2]) * third;
    let dev = eps.map(|e| e - mean);
    let dev_norm = dev.norm();
    let radius = yield_stress / (T::of(2.0) * mu);
    if dev_norm <= radius {
        return Ok(*f_trial);
    }
    let scale = (dev_norm - radius) / dev_norm;
    let projected = eps - dev * scale;
    Ok(svd.recompose(projected.map(|e| e.exp())))
}

/// Drucker-Prager projection (cohesionless) in Hencky space, after Klar et
/// al.'s sand model. Case II (hydrostatic tension) goes to the cone apex;
/// case III shrinks the deviator until the state sits on the cone.
fn drucker_prager<T: Real>(
    f_trial: &Matrix3<T>,
    mu: T,
    lambda: T,
    table: &PlasticityTable<T>,
    particle: usize,
) -> Result<Matrix3<T>, MpmError> {
    let svd = svd3(f_trial, particle)?;
    let eps = svd.sigma.map(|s| s.ln());
    let tr = eps[0] + eps[1] + eps[2];
    if tr > T::zero() {
        // Expansion in every direction: all strain is plastic.
        return Ok(svd.u * svd.v.transpose());
    }
    let third = T::one() / T::of(3.0);
    let dev = eps.map(|e| e - tr * third);
    let dev_norm = dev.norm();
    if dev_norm == T::zero() {
        return Ok(*f_trial);
    }
    let phi = table.sand_friction_deg * T::pi() / T::of(180.0);
    let sin_phi = phi.sin();
    let alpha = (T::of(2.0) / T::of(3.0)).sqrt() * T::of(2.0) * sin_phi
        / (T::of(3.0) - sin_phi);
    let delta_gamma =
        dev_norm + alpha * tr * (T::of(3.0) * lambda + T::of(2.0) * mu) / (T::of(2.0) * mu);
    if delta_gamma <= T::zero() {
        return Ok(*f_trial);
    }
    let projected = eps - dev * (delta_gamma / dev_norm);
    Ok(svd.recompose(projected.map(|e| e.exp())))
}

/// Snow plasticity: clamps singular values into
/// `[1 - theta_c, 1 + theta_s]` and moves the discarded volume change into
/// the plastic determinant `jp`.
fn snow_clamp<T: Real>(
    f_trial: &Matrix3<T>,
    table: &PlasticityTable<T>,
    state: PlasticState<T>,
    particle: usize,
) -> Result<(Matrix3<T>, PlasticState<T>), MpmError> {
    let svd = svd3(f_trial, particle)?;
    let lo = T::one() - table.snow_theta_c;
    let hi = T::one() + table.snow_theta_s;
    let clamped = svd.sigma.map(|s| s.max(lo).min(hi));
    if clamped == svd.sigma {
        return Ok((*f_trial, state));
    }
    let ratio =
        (svd.sigma[0] * svd.sigma[1] * svd.sigma[2]) / (clamped[0] * clamped[1] * clamped[2]);
    let state = PlasticState {
        jp: state.jp * ratio,
    };
    Ok((svd.recompose(clamped), state))
}
