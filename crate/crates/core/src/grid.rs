//! Dense voxel grids over a cubic lattice.
//!
//! All grids share one memory layout: a cube of `n^3` voxels in x-major
//! order with `d` channels per voxel, flattened as
//!
//! ```text
//! element(x, y, z, c) = data[((x * n + y) * n + z) * d + c]
//! ```
//!
//! World coordinates are tied to the lattice by [`SceneBounds`]: voxel
//! `(i, j, k)` covers the half-open box `min + [i, i+1) * spacing` per axis
//! and its center sits at `min + (i + 0.5) * spacing`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::materials::{ContinuousParams, MaterialClass, MaterialGrid};
use crate::real::Real;

/// Sentinel stored in a [`PartLabelGrid`] for voxels outside every part.
pub const PART_UNASSIGNED: u8 = u8::MAX;

/// Default search radius (in voxels) for [`nn_transfer`] fallback lookups.
pub const DEFAULT_NN_SEARCH_RADIUS: usize = 2;

/// Errors produced by grid construction and grid-level operations.
#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid dims: n = {n}, d = {d}")]
    InvalidDims { n: usize, d: usize },
    #[error("grid dims overflow memory limits: n = {n}, d = {d}")]
    DimsOverflow { n: usize, d: usize },
    #[error("invalid scene bounds: min {min:?}, max {max:?}")]
    InvalidBounds { min: [f64; 3], max: [f64; 3] },
    #[error("data length {got} does not match expected {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },
    #[error("negative density at element {index}")]
    NegativeDensity { index: usize },
    #[error("non-finite position for point {index}")]
    NonFinitePosition { index: usize },
    #[error("point {index} has feature length {got}, grid expects {expected}")]
    FeatureLength {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("occupancy threshold must be finite and non-negative")]
    InvalidThreshold,
    #[error("grid sizes do not match: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("part label {label} at voxel {voxel} exceeds palette size {parts}")]
    LabelOutOfRange {
        voxel: usize,
        label: u8,
        parts: usize,
    },
}

/// Cube edge length `n` (voxels per axis) and channel count `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDims {
    pub n: usize,
    pub d: usize,
}

impl GridDims {
    /// Validates that `n` and `d` are positive and that `n^3 * d` elements
    /// are addressable.
    pub fn new(n: usize, d: usize) -> Result<Self, GridError> {
        if n == 0 || d == 0 {
            return Err(GridError::InvalidDims { n, d });
        }
        // Keep n and d inside the u32 header fields of the file format and
        // the product inside isize (Vec allocation limit).
        let overflow = n > u32::MAX as usize
            || d > u32::MAX as usize
            || n.checked_mul(n)
                .and_then(|n2| n2.checked_mul(n))
                .and_then(|n3| n3.checked_mul(d))
                .map(|total| total > isize::MAX as usize / 8)
                .unwrap_or(true);
        if overflow {
            return Err(GridError::DimsOverflow { n, d });
        }
        Ok(Self { n, d })
    }

    /// Number of voxels, `n^3`.
    #[inline]
    pub fn voxels(&self) -> usize {
        self.n * self.n * self.n
    }

    /// Number of scalar elements, `n^3 * d`.
    #[inline]
    pub fn elements(&self) -> usize {
        self.voxels() * self.d
    }

    /// Flattened voxel index of `(x, y, z)`.
    #[inline]
    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.n && y < self.n && z < self.n);
        (x * self.n + y) * self.n + z
    }

    /// Inverse of [`GridDims::voxel_index`].
    #[inline]
    pub fn voxel_coords(&self, index: usize) -> [usize; 3] {
        let z = index % self.n;
        let y = (index / self.n) % self.n;
        let x = index / (self.n * self.n);
        [x, y, z]
    }
}

/// Axis-aligned world-space box enclosing the voxel lattice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBounds<T: Real> {
    pub min: [T; 3],
    pub max: [T; 3],
}

impl<T: Real> SceneBounds<T> {
    /// Validates that both corners are finite and `max > min` per axis.
    pub fn new(min: [T; 3], max: [T; 3]) -> Result<Self, GridError> {
        let finite = min.iter().chain(max.iter()).all(|v| v.is_finite());
        if !finite || (0..3).any(|a| max[a] <= min[a]) {
            return Err(GridError::InvalidBounds {
                min: min.map(Real::to64),
                max: max.map(Real::to64),
            });
        }
        Ok(Self { min, max })
    }

    /// The unit cube `[0, 1]^3`.
    pub fn unit() -> Self {
        Self {
            min: [T::zero(); 3],
            max: [T::one(); 3],
        }
    }

    /// Per-axis extent `max - min`.
    #[inline]
    pub fn extent(&self) -> [T; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    /// Per-axis voxel edge length for an `n^3` lattice.
    #[inline]
    pub fn spacing(&self, n: usize) -> [T; 3] {
        let nt = T::of(n as f64);
        self.extent().map(|e| e / nt)
    }

    /// World position of the center of voxel `(i, j, k)`.
    #[inline]
    pub fn voxel_center(&self, n: usize, voxel: [usize; 3]) -> [T; 3] {
        let h = self.spacing(n);
        let half = T::of(0.5);
        [
            self.min[0] + (T::of(voxel[0] as f64) + half) * h[0],
            self.min[1] + (T::of(voxel[1] as f64) + half) * h[1],
            self.min[2] + (T::of(voxel[2] as f64) + half) * h[2],
        ]
    }

    /// Volume of a single voxel of an `n^3` lattice.
    #[inline]
    pub fn voxel_volume(&self, n: usize) -> T {
        let h = self.spacing(n);
        h[0] * h[1] * h[2]
    }

    /// Whether `p` lies inside the box (inclusive on both corners).
    #[inline]
    pub fn contains(&self, p: [T; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Per-voxel feature vectors (`d` channels, all entries finite).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T: Real> {
    dims: GridDims,
    data: Vec<T>,
}

impl<T: Real> FeatureGrid<T> {
    /// All-zero grid.
    pub fn zeros(dims: GridDims) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.elements()],
        }
    }

    /// Builds a grid from flat data in the canonical layout, rejecting
    /// length mismatches and non-finite entries.
    pub fn from_data(dims: GridDims, data: Vec<T>) -> Result<Self, GridError> {
        if data.len() != dims.elements() {
            return Err(GridError::DataLength {
                expected: dims.elements(),
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { index });
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn dims(&self) -> GridDims {
        self.dims
    }

    /// Feature vector of the voxel with flattened index `v`.
    #[inline]
    pub fn feature(&self, v: usize) -> &[T] {
        &self.data[v * self.dims.d..(v + 1) * self.dims.d]
    }

    #[inline]
    pub fn feature_mut(&mut self, v: usize) -> &mut [T] {
        &mut self.data[v * self.dims.d..(v + 1) * self.dims.d]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
}

/// Per-voxel scalar density (non-negative, finite).
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid<T: Real> {
    n: usize,
    data: Vec<T>,
}

impl<T: Real> DensityGrid<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![T::zero(); n * n * n],
        }
    }

    /// Builds a density grid, rejecting negative or non-finite entries.
    pub fn from_data(n: usize, data: Vec<T>) -> Result<Self, GridError> {
        if data.len() != n * n * n {
            return Err(GridError::DataLength {
                expected: n * n * n,
                got: data.len(),
            });
        }
        for (index, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(GridError::NonFinite { index });
            }
            if *v < T::zero() {
                return Err(GridError::NegativeDensity { index });
            }
        }
        Ok(Self { n, data })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn value(&self, v: usize) -> T {
        self.data[v]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
}

/// Per-voxel boolean occupancy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyMask {
    n: usize,
    data: Vec<bool>,
}

impl OccupancyMask {
    pub fn new_empty(n: usize) -> Self {
        Self {
            n,
            data: vec![false; n * n * n],
        }
    }

    pub fn from_data(n: usize, data: Vec<bool>) -> Result<Self, GridError> {
        if data.len() != n * n * n {
            return Err(GridError::DataLength {
                expected: n * n * n,
                got: data.len(),
            });
        }
        Ok(Self { n, data })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_occupied(&self, v: usize) -> bool {
        self.data[v]
    }

    #[inline]
    pub fn set(&mut self, v: usize, occupied: bool) {
        self.data[v] = occupied;
    }

    pub fn count_occupied(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    /// Flattened indices of occupied voxels, in layout order.
    pub fn occupied_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(v, b)| b.then_some(v))
    }

    #[inline]
    pub fn data(&self) -> &[bool] {
        &self.data
    }
}

/// Per-voxel part index (`0..P-1`) or [`PART_UNASSIGNED`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartLabelGrid {
    n: usize,
    data: Vec<u8>,
}

impl PartLabelGrid {
    pub fn new_unassigned(n: usize) -> Self {
        Self {
            n,
            data: vec![PART_UNASSIGNED; n * n * n],
        }
    }

    pub fn from_data(n: usize, data: Vec<u8>) -> Result<Self, GridError> {
        if data.len() != n * n * n {
            return Err(GridError::DataLength {
                expected: n * n * n,
                got: data.len(),
            });
        }
        Ok(Self { n, data })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn label(&self, v: usize) -> u8 {
        self.data[v]
    }

    #[inline]
    pub fn set(&mut self, v: usize, label: u8) {
        self.data[v] = label;
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

/// One input sample for [`voxelize_points`]: a world position, a borrowed
/// feature vector of the grid's channel count, and a non-negative density.
#[derive(Clone, Copy, Debug)]
pub struct PointSample<'a, T: Real> {
    pub position: [T; 3],
    pub feature: &'a [T],
    pub density: T,
}

/// Maps a world position to the voxel containing it.
///
/// The fractional lattice coordinate is floored per axis and clamped to
/// `[0, n-1]`, so `p = max` lands in the last voxel. Rejects non-finite
/// positions.
pub fn world_to_voxel<T: Real>(
    p: [T; 3],
    bounds: &SceneBounds<T>,
    n: usize,
) -> Result<[usize; 3], GridError> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(GridError::NonFinitePosition { index: 0 });
    }
    let h = bounds.spacing(n);
    let mut out = [0usize; 3];
    for a in 0..3 {
        let t = ((p[a] - bounds.min[a]) / h[a]).floor().to64();
        out[a] = (t.max(0.0) as usize).min(n - 1);
    }
    Ok(out)
}

/// Splats a point set onto the lattice.
///
/// Per voxel, the feature channels are the density-weighted mean of the
/// contained points' features; if every contained point has zero density the
/// unweighted mean is used instead. The density channel is the arithmetic
/// mean of the contained points' densities. Voxels containing no points stay
/// zero in both grids.
pub fn voxelize_points<T: Real>(
    points: &[PointSample<'_, T>],
    bounds: &SceneBounds<T>,
    dims: GridDims,
) -> Result<(FeatureGrid<T>, DensityGrid<T>), GridError> {
    let voxels = dims.voxels();
    let mut weight_sum = vec![T::zero(); voxels];
    let mut count = vec![0u32; voxels];
    let mut density_sum = vec![T::zero(); voxels];

    // First pass: validate inputs and gather per-voxel weights so the second
    // pass can normalize contributions as it accumulates. Normalizing the
    // weight per point (rather than dividing sums afterwards) keeps a voxel
    // holding exactly one point bitwise equal to that point's feature.
    let mut cells = Vec::with_capacity(points.len());
    for (index, pt) in points.iter().enumerate() {
        if pt.position.iter().any(|v| !v.is_finite()) {
            return Err(GridError::NonFinitePosition { index });
        }
        if pt.feature.len() != dims.d {
            return Err(GridError::FeatureLength {
                index,
                expected: dims.d,
                got: pt.feature.len(),
            });
        }
        if let Some(c) = pt.feature.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite {
                index: index * dims.d + c,
            });
        }
        if !pt.density.is_finite() {
            return Err(GridError::NonFinite { index });
        }
        if pt.density < T::zero() {
            return Err(GridError::NegativeDensity { index });
        }
        let [x, y, z] = world_to_voxel(pt.position, bounds, dims.n)?;
        let v = dims.voxel_index(x, y, z);
        cells.push(v);
        weight_sum[v] += pt.density;
        count[v] += 1;
        density_sum[v] += pt.density;
    }

    let mut features = FeatureGrid::zeros(dims);
    for (pt, &v) in points.iter().zip(&cells) {
        let w = if weight_sum[v] > T::zero() {
            pt.density / weight_sum[v]
        } else {
            T::one() / T::of(count[v] as f64)
        };
        let dst = features.feature_mut(v);
        for (acc, src) in dst.iter_mut().zip(pt.feature) {
            *acc += w * *src;
        }
    }

    let mut density = vec![T::zero(); voxels];
    for v in 0..voxels {
        if count[v] > 0 {
            density[v] = density_sum[v] / T::of(count[v] as f64);
        }
    }
    Ok((features, DensityGrid { n: dims.n, data: density }))
}

/// Thresholds a density grid into an occupancy mask: `density >= alpha`
/// (inclusive). Rejects negative or non-finite thresholds.
pub fn compute_occupancy<T: Real>(
    density: &DensityGrid<T>,
    alpha: T,
) -> Result<OccupancyMask, GridError> {
    if !alpha.is_finite() || alpha < T::zero() {
        return Err(GridError::InvalidThreshold);
    }
    Ok(OccupancyMask {
        n: density.n,
        data: density.data.iter().map(|d| *d >= alpha).collect(),
    })
}

/// Per-axis index of the voxel whose center is nearest to `p`, with ties
/// (positions exactly on a voxel boundary) broken toward the lower index.
fn nearest_voxel<T: Real>(p: [T; 3], bounds: &SceneBounds<T>, n: usize) -> [usize; 3] {
    let h = bounds.spacing(n);
    let mut out = [0usize; 3];
    for a in 0..3 {
        let t = (p[a] - bounds.min[a]) / h[a];
        let f = t.floor();
        let mut i = f.to64().max(0.0) as i64;
        // Exactly on the boundary: equidistant from centers i-1 and i.
        if t == f && i >= 1 {
            i -= 1;
        }
        out[a] = (i.max(0) as usize).min(n - 1);
    }
    out
}

/// Result of [`nn_transfer`]: per-particle material assignments in input
/// order (`None` when no occupied voxel lies within the search radius).
#[derive(Clone, Debug)]
pub struct NnTransfer<T: Real> {
    pub assignments: Vec<Option<(MaterialClass, ContinuousParams<T>)>>,
    pub unassigned: usize,
}

/// Assigns each particle the material of the occupied voxel whose center is
/// nearest to it.
///
/// The primary candidate is the globally nearest voxel center (ties toward
/// the lower flattened index). If that voxel is background, the search
/// widens to occupied voxels within `search_radius` (Chebyshev, in voxels)
/// of the candidate, again picking the nearest center with low-index
/// tie-breaking; particles with no occupied voxel in range are reported as
/// unassigned. Rejects non-finite positions.
pub fn nn_transfer<T: Real>(
    material: &MaterialGrid<T>,
    positions: &[[T; 3]],
    bounds: &SceneBounds<T>,
    search_radius: usize,
) -> Result<NnTransfer<T>, GridError> {
    let n = material.n();
    let dims = GridDims::new(n, 1)?;
    let mut assignments = Vec::with_capacity(positions.len());
    let mut unassigned = 0usize;

    for (index, &p) in positions.iter().enumerate() {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(GridError::NonFinitePosition { index });
        }
        let c = nearest_voxel(p, bounds, n);
        let v0 = dims.voxel_index(c[0], c[1], c[2]);
        let mut found: Option<(T, usize)> = None;
        if material.class_at(v0) != MaterialClass::Background {
            found = Some((T::zero(), v0));
        } else {
            let r = search_radius as i64;
            let range = |i: usize| -> (usize, usize) {
                let lo = (i as i64 - r).max(0) as usize;
                let hi = ((i as i64 + r) as usize).min(n - 1);
                (lo, hi)
            };
            let (x0, x1) = range(c[0]);
            let (y0, y1) = range(c[1]);
            let (z0, z1) = range(c[2]);
            for x in x0..=x1 {
                for y in y0..=y1 {
                    for z in z0..=z1 {
                        let v = dims.voxel_index(x, y, z);
                        if material.class_at(v) == MaterialClass::Background {
                            continue;
                        }
                        let center = bounds.voxel_center(n, [x, y, z]);
                        let mut d2 = T::zero();
                        for a in 0..3 {
                            let dd = center[a] - p[a];
                            d2 += dd * dd;
                        }
                        // Strict < keeps the lowest flattened index on ties
                        // because the scan runs in flattened order.
                        if found.map_or(true, |(best, _)| d2 < best) {
                            found = Some((d2, v));
                        }
                    }
                }
            }
        }
        match found {
            Some((_, v)) => {
                assignments.push(Some((material.class_at(v), material.params_struct_at(v))));
            }
            None => {
                assignments.push(None);
                unassigned += 1;
            }
        }
    }
    Ok(NnTransfer {
        assignments,
        unassigned,
    })
}
