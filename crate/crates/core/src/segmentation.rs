//! Open-vocabulary part segmentation by cosine similarity.
//!
//! Each named part carries a query embedding; every occupied voxel is
//! labeled with the part whose embedding has the highest cosine similarity
//! to the voxel's feature vector. Exact similarity ties break toward the
//! lower part index, and zero-norm feature vectors (cosine undefined) fall
//! back to part 0 and are counted so callers can surface a warning.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{FeatureGrid, OccupancyMask, PartLabelGrid, PART_UNASSIGNED};
use crate::materials::{ContinuousParams, MaterialClass, MaterialGrid};
use crate::real::Real;

/// Errors from query validation, segmentation and painting.
#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("query set declares no parts")]
    EmptyQuerySet,
    #[error("query set declares {0} parts, the label format allows at most 255")]
    TooManyParts(usize),
    #[error("duplicate part name {0:?}")]
    DuplicatePart(String),
    #[error("part {part:?} embedding has length {got}, expected {expected}")]
    EmbeddingLength {
        part: String,
        expected: usize,
        got: usize,
    },
    #[error("part {part:?} embedding is not finite")]
    NonFiniteQuery { part: String },
    #[error("part {part:?} embedding has zero norm")]
    ZeroNormQuery { part: String },
    #[error("feature dim {features} does not match query dim {queries}")]
    DimMismatch { features: usize, queries: usize },
    #[error("grid sizes do not match: features n = {features}, mask n = {mask}")]
    GridMismatch { features: usize, mask: usize },
    #[error("label {label} at voxel {voxel} has no palette entry ({parts} parts)")]
    LabelOutOfRange {
        voxel: usize,
        label: u8,
        parts: usize,
    },
}

/// One named part query.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryPart<T: Real> {
    pub name: String,
    pub embedding: Vec<T>,
}

/// An ordered set of part queries; the position in `parts` is the part
/// index used in label grids.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySet<T: Real> {
    pub parts: Vec<QueryPart<T>>,
}

impl<T: Real> QuerySet<T> {
    /// Builds and validates a query set from `(name, embedding)` pairs.
    pub fn new(parts: Vec<(String, Vec<T>)>) -> Result<Self, SegmentError> {
        let set = Self {
            parts: parts
                .into_iter()
                .map(|(name, embedding)| QueryPart { name, embedding })
                .collect(),
        };
        set.validate()?;
        Ok(set)
    }

    /// Checks cardinality, dimension agreement, finiteness, nonzero norms
    /// and name uniqueness.
    pub fn validate(&self) -> Result<(), SegmentError> {
        if self.parts.is_empty() {
            return Err(SegmentError::EmptyQuerySet);
        }
        if self.parts.len() > PART_UNASSIGNED as usize {
            return Err(SegmentError::TooManyParts(self.parts.len()));
        }
        let d = self.parts[0].embedding.len();
        let mut seen = std::collections::BTreeSet::new();
        for part in &self.parts {
            if !seen.insert(part.name.as_str()) {
                return Err(SegmentError::DuplicatePart(part.name.clone()));
            }
            if part.embedding.len() != d {
                return Err(SegmentError::EmbeddingLength {
                    part: part.name.clone(),
                    expected: d,
                    got: part.embedding.len(),
                });
            }
            if part.embedding.iter().any(|v| !v.is_finite()) {
                return Err(SegmentError::NonFiniteQuery {
                    part: part.name.clone(),
                });
            }
            if norm(&part.embedding) == T::zero() {
                return Err(SegmentError::ZeroNormQuery {
                    part: part.name.clone(),
                });
            }
        }
        Ok(())
    }

    /// Embedding dimension.
    pub fn dim(&self) -> usize {
        self.parts.first().map_or(0, |p| p.embedding.len())
    }

    /// Part names in index order.
    pub fn names(&self) -> Vec<&str> {
        self.parts.iter().map(|p| p.name.as_str()).collect()
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Result of [`segment`]: per-voxel labels plus warning counters.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub labels: PartLabelGrid,
    /// Occupied voxels whose feature had zero norm (assigned part 0).
    pub zero_norm_voxels: usize,
    /// Occupied voxels where two or more parts tied exactly (lowest index
    /// kept).
    pub ties: usize,
}

/// Labels every occupied voxel with the cosine-nearest part query.
pub fn segment<T: Real>(
    features: &FeatureGrid<T>,
    mask: &OccupancyMask,
    queries: &QuerySet<T>,
) -> Result<Segmentation, SegmentError> {
    queries.validate()?;
    let dims = features.dims();
    if dims.n != mask.n() {
        return Err(SegmentError::GridMismatch {
            features: dims.n,
            mask: mask.n(),
        });
    }
    if dims.d != queries.dim() {
        return Err(SegmentError::DimMismatch {
            features: dims.d,
            queries: queries.dim(),
        });
    }

    let query_norms: Vec<T> = queries.parts.iter().map(|p| norm(&p.embedding)).collect();
    let mut labels = PartLabelGrid::new_unassigned(dims.n);
    let mut zero_norm_voxels = 0usize;
    let mut ties = 0usize;

    for v in 0..dims.voxels() {
        if !mask.is_occupied(v) {
            continue;
        }
        let f = features.feature(v);
        let fnorm = norm(f);
        if fnorm == T::zero() {
            labels.set(v, 0);
            zero_norm_voxels += 1;
            continue;
        }
        let mut best_idx = 0usize;
        let mut best = dot(f, &queries.parts[0].embedding) / (fnorm * query_norms[0]);
        let mut tied = false;
        for (idx, part) in queries.parts.iter().enumerate().skip(1) {
            let cos = dot(f, &part.embedding) / (fnorm * query_norms[idx]);
            if cos > best {
                best = cos;
                best_idx = idx;
                tied = false;
            } else if cos == best {
                tied = true;
            }
        }
        if tied {
            ties += 1;
        }
        labels.set(v, best_idx as u8);
    }
    Ok(Segmentation {
        labels,
        zero_norm_voxels,
        ties,
    })
}

/// Converts part labels into a material grid using a palette indexed by
/// part: `palette[label]` paints the voxel, [`PART_UNASSIGNED`] stays
/// background. Labels without a palette entry are rejected.
pub fn paint_materials<T: Real>(
    labels: &PartLabelGrid,
    palette: &[(MaterialClass, ContinuousParams<T>)],
) -> Result<MaterialGrid<T>, SegmentError> {
    let n = labels.n();
    let mut grid = MaterialGrid::new_background(n);
    for v in 0..n * n * n {
        let label = labels.label(v);
        if label == PART_UNASSIGNED {
            continue;
        }
        let (class, params) = palette.get(label as usize).ok_or({
            SegmentError::LabelOutOfRange {
                voxel: v,
                label,
                parts: palette.len(),
            }
        })?;
        grid.set(v, *class, *params);
    }
    Ok(grid)
}
