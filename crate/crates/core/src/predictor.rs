//! Per-voxel material predictor: a feature projector, a 3x3x3 neighborhood
//! aggregate, and a two-layer head emitting class logits plus normalized
//! continuous parameters.
//!
//! For voxel `v` with feature vector `f_v`:
//!
//! 1. `z_v = tanh(Wp f_v + bp)` projects features to width `h`.
//! 2. `m_v = (1/27) sum_{u in N27(v)} z_u` averages the 3x3x3 neighborhood,
//!    zero-padded at the grid border (the divisor stays 27).
//! 3. `y_v = W2 tanh(W1 [z_v; m_v] + b1) + b2` produces 11 outputs: 8 raw
//!    class logits followed by 3 continuous channels squashed by `tanh`.
//!
//! Outputs are only defined on occupied voxels; the dense forward writes
//! zeros elsewhere, which coincides with the zero-model output. Training
//! minimizes the masked loss
//! `lambda * CE + MSE(E) + MSE(nu) + MSE(rho)`, each term averaged over
//! occupied voxels, by full-batch gradient descent with a step-halving
//! line search, so the loss trace is monotone non-increasing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{FeatureGrid, OccupancyMask};
use crate::materials::{MaterialClass, NormalizedMaterialGrid, CLASS_COUNT};
use crate::real::Real;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Output channels per voxel: one logit per class plus `E`, `nu`, `rho`.
pub const OUTPUT_CHANNELS: usize = CLASS_COUNT + 3;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("feature dimension mismatch: model expects {expected}, grid has {found}")]
    FeatureDimMismatch { expected: usize, found: usize },
    #[error("grid size mismatch: {0} vs {1}")]
    GridMismatch(usize, usize),
    #[error("model dimensions must be positive (d = {d}, h = {h})")]
    BadDims { d: usize, h: usize },
    #[error("parameter count mismatch: expected {expected}, got {found}")]
    BadParamCount { expected: usize, found: usize },
    #[error("non-finite model parameter at index {0}")]
    NonFiniteParam(usize),
    #[error("prediction data length {found} does not match {expected}")]
    BadDataLength { expected: usize, found: usize },
    #[error("non-finite prediction value at index {0}")]
    NonFiniteValue(usize),
    #[error("no occupied voxels")]
    EmptyMask,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("voxel index {0} out of range")]
    VoxelOutOfRange(usize),
    #[error("training diverged: loss became non-finite at epoch {0}")]
    Diverged(usize),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("occupied voxel {0} has background ground truth")]
    BackgroundTarget(usize),
}

/// Dense per-voxel predictions with [`OUTPUT_CHANNELS`] values per voxel:
/// 8 raw logits then 3 tanh-squashed continuous channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionGrid<T: Real> {
    n: usize,
    data: Vec<T>,
}

impl<T: Real> PredictionGrid<T> {
    pub const CHANNELS: usize = OUTPUT_CHANNELS;

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![T::zero(); n * n * n * Self::CHANNELS],
        }
    }

    pub fn from_raw(n: usize, data: Vec<T>) -> Result<Self, PredictorError> {
        let expected = n * n * n * Self::CHANNELS;
        if data.len() != expected {
            return Err(PredictorError::BadDataLength {
                expected,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(PredictorError::NonFiniteValue(i));
        }
        Ok(Self { n, data })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn raw(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn voxel(&self, v: usize) -> &[T] {
        &self.data[v * Self::CHANNELS..(v + 1) * Self::CHANNELS]
    }

    #[inline]
    pub fn voxel_mut(&mut self, v: usize) -> &mut [T] {
        &mut self.data[v * Self::CHANNELS..(v + 1) * Self::CHANNELS]
    }

    #[inline]
    pub fn logits(&self, v: usize) -> &[T] {
        &self.voxel(v)[..CLASS_COUNT]
    }

    #[inline]
    pub fn continuous(&self, v: usize) -> [T; 3] {
        let row = self.voxel(v);
        [row[CLASS_COUNT], row[CLASS_COUNT + 1], row[CLASS_COUNT + 2]]
    }

    /// Argmax class of a voxel's logits; ties go to the lowest class id.
    pub fn argmax_class(&self, v: usize) -> MaterialClass {
        let logits = self.logits(v);
        let mut best = 0usize;
        for (i, l) in logits.iter().enumerate().skip(1) {
            if *l > logits[best] {
                best = i;
            }
        }
        MaterialClass::from_u8(best as u8).expect("logit index is a valid class")
    }
}

/// Flat-parameter predictor model. Parameters are stored in declaration
/// order `Wp, bp, W1, b1, W2, b2` (all matrices row-major); the head's
/// hidden layer has width `h`, making every blob shape a function of
/// `(d, h)` so checkpoints are self-describing.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorModel<T: Real> {
    d: usize,
    h: usize,
    params: Vec<T>,
}

/// Borrowed views of the parameter blobs in declaration order.
pub struct ParamViews<'a, T> {
    pub wp: &'a [T],
    pub bp: &'a [T],
    pub w1: &'a [T],
    pub b1: &'a [T],
    pub w2: &'a [T],
    pub b2: &'a [T],
}

impl<T: Real> PredictorModel<T> {
    /// Total parameter count: `Wp (h x d), bp (h), W1 (h x 2h), b1 (h),
    /// W2 (11 x h), b2 (11)`.
    pub fn expected_param_count(d: usize, h: usize) -> usize {
        h * d + h + h * 2 * h + h + OUTPUT_CHANNELS * h + OUTPUT_CHANNELS
    }

    pub fn zeros(d: usize, h: usize) -> Result<Self, PredictorError> {
        if d == 0 || h == 0 {
            return Err(PredictorError::BadDims { d, h });
        }
        Ok(Self {
            d,
            h,
            params: vec![T::zero(); Self::expected_param_count(d, h)],
        })
    }

    /// Xavier-uniform initialization of the weight matrices (biases zero),
    /// deterministic in `seed`.
    pub fn init(d: usize, h: usize, seed: u64) -> Result<Self, PredictorError> {
        let mut model = Self::zeros(d, h)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spans = model.blob_spans();
        // Weight blobs are 0, 2, 4; fan pairs (in, out) per blob.
        let fans = [(d, h), (2 * h, h), (h, OUTPUT_CHANNELS)];
        for (blob, (fan_in, fan_out)) in [0usize, 2, 4].into_iter().zip(fans) {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (start, end) = spans[blob];
            for w in &mut model.params[start..end] {
                *w = T::of((rng.random::<f64>() * 2.0 - 1.0) * limit);
            }
        }
        Ok(model)
    }

    pub fn from_params(d: usize, h: usize, params: Vec<T>) -> Result<Self, PredictorError> {
        if d == 0 || h == 0 {
            return Err(PredictorError::BadDims { d, h });
        }
        let expected = Self::expected_param_count(d, h);
        if params.len() != expected {
            return Err(PredictorError::BadParamCount {
                expected,
                found: params.len(),
            });
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(PredictorError::NonFiniteParam(i));
        }
        Ok(Self { d, h, params })
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// `(start, end)` offsets of the six parameter blobs.
    fn blob_spans(&self) -> [(usize, usize); 6] {
        let (d, h) = (self.d, self.h);
        let sizes = [
            h * d,
            h,
            h * 2 * h,
            h,
            OUTPUT_CHANNELS * h,
            OUTPUT_CHANNELS,
        ];
        let mut spans = [(0usize, 0usize); 6];
        let mut offset = 0;
        for (i, size) in sizes.into_iter().enumerate() {
            spans[i] = (offset, offset + size);
            offset += size;
        }
        spans
    }

    pub fn views(&self) -> ParamViews<'_, T> {
        let s = self.blob_spans();
        ParamViews {
            wp: &self.params[s[0].0..s[0].1],
            bp: &self.params[s[1].0..s[1].1],
            w1: &self.params[s[2].0..s[2].1],
            b1: &self.params[s[3].0..s[3].1],
            w2: &self.params[s[4].0..s[4].1],
            b2: &self.params[s[5].0..s[5].1],
        }
    }

    /// Projector output `tanh(Wp f + bp)` for one feature vector.
    fn project(&self, f: &[T], out: &mut [T]) {
        let views = self.views();
        for i in 0..self.h {
            let row = &views.wp[i * self.d..(i + 1) * self.d];
            let mut acc = views.bp[i];
            for (w, x) in row.iter().zip(f) {
                acc = acc + *w * *x;
            }
            out[i] = acc.tanh();
        }
    }

    /// Head output for one voxel given `[z; m]`, writing 11 channels
    /// (logits raw, continuous squashed) and optionally caching the hidden
    /// activation for backprop.
    fn head(&self, zm: &[T], out: &mut [T], hidden: Option<&mut [T]>) {
        let views = self.views();
        let h = self.h;
        let mut a1 = vec![T::zero(); h];
        for i in 0..h {
            let row = &views.w1[i * 2 * h..(i + 1) * 2 * h];
            let mut acc = views.b1[i];
            for (w, x) in row.iter().zip(zm) {
                acc = acc + *w * *x;
            }
            a1[i] = acc.tanh();
        }
        for o in 0..OUTPUT_CHANNELS {
            let row = &views.w2[o * h..(o + 1) * h];
            let mut acc = views.b2[o];
            for (w, x) in row.iter().zip(&a1) {
                acc = acc + *w * *x;
            }
            out[o] = if o < CLASS_COUNT { acc } else { acc.tanh() };
        }
        if let Some(cache) = hidden {
            cache.copy_from_slice(&a1);
        }
    }
}

/// Offsets of the 27-voxel neighborhood in iteration order, with bounds
/// handling. Calls `visit(flat_index)` for every in-grid neighbor.
#[inline]
fn for_neighborhood(n: usize, v: usize, mut visit: impl FnMut(usize)) {
    let n2 = n * n;
    let x = v / n2;
    let y = (v / n) % n;
    let z = v % n;
    for dx in -1i64..=1 {
        for dy in -1i64..=1 {
            for dz in -1i64..=1 {
                let (ux, uy, uz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if ux < 0 || uy < 0 || uz < 0 {
                    continue;
                }
                let (ux, uy, uz) = (ux as usize, uy as usize, uz as usize);
                if ux >= n || uy >= n || uz >= n {
                    continue;
                }
                visit((ux * n + uy) * n + uz);
            }
        }
    }
}

/// Projection cache over the dilated occupied set: the occupied voxels plus
/// every in-grid neighbor, which is exactly the support the occupied heads
/// read. `slot[v]` maps a voxel to its row in `z`, or `usize::MAX`.
struct ProjectionCache<T: Real> {
    slot: Vec<usize>,
    voxels: Vec<usize>,
    z: Vec<T>,
}

impl<T: Real> ProjectionCache<T> {
    fn build(
        model: &PredictorModel<T>,
        features: &FeatureGrid<T>,
        occupied: &[usize],
        n: usize,
    ) -> Self {
        let voxel_count = n * n * n;
        let mut in_set = vec![false; voxel_count];
        for &v in occupied {
            for_neighborhood(n, v, |u| in_set[u] = true);
        }
        let mut slot = vec![usize::MAX; voxel_count];
        let mut voxels = Vec::new();
        for (v, flag) in in_set.iter().enumerate() {
            if *flag {
                slot[v] = voxels.len();
                voxels.push(v);
            }
        }
        let h = model.h();
        let mut z = vec![T::zero(); voxels.len() * h];
        for (row, &v) in voxels.iter().enumerate() {
            model.project(features.feature(v), &mut z[row * h..(row + 1) * h]);
        }
        Self { slot, voxels, z }
    }

    #[inline]
    fn z_row(&self, v: usize, h: usize) -> &[T] {
        let row = self.slot[v];
        debug_assert_ne!(row, usize::MAX);
        &self.z[row * h..(row + 1) * h]
    }

    /// Neighborhood mean of `z` over the in-grid 27-neighborhood of `v`,
    /// zero-padded: the divisor is always 27.
    fn neighborhood_mean(&self, n: usize, v: usize, h: usize, out: &mut [T]) {
        out.fill(T::zero());
        for_neighborhood(n, v, |u| {
            let row = self.z_row(u, h);
            for (o, zu) in out.iter_mut().zip(row) {
                *o = *o + *zu;
            }
        });
        let inv = T::one() / T::of(27.0);
        for o in out.iter_mut() {
            *o = *o * inv;
        }
    }
}

fn check_compat<T: Real>(
    model: &PredictorModel<T>,
    features: &FeatureGrid<T>,
    mask: &OccupancyMask,
) -> Result<usize, PredictorError> {
    if features.dims().d != model.d() {
        return Err(PredictorError::FeatureDimMismatch {
            expected: model.d(),
            found: features.dims().d,
        });
    }
    if features.dims().n != mask.n() {
        return Err(PredictorError::GridMismatch(features.dims().n, mask.n()));
    }
    Ok(features.dims().n)
}

/// Dense forward pass: head outputs on occupied voxels, zeros elsewhere
/// (identical to the zero-model output, so unoccupied rows are never
/// meaningful).
pub fn forward<T: Real>(
    model: &PredictorModel<T>,
    features: &FeatureGrid<T>,
    mask: &OccupancyMask,
) -> Result<PredictionGrid<T>, PredictorError> {
    let n = check_compat(model, features, mask)?;
    let occupied: Vec<usize> = mask.occupied_indices().collect();
    let cache = ProjectionCache::build(model, features, &occupied, n);
    let h = model.h();
    let mut grid = PredictionGrid::zeros(n);
    let mut zm = vec![T::zero(); 2 * h];
    for &v in &occupied {
        let (z_part, m_part) = zm.split_at_mut(h);
        z_part.copy_from_slice(cache.z_row(v, h));
        cache.neighborhood_mean(n, v, h, m_part);
        model.head(&zm, grid.voxel_mut(v), None);
    }
    Ok(grid)
}

/// Sparse forward pass over an explicit voxel list. Output row `i`
/// corresponds to `voxels[i]` and is bitwise identical to the dense
/// forward's row at that voxel — the receptive field is exactly the 3x3x3
/// feature neighborhood.
pub fn forward_at<T: Real>(
    model: &PredictorModel<T>,
    features: &FeatureGrid<T>,
    voxels: &[usize],
) -> Result<Vec<[T; OUTPUT_CHANNELS]>, PredictorError> {
    if features.dims().d != model.d() {
        return Err(PredictorError::FeatureDimMismatch {
            expected: model.d(),
            found: features.dims().d,
        });
    }
    let n = features.dims().n;
    let voxel_count = n * n * n;
    for &v in voxels {
        if v >= voxel_count {
            return Err(PredictorError::VoxelOutOfRange(v));
        }
    }
    let cache = ProjectionCache::build(model, features, voxels, n);
    let h = model.h();
    let mut zm = vec![T::zero(); 2 * h];
    let mut out = Vec::with_capacity(voxels.len());
    for &v in voxels {
        let (z_part, m_part) = zm.split_at_mut(h);
        z_part.copy_from_slice(cache.z_row(v, h));
        cache.neighborhood_mean(n, v, h, m_part);
        let mut row = [T::zero(); OUTPUT_CHANNELS];
        model.head(&zm, &mut row, None);
        out.push(row);
    }
    Ok(out)
}

/// Per-component masked loss. `total` is recomposed exactly as
/// `lambda * ce + mse_e + mse_nu + mse_rho`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T: Real> {
    pub total: T,
    pub ce: T,
    pub mse_e: T,
    pub mse_nu: T,
    pub mse_rho: T,
}

impl<T: Real> LossBreakdown<T> {
    fn compose(lambda: T, ce: T, mse_e: T, mse_nu: T, mse_rho: T) -> Self {
        Self {
            total: lambda * ce + mse_e + mse_nu + mse_rho,
            ce,
            mse_e,
            mse_nu,
            mse_rho,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.ce.is_finite()
            && self.mse_e.is_finite()
            && self.mse_nu.is_finite()
            && self.mse_rho.is_finite()
    }
}

/// Stable log-sum-exp of a logit row (natural log).
fn logsumexp<T: Real>(logits: &[T]) -> T {
    let mut m = logits[0];
    for l in &logits[1..] {
        if *l > m {
            m = *l;
        }
    }
    let mut acc = T::zero();
    for l in logits {
        acc = acc + (*l - m).exp();
    }
    m + acc.ln()
}

fn check_target_compat<T: Real>(
    pred_n: usize,
    target: &NormalizedMaterialGrid<T>,
    mask: &OccupancyMask,
) -> Result<(), PredictorError> {
    if target.n != pred_n || mask.n() != pred_n {
        return Err(PredictorError::GridMismatch(target.n, pred_n));
    }
    if mask.count_occupied() == 0 {
        return Err(PredictorError::EmptyMask);
    }
    Ok(())
}

/// Masked training loss over occupied voxels:
/// `lambda * CE(logits, class) + sum of squared continuous errors`, each
/// term averaged over the occupied set. Unoccupied voxels never contribute.
pub fn masked_loss<T: Real>(
    pred: &PredictionGrid<T>,
    target: &NormalizedMaterialGrid<T>,
    mask: &OccupancyMask,
    lambda: T,
) -> Result<LossBreakdown<T>, PredictorError> {
    check_target_compat(pred.n(), target, mask)?;
    let mut ce = T::zero();
    let mut mse = [T::zero(); 3];
    let mut count = 0usize;
    for v in mask.occupied_indices() {
        let class = target.class[v];
        if class == MaterialClass::Background {
            return Err(PredictorError::BackgroundTarget(v));
        }
        let logits = pred.logits(v);
        ce = ce + logsumexp(logits) - logits[class.as_u8() as usize];
        let cont = pred.continuous(v);
        let gt = target.values[v];
        for c in 0..3 {
            let diff = cont[c] - gt[c];
            mse[c] = mse[c] + diff * diff;
        }
        count += 1;
    }
    let inv = T::one() / T::of(count as f64);
    Ok(LossBreakdown::compose(
        lambda,
        ce * inv,
        mse[0] * inv,
        mse[1] * inv,
        mse[2] * inv,
    ))
}

/// One training example: features, normalized targets, and the mask that
/// selects the supervised voxels.
#[derive(Clone, Debug)]
pub struct TrainExample<T: Real> {
    pub features: FeatureGrid<T>,
    pub target: NormalizedMaterialGrid<T>,
    pub mask: OccupancyMask,
}

/// Training hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Cross-entropy weight in the loss.
    pub lambda: f64,
    /// Initial learning rate; adapted by the line search.
    pub learning_rate: f64,
    pub epochs: usize,
    /// Hidden width `h` of the projector and head.
    pub hidden: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
    /// Give up on an epoch after this many step halvings; training stops
    /// early at the current (still monotone) trace.
    pub max_halvings: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            learning_rate: 0.1,
            epochs: 200,
            hidden: 64,
            seed: 0,
            max_halvings: 40,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PredictorError> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(PredictorError::BadConfig(
                "lambda must be non-negative and finite".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(PredictorError::BadConfig(
                "learning_rate must be positive and finite".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(PredictorError::BadConfig("epochs must be at least 1".into()));
        }
        if self.hidden == 0 {
            return Err(PredictorError::BadConfig("hidden must be at least 1".into()));
        }
        if self.max_halvings == 0 {
            return Err(PredictorError::BadConfig(
                "max_halvings must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Scratch buffers and cached activations for one example's backward pass.
struct BackpropCache<T: Real> {
    occupied: Vec<usize>,
    projection: ProjectionCache<T>,
    /// Per occupied voxel: `[z; m]` (2h), hidden activation (h), outputs
    /// (11) in forward order.
    zm: Vec<T>,
    hidden: Vec<T>,
    out: Vec<T>,
}

/// Per-example loss terms (means over the occupied set) and flat gradient.
fn example_loss_and_grad<T: Real>(
    model: &PredictorModel<T>,
    example: &TrainExample<T>,
    lambda: T,
) -> Result<([T; 4], Vec<T>), PredictorError> {
    let n = check_compat(model, &example.features, &example.mask)?;
    check_target_compat(n, &example.target, &example.mask)?;
    let (d, h) = (model.d(), model.h());
    let spans = model.blob_spans();
    let mut grad = vec![T::zero(); model.params().len()];

    // Forward with caches.
    let occupied: Vec<usize> = example.mask.occupied_indices().collect();
    let projection = ProjectionCache::build(model, &example.features, &occupied, n);
    let occ = occupied.len();
    let mut cache = BackpropCache {
        occupied,
        projection,
        zm: vec![T::zero(); occ * 2 * h],
        hidden: vec![T::zero(); occ * h],
        out: vec![T::zero(); occ * OUTPUT_CHANNELS],
    };
    for (row, &v) in cache.occupied.iter().enumerate() {
        let zm = &mut cache.zm[row * 2 * h..(row + 1) * 2 * h];
        let (z_part, m_part) = zm.split_at_mut(h);
        z_part.copy_from_slice(cache.projection.z_row(v, h));
        cache.projection.neighborhood_mean(n, v, h, m_part);
        model.head(
            zm,
            &mut cache.out[row * OUTPUT_CHANNELS..(row + 1) * OUTPUT_CHANNELS],
            Some(&mut cache.hidden[row * h..(row + 1) * h]),
        );
    }

    // Loss terms.
    let inv_occ = T::one() / T::of(occ as f64);
    let mut ce = T::zero();
    let mut mse = [T::zero(); 3];
    for (row, &v) in cache.occupied.iter().enumerate() {
        let out = &cache.out[row * OUTPUT_CHANNELS..(row + 1) * OUTPUT_CHANNELS];
        let class = example.target.class[v];
        if class == MaterialClass::Background {
            return Err(PredictorError::BackgroundTarget(v));
        }
        let logits = &out[..CLASS_COUNT];
        ce = ce + logsumexp(logits) - logits[class.as_u8() as usize];
        let gt = example.target.values[v];
        for c in 0..3 {
            let diff = out[CLASS_COUNT + c] - gt[c];
            mse[c] = mse[c] + diff * diff;
        }
    }
    let terms = [
        ce * inv_occ,
        mse[0] * inv_occ,
        mse[1] * inv_occ,
        mse[2] * inv_occ,
    ];

    // Backward. Every per-voxel loss term carries weight 1 / occ.
    let scale = inv_occ;
    let views = model.views();
    let slots = cache.projection.voxels.len();
    let mut dz = vec![T::zero(); slots * h];
    let inv27 = T::one() / T::of(27.0);
    let two = T::of(2.0);
    for (row, &v) in cache.occupied.iter().enumerate() {
        let out = &cache.out[row * OUTPUT_CHANNELS..(row + 1) * OUTPUT_CHANNELS];
        let class = example.target.class[v].as_u8() as usize;
        let mut dout = [T::zero(); OUTPUT_CHANNELS];
        // Softmax minus one-hot, weighted by lambda.
        let lse = logsumexp(&out[..CLASS_COUNT]);
        for c in 0..CLASS_COUNT {
            let softmax = (out[c] - lse).exp();
            let indicator = if c == class { T::one() } else { T::zero() };
            dout[c] = lambda * scale * (softmax - indicator);
        }
        // Squared error through the output tanh.
        let gt = example.target.values[v];
        for c in 0..3 {
            let y = out[CLASS_COUNT + c];
            dout[CLASS_COUNT + c] = two * scale * (y - gt[c]) * (T::one() - y * y);
        }

        let a1 = &cache.hidden[row * h..(row + 1) * h];
        let zm = &cache.zm[row * 2 * h..(row + 1) * 2 * h];
        // W2, b2 and the hidden delta.
        let mut da1 = vec![T::zero(); h];
        let (w2_start, _) = spans[4];
        let (b2_start, _) = spans[5];
        for o in 0..OUTPUT_CHANNELS {
            grad[b2_start + o] = grad[b2_start + o] + dout[o];
            let row_w2 = &views.w2[o * h..(o + 1) * h];
            for i in 0..h {
                grad[w2_start + o * h + i] = grad[w2_start + o * h + i] + dout[o] * a1[i];
                da1[i] = da1[i] + row_w2[i] * dout[o];
            }
        }
        // W1, b1 and the input delta.
        let (w1_start, _) = spans[2];
        let (b1_start, _) = spans[3];
        let mut dzm = vec![T::zero(); 2 * h];
        for i in 0..h {
            let du = da1[i] * (T::one() - a1[i] * a1[i]);
            grad[b1_start + i] = grad[b1_start + i] + du;
            let row_w1 = &views.w1[i * 2 * h..(i + 1) * 2 * h];
            for j in 0..2 * h {
                grad[w1_start + i * 2 * h + j] = grad[w1_start + i * 2 * h + j] + du * zm[j];
                dzm[j] = dzm[j] + row_w1[j] * du;
            }
        }
        // dz for this voxel, plus the neighborhood-mean scatter.
        let slot_v = cache.projection.slot[v];
        for i in 0..h {
            dz[slot_v * h + i] = dz[slot_v * h + i] + dzm[i];
        }
        for_neighborhood(n, v, |u| {
            let slot_u = cache.projection.slot[u];
            for i in 0..h {
                dz[slot_u * h + i] = dz[slot_u * h + i] + dzm[h + i] * inv27;
            }
        });
    }
    // Projector gradient across the dilated set.
    let (wp_start, _) = spans[0];
    let (bp_start, _) = spans[1];
    for (slot, &v) in cache.projection.voxels.iter().enumerate() {
        let z = &cache.projection.z[slot * h..(slot + 1) * h];
        let f = example.features.feature(v);
        for i in 0..h {
            let g = dz[slot * h + i];
            if g == T::zero() {
                continue;
            }
            let du = g * (T::one() - z[i] * z[i]);
            grad[bp_start + i] = grad[bp_start + i] + du;
            for (j, fj) in f.iter().enumerate() {
                grad[wp_start + i * d + j] = grad[wp_start + i * d + j] + du * *fj;
            }
        }
    }
    Ok((terms, grad))
}

/// Dataset loss and gradient with respect to every model parameter, in the
/// model's flat layout. The dataset loss is the mean of per-example masked
/// losses. Examples are processed in parallel but reduced in dataset
/// order, so the result is deterministic regardless of thread count.
/// Exposed so finite-difference checks can call it directly.
pub fn loss_and_grad<T: Real>(
    model: &PredictorModel<T>,
    dataset: &[TrainExample<T>],
    lambda: T,
) -> Result<(LossBreakdown<T>, Vec<T>), PredictorError> {
    use rayon::prelude::*;
    if dataset.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    let partials: Vec<([T; 4], Vec<T>)> = dataset
        .par_iter()
        .map(|example| example_loss_and_grad(model, example, lambda))
        .collect::<Result<_, _>>()?;
    let inv_scenes = T::one() / T::of(dataset.len() as f64);
    let mut totals = [T::zero(); 4];
    let mut grad = vec![T::zero(); model.params().len()];
    for (terms, example_grad) in &partials {
        for (t, term) in totals.iter_mut().zip(terms) {
            *t = *t + *term * inv_scenes;
        }
        for (g, eg) in grad.iter_mut().zip(example_grad) {
            *g = *g + *eg * inv_scenes;
        }
    }
    let loss = LossBreakdown::compose(lambda, totals[0], totals[1], totals[2], totals[3]);
    Ok((loss, grad))
}

/// Full-batch gradient descent with a step-halving line search. Each epoch
/// either finds a non-increasing step (learning rate then grows 10%) or
/// stops early after `max_halvings` rejected steps. The returned trace has
/// one entry per accepted state, starting with the initial loss, and is
/// monotone non-increasing in `total`.
pub fn train<T: Real>(
    mut model: PredictorModel<T>,
    dataset: &[TrainExample<T>],
    cfg: &TrainConfig,
) -> Result<(PredictorModel<T>, Vec<LossBreakdown<T>>), PredictorError> {
    cfg.validate()?;
    let lambda = T::of(cfg.lambda);
    let mut lr = T::of(cfg.learning_rate);
    let (mut loss, mut grad) = loss_and_grad(&model, dataset, lambda)?;
    if !loss.is_finite() {
        return Err(PredictorError::Diverged(0));
    }
    let mut trace = vec![loss];
    for epoch in 1..=cfg.epochs {
        let mut halvings = 0usize;
        loop {
            let mut candidate = model.clone();
            for (p, g) in candidate.params.iter_mut().zip(&grad) {
                *p = *p - lr * *g;
            }
            match loss_and_grad(&candidate, dataset, lambda) {
                Ok((cand_loss, cand_grad))
                    if cand_loss.is_finite() && cand_loss.total <= loss.total =>
                {
                    model = candidate;
                    loss = cand_loss;
                    grad = cand_grad;
                    lr = lr * T::of(1.1);
                    trace.push(loss);
                    break;
                }
                Ok(_) => {
                    lr = lr * T::of(0.5);
                    halvings += 1;
                    if halvings >= cfg.max_halvings {
                        // No descent direction at float precision: converged.
                        return Ok((model, trace));
                    }
                }
                Err(PredictorError::NonFiniteParam(_)) => {
                    return Err(PredictorError::Diverged(epoch));
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok((model, trace))
}

/// Evaluation metrics over occupied voxels, in normalized space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Fraction of occupied voxels whose argmax logit equals the true class.
    pub mat_acc: f64,
    pub mse_log_e: f64,
    pub mse_nu: f64,
    pub mse_log_rho: f64,
    /// Mean of the three continuous MSEs.
    pub avg_cont_mse: f64,
}

/// Compares predictions against normalized ground truth on the occupied
/// set.
pub fn evaluate<T: Real>(
    pred: &PredictionGrid<T>,
    target: &NormalizedMaterialGrid<T>,
    mask: &OccupancyMask,
) -> Result<Metrics, PredictorError> {
    check_target_compat(pred.n(), target, mask)?;
    let mut correct = 0usize;
    let mut count = 0usize;
    let mut mse = [0.0f64; 3];
    for v in mask.occupied_indices() {
        let class = target.class[v];
        if class == MaterialClass::Background {
            return Err(PredictorError::BackgroundTarget(v));
        }
        if pred.argmax_class(v) == class {
            correct += 1;
        }
        let cont = pred.continuous(v);
        let gt = target.values[v];
        for c in 0..3 {
            let diff = cont[c].to64() - gt[c].to64();
            mse[c] += diff * diff;
        }
        count += 1;
    }
    let n = count as f64;
    let (mse_log_e, mse_nu, mse_log_rho) = (mse[0] / n, mse[1] / n, mse[2] / n);
    Ok(Metrics {
        mat_acc: correct as f64 / n,
        mse_log_e,
        mse_nu,
        mse_log_rho,
        avg_cont_mse: (mse_log_e + mse_nu + mse_log_rho) / 3.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridDims;

    const LN_8: f64 = 2.0794415416798357;

    /// Small scene: n = 4, d = 5, a handful of occupied voxels with
    /// deterministic features and targets.
    fn toy_scene(seed: u64) -> TrainExample<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 4usize;
        let d = 5usize;
        let dims = GridDims::new(n, d).unwrap();
        let data: Vec<f64> = (0..dims.elements())
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        let features = FeatureGrid::from_data(dims, data).unwrap();
        let mut mask = OccupancyMask::new_empty(n);
        let mut class = vec![MaterialClass::Background; n * n * n];
        let mut values = vec![[0.0f64; 3]; n * n * n];
        for &v in &[0usize, 7, 21, 22, 40, 63] {
            mask.set(v, true);
            class[v] = MaterialClass::from_u8(1 + (v % 7) as u8).unwrap();
            values[v] = [
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            ];
        }
        TrainExample {
            features,
            target: NormalizedMaterialGrid { n, class, values },
            mask,
        }
    }

    #[test]
    fn zero_model_emits_uniform_logits_and_zero_continuous() {
        let example = toy_scene(1);
        let model = PredictorModel::<f64>::zeros(5, 6).unwrap();
        let pred = forward(&model, &example.features, &example.mask).unwrap();
        for v in 0..64 {
            assert_eq!(pred.voxel(v), &[0.0; OUTPUT_CHANNELS]);
        }
        let loss = masked_loss(&pred, &example.target, &example.mask, 1.0).unwrap();
        assert!(
            (loss.ce - LN_8).abs() <= 1e-12,
            "uniform-logit CE = {}, want ln 8",
            loss.ce
        );
    }

    #[test]
    fn loss_decomposition_is_exact() {
        let example = toy_scene(2);
        let model = PredictorModel::<f64>::init(5, 6, 3).unwrap();
        let pred = forward(&model, &example.features, &example.mask).unwrap();
        for lambda in [0.0, 0.5, 1.0, 2.5] {
            let loss = masked_loss(&pred, &example.target, &example.mask, lambda).unwrap();
            assert_eq!(
                loss.total,
                lambda * loss.ce + loss.mse_e + loss.mse_nu + loss.mse_rho
            );
        }
    }

    #[test]
    fn loss_ignores_unoccupied_voxels() {
        let example = toy_scene(3);
        let model = PredictorModel::<f64>::init(5, 6, 4).unwrap();
        let pred = forward(&model, &example.features, &example.mask).unwrap();
        let baseline = masked_loss(&pred, &example.target, &example.mask, 1.0).unwrap();

        // Scribble over every unoccupied voxel in both prediction and
        // target: the loss must not move at all.
        let mut scribbled = pred.clone();
        let mut target = example.target.clone();
        for v in 0..64 {
            if example.mask.is_occupied(v) {
                continue;
            }
            for (c, val) in scribbled.voxel_mut(v).iter_mut().enumerate() {
                *val = (v * 11 + c) as f64 * 100.0;
            }
            target.values[v] = [1e6, -1e6, 42.0];
        }
        let after = masked_loss(&scribbled, &target, &example.mask, 1.0).unwrap();
        assert_eq!(after, baseline);
    }

    #[test]
    fn sparse_forward_matches_dense_rows_in_any_order() {
        let example = toy_scene(4);
        let model = PredictorModel::<f64>::init(5, 6, 5).unwrap();
        let dense = forward(&model, &example.features, &example.mask).unwrap();
        let mut voxels: Vec<usize> = example.mask.occupied_indices().collect();
        voxels.reverse();
        voxels.push(12); // also an unoccupied voxel: pure function of features
        let sparse = forward_at(&model, &example.features, &voxels).unwrap();
        for (row, &v) in voxels.iter().enumerate() {
            if example.mask.is_occupied(v) {
                assert_eq!(&sparse[row][..], dense.voxel(v), "voxel {v}");
            }
        }
    }

    #[test]
    fn output_depends_only_on_the_27_neighborhood() {
        let example = toy_scene(5);
        let model = PredictorModel::<f64>::init(5, 6, 6).unwrap();
        let n = 4usize;
        let dims = GridDims::new(n, 5).unwrap();
        let center = dims.voxel_index(1, 1, 1);
        let baseline = forward_at(&model, &example.features, &[center]).unwrap();

        // A voxel two steps away (Chebyshev) must not influence the output.
        let far = dims.voxel_index(3, 1, 1);
        let mut data = example.features.data().to_vec();
        for c in 0..5 {
            data[far * 5 + c] = 9.0;
        }
        let touched_far = FeatureGrid::from_data(dims, data).unwrap();
        let after_far = forward_at(&model, &touched_far, &[center]).unwrap();
        assert_eq!(after_far[0], baseline[0]);

        // An adjacent voxel must influence it.
        let near = dims.voxel_index(2, 1, 1);
        let mut data = example.features.data().to_vec();
        for c in 0..5 {
            data[near * 5 + c] = 9.0;
        }
        let touched_near = FeatureGrid::from_data(dims, data).unwrap();
        let after_near = forward_at(&model, &touched_near, &[center]).unwrap();
        assert_ne!(after_near[0], baseline[0]);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let dataset = vec![toy_scene(6), toy_scene(7)];
        let model = PredictorModel::<f64>::init(5, 4, 8).unwrap();
        for lambda in [0.0, 1.0] {
            let (_, grad) = loss_and_grad(&model, &dataset, lambda).unwrap();
            let eps = 1e-4;
            // Spot-check a spread of parameters across all six blobs.
            let count = model.params().len();
            for k in 0..24 {
                let idx = k * count / 24;
                let mut plus = model.clone();
                plus.params[idx] += eps;
                let (lp, _) = loss_and_grad(&plus, &dataset, lambda).unwrap();
                let mut minus = model.clone();
                minus.params[idx] -= eps;
                let (lm, _) = loss_and_grad(&minus, &dataset, lambda).unwrap();
                let fd = (lp.total - lm.total) / (2.0 * eps);
                let denom = grad[idx].abs().max(fd.abs()).max(1e-8);
                assert!(
                    (grad[idx] - fd).abs() / denom <= 1e-4,
                    "lambda {lambda}, param {idx}: analytic {} vs fd {fd}",
                    grad[idx]
                );
            }
        }
    }

    #[test]
    fn training_on_onehot_features_reaches_low_ce() {
        // Features are exactly one-hot in the class: linearly separable.
        let n = 4usize;
        let d = CLASS_COUNT;
        let dims = GridDims::new(n, d).unwrap();
        let mut data = vec![0.0f64; dims.elements()];
        let mut mask = OccupancyMask::new_empty(n);
        let mut class = vec![MaterialClass::Background; n * n * n];
        let mut values = vec![[0.0f64; 3]; n * n * n];
        for v in 0..(n * n * n) {
            if v % 3 == 0 {
                continue; // leave a third unoccupied
            }
            let c = 1 + (v % 7);
            mask.set(v, true);
            class[v] = MaterialClass::from_u8(c as u8).unwrap();
            data[v * d + c] = 1.0;
            values[v] = [0.25, -0.5, 0.125];
        }
        let example = TrainExample {
            features: FeatureGrid::from_data(dims, data).unwrap(),
            target: NormalizedMaterialGrid { n, class, values },
            mask,
        };
        let cfg = TrainConfig {
            epochs: 200,
            hidden: 8,
            learning_rate: 0.5,
            seed: 42,
            ..Default::default()
        };
        let model = PredictorModel::init(d, cfg.hidden, cfg.seed).unwrap();
        let (trained, trace) = train(model, std::slice::from_ref(&example), &cfg).unwrap();
        for pair in trace.windows(2) {
            assert!(
                pair[1].total <= pair[0].total,
                "trace must be monotone non-increasing"
            );
        }
        let final_loss = trace.last().unwrap();
        assert!(final_loss.ce <= 0.05, "final CE = {}", final_loss.ce);

        // The trained model classifies the toy scene near-perfectly.
        let pred = forward(&trained, &example.features, &example.mask).unwrap();
        let metrics = evaluate(&pred, &example.target, &example.mask).unwrap();
        assert!(metrics.mat_acc >= 0.95, "mat_acc = {}", metrics.mat_acc);
    }

    #[test]
    fn init_is_deterministic_in_the_seed() {
        let a = PredictorModel::<f64>::init(5, 6, 10).unwrap();
        let b = PredictorModel::<f64>::init(5, 6, 10).unwrap();
        let c = PredictorModel::<f64>::init(5, 6, 11).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        // Biases start at zero.
        let views = a.views();
        assert!(views.bp.iter().all(|v| *v == 0.0));
        assert!(views.b1.iter().all(|v| *v == 0.0));
        assert!(views.b2.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn evaluate_counts_and_averages_correctly() {
        let n = 2usize;
        let mut mask = OccupancyMask::new_empty(n);
        let mut class = vec![MaterialClass::Background; 8];
        let mut values = vec![[0.0f64; 3]; 8];
        let mut pred = PredictionGrid::<f64>::zeros(n);
        for v in 0..4 {
            mask.set(v, true);
            class[v] = MaterialClass::Elastic;
            values[v] = [1.0, 1.0, 1.0];
            let row = pred.voxel_mut(v);
            // Correct class for all but voxel 3.
            let winner = if v == 3 { 2 } else { 1 };
            row[winner] = 5.0;
        }
        let target = NormalizedMaterialGrid { n, class, values };
        let metrics = evaluate(&pred, &target, &mask).unwrap();
        assert_eq!(metrics.mat_acc, 0.75);
        // Constant-zero continuous prediction vs +1 targets: MSE 1 each.
        assert_eq!(metrics.mse_log_e, 1.0);
        assert_eq!(metrics.mse_nu, 1.0);
        assert_eq!(metrics.mse_log_rho, 1.0);
        assert_eq!(metrics.avg_cont_mse, 1.0);

        // pred == gt on the continuous channels and argmax: perfect score.
        let mut perfect = PredictionGrid::<f64>::zeros(n);
        for v in 0..4 {
            let row = perfect.voxel_mut(v);
            row[1] = 3.0;
            row[CLASS_COUNT] = 1.0;
            row[CLASS_COUNT + 1] = 1.0;
            row[CLASS_COUNT + 2] = 1.0;
        }
        let metrics = evaluate(&perfect, &target, &mask).unwrap();
        assert_eq!(metrics.mat_acc, 1.0);
        assert_eq!(metrics.avg_cont_mse, 0.0);
    }

    #[test]
    fn argmax_ties_go_to_the_lowest_class() {
        let mut pred = PredictionGrid::<f64>::zeros(1);
        let row = pred.voxel_mut(0);
        row[2] = 7.0;
        row[5] = 7.0;
        assert_eq!(pred.argmax_class(0), MaterialClass::Rigid);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let example = toy_scene(12);
        let model = PredictorModel::<f64>::zeros(9, 4).unwrap();
        assert!(matches!(
            forward(&model, &example.features, &example.mask),
            Err(PredictorError::FeatureDimMismatch { expected: 9, found: 5 })
        ));
        let model = PredictorModel::<f64>::zeros(5, 4).unwrap();
        let wrong_mask = OccupancyMask::new_empty(5);
        assert!(matches!(
            forward(&model, &example.features, &wrong_mask),
            Err(PredictorError::GridMismatch(4, 5))
        ));
        let empty_mask = OccupancyMask::new_empty(4);
        let pred = forward(&model, &example.features, &empty_mask).unwrap();
        assert!(matches!(
            masked_loss(&pred, &example.target, &empty_mask, 1.0),
            Err(PredictorError::EmptyMask)
        ));
    }

    #[test]
    fn param_count_and_blob_layout_are_consistent() {
        let (d, h) = (5usize, 6usize);
        assert_eq!(
            PredictorModel::<f64>::expected_param_count(d, h),
            h * d + h + 2 * h * h + h + 11 * h + 11
        );
        let model = PredictorModel::<f64>::zeros(d, h).unwrap();
        let views = model.views();
        assert_eq!(views.wp.len(), h * d);
        assert_eq!(views.bp.len(), h);
        assert_eq!(views.w1.len(), 2 * h * h);
        assert_eq!(views.b1.len(), h);
        assert_eq!(views.w2.len(), 11 * h);
        assert_eq!(views.b2.len(), 11);
        assert!(PredictorModel::<f64>::from_params(d, h, vec![0.0; 3]).is_err());
        assert!(PredictorModel::<f64>::from_params(d, h, vec![f64::NAN; model.params().len()])
            .is_err());
    }
}
