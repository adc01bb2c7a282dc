//! Dense small-matrix numerics shared by every other module: pairwise
//! distances, generalized-mean pooling, softmax, and the batch-norm neck.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::real::Real;

/// Activations are clamped to this floor before the GeM power so fractional
/// powers never see a negative base.
pub const GEM_CLAMP_MIN: f64 = 1e-6;

/// Default GeM exponent; exposed in config.
pub const GEM_DEFAULT_P: f64 = 3.0;

/// Variance floor inside the batch-norm neck.
pub const BN_EPS: f64 = 1e-5;

/// Running-state update rate of the batch-norm neck.
pub const BN_MOMENTUM: f64 = 0.1;

/// Nonnegative matrix of pairwise ground costs, in Euclidean-distance units.
///
/// `normalizer` records the scale divided out when [`CostMatrix::normalized`]
/// was applied; it is 1 for raw matrices.
#[derive(Debug, Clone)]
pub struct CostMatrix<T> {
    pub values: Array2<T>,
    pub normalizer: T,
}

impl<T: Real> CostMatrix<T> {
    pub fn new(values: Array2<T>) -> Result<Self> {
        for &v in values.iter() {
            if !v.is_finite() || v < T::zero() {
                return Err(Error::InvalidArgument(
                    "cost matrix entries must be finite and nonnegative".into(),
                ));
            }
        }
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidArgument("cost matrix must be nonempty".into()));
        }
        Ok(CostMatrix { values, normalizer: T::one() })
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn max_entry(&self) -> T {
        self.values.iter().fold(T::zero(), |m, &v| m.max(v))
    }

    /// Divide all entries by the max entry, recording it as `normalizer`.
    /// A zero matrix is returned unchanged.
    pub fn normalized(&self) -> CostMatrix<T> {
        let m = self.max_entry();
        if m <= T::zero() {
            return self.clone();
        }
        CostMatrix { values: &self.values / m, normalizer: self.normalizer * m }
    }
}

/// ℓ2 distances between the rows of `a` (N×D) and the rows of `b` (M×D).
///
/// Squared-distance intermediates are floored at 0 before the square root to
/// absorb rounding, so the diagonal is exactly zero when `a == b`.
pub fn pairwise_euclidean<T: Real>(a: &Array2<T>, b: &Array2<T>) -> Result<CostMatrix<T>> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "pairwise_euclidean: a has {} columns, b has {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() == 0 || b.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::InvalidArgument("pairwise_euclidean: empty operand".into()));
    }
    for &v in a.iter().chain(b.iter()) {
        if !v.is_finite() {
            return Err(Error::NonFinite("pairwise_euclidean input".into()));
        }
    }
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.rows().into_iter().enumerate() {
        for (j, rb) in b.rows().into_iter().enumerate() {
            let mut sq = T::zero();
            for (&x, &y) in ra.iter().zip(rb.iter()) {
                let d = x - y;
                sq += d * d;
            }
            out[[i, j]] = sq.max(T::zero()).sqrt();
        }
    }
    CostMatrix::new(out)
}

/// H×W×C activation tensor, the toy stand-in for a residual feature map.
/// Layout is row-major over (y, x, channel).
#[derive(Debug, Clone)]
pub struct SpatialFeature<T> {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<T>,
}

impl<T: Real> SpatialFeature<T> {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 || data.len() != h * w * c {
            return Err(Error::InvalidArgument(format!(
                "spatial feature: {}x{}x{} does not match {} values",
                h,
                w,
                c,
                data.len()
            )));
        }
        Ok(SpatialFeature { h, w, c, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> T {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

/// Generalized-mean pooling over the rows `rows.0..rows.1` of a spatial map:
/// `out[c] = (mean over cells of x[.,.,c]^p)^(1/p)`.
///
/// Cells are clamped to [`GEM_CLAMP_MIN`] first. Requires `p >= 1`.
pub fn gem_pool<T: Real>(x: &SpatialFeature<T>, rows: (usize, usize), p: T) -> Result<Array1<T>> {
    let (r0, r1) = rows;
    if r0 >= r1 || r1 > x.h {
        return Err(Error::InvalidArgument(format!(
            "gem_pool: empty or out-of-range row band {}..{} of {}",
            r0, r1, x.h
        )));
    }
    if p < T::one() {
        return Err(Error::InvalidArgument("gem_pool: p must be >= 1".into()));
    }
    let clamp = T::c(GEM_CLAMP_MIN);
    let cells = T::from_usize_((r1 - r0) * x.w);
    let mut out = Array1::zeros(x.c);
    for ch in 0..x.c {
        let mut acc = T::zero();
        for y in r0..r1 {
            for col in 0..x.w {
                acc += x.get(y, col, ch).max(clamp).powf(p);
            }
        }
        out[ch] = (acc / cells).powf(T::one() / p);
    }
    Ok(out)
}

/// Gradient of [`gem_pool`] with respect to the cells of the pooled band.
///
/// `pooled` is the forward output for the same band; `grad_out` is the
/// upstream gradient per channel. Cells at or below the clamp floor get zero
/// gradient. Returns a dense H×W×C gradient map (zero outside the band).
pub fn gem_pool_backward<T: Real>(
    x: &SpatialFeature<T>,
    rows: (usize, usize),
    p: T,
    pooled: &ArrayView1<T>,
    grad_out: &ArrayView1<T>,
) -> Vec<T> {
    let (r0, r1) = rows;
    let clamp = T::c(GEM_CLAMP_MIN);
    let cells = T::from_usize_((r1 - r0) * x.w);
    let mut grad = vec![T::zero(); x.h * x.w * x.c];
    for ch in 0..x.c {
        // d out / d cell = cell^(p-1) * out^(1-p) / n_cells  (for cells above the clamp)
        let scale = pooled[ch].powf(T::one() - p) / cells * grad_out[ch];
        for y in r0..r1 {
            for col in 0..x.w {
                let v = x.get(y, col, ch);
                if v > clamp {
                    grad[(y * x.w + col) * x.c + ch] = v.powf(p - T::one()) * scale;
                }
            }
        }
    }
    grad
}

/// Max-shifted softmax; output is positive and sums to 1.
pub fn softmax<T: Real>(v: &ArrayView1<T>) -> Array1<T> {
    let m = v.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut out: Array1<T> = v.mapv(|x| (x - m).exp());
    let s = out.sum();
    out.mapv_inplace(|x| x / s);
    out
}

/// Backward through softmax: given `w = softmax(logits)` and upstream
/// `grad_w`, returns the gradient on the logits.
pub fn softmax_backward<T: Real>(w: &ArrayView1<T>, grad_w: &ArrayView1<T>) -> Array1<T> {
    let dot: T = w.iter().zip(grad_w.iter()).map(|(&a, &b)| a * b).sum();
    Array1::from_iter(w.iter().zip(grad_w.iter()).map(|(&a, &b)| a * (b - dot)))
}

/// Per-dimension running statistics of a batch-norm neck.
#[derive(Debug, Clone)]
pub struct BnState<T> {
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
}

impl<T: Real> BnState<T> {
    pub fn new(dim: usize) -> Self {
        BnState { running_mean: Array1::zeros(dim), running_var: Array1::ones(dim) }
    }
}

/// How [`bnneck`] computes and propagates statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running state updated with momentum.
    Train,
    /// Batch statistics without touching the running state (used by
    /// finite-difference probes and pre-training metric rows).
    TrainFrozen,
    /// Running statistics; nothing mutated.
    Eval,
}

/// Cache from a stats-mode forward pass, consumed by [`bnneck_backward`].
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub x_hat: Array2<T>,
    pub inv_std: Array1<T>,
}

/// Batch-norm neck: per-dimension standardization with a learned
/// multiplicative scale and no additive shift.
///
/// Returns the normalized batch and, in the two batch-statistics modes, the
/// cache needed for the backward pass.
pub fn bnneck<T: Real>(
    x: &Array2<T>,
    scale: &ArrayView1<T>,
    state: &mut BnState<T>,
    mode: BnMode,
) -> Result<(Array2<T>, Option<BnCache<T>>)> {
    let n = x.nrows();
    let d = x.ncols();
    if n == 0 {
        return Err(Error::InvalidArgument("bnneck: zero batch size".into()));
    }
    if d != scale.len() || d != state.running_mean.len() {
        return Err(Error::DimensionMismatch(format!(
            "bnneck: feature dim {} vs scale {} vs state {}",
            d,
            scale.len(),
            state.running_mean.len()
        )));
    }
    let eps = T::c(BN_EPS);
    match mode {
        BnMode::Eval => {
            let mut out = Array2::zeros((n, d));
            for j in 0..d {
                let inv = (state.running_var[j] + eps).sqrt().recip();
                for i in 0..n {
                    out[[i, j]] = (x[[i, j]] - state.running_mean[j]) * inv * scale[j];
                }
            }
            Ok((out, None))
        }
        BnMode::Train | BnMode::TrainFrozen => {
            let nt = T::from_usize_(n);
            let mut out = Array2::zeros((n, d));
            let mut x_hat = Array2::zeros((n, d));
            let mut inv_std = Array1::zeros(d);
            for j in 0..d {
                let mut mean = T::zero();
                for i in 0..n {
                    mean += x[[i, j]];
                }
                mean /= nt;
                let mut var = T::zero();
                for i in 0..n {
                    let dlt = x[[i, j]] - mean;
                    var += dlt * dlt;
                }
                var /= nt;
                let inv = (var + eps).sqrt().recip();
                inv_std[j] = inv;
                for i in 0..n {
                    let h = (x[[i, j]] - mean) * inv;
                    x_hat[[i, j]] = h;
                    out[[i, j]] = h * scale[j];
                }
                if mode == BnMode::Train {
                    let mom = T::c(BN_MOMENTUM);
                    state.running_mean[j] = (T::one() - mom) * state.running_mean[j] + mom * mean;
                    state.running_var[j] = (T::one() - mom) * state.running_var[j] + mom * var;
                }
            }
            Ok((out, Some(BnCache { x_hat, inv_std })))
        }
    }
}

/// Backward through a batch-statistics bnneck pass.
///
/// Returns (gradient on the input batch, gradient on the scale).
pub fn bnneck_backward<T: Real>(
    grad_out: &Array2<T>,
    cache: &BnCache<T>,
    scale: &ArrayView1<T>,
) -> (Array2<T>, Array1<T>) {
    let n = grad_out.nrows();
    let d = grad_out.ncols();
    let nt = T::from_usize_(n);
    let mut grad_x = Array2::zeros((n, d));
    let mut grad_scale = Array1::zeros(d);
    for j in 0..d {
        let mut sum_dh = T::zero();
        let mut sum_dh_h = T::zero();
        for i in 0..n {
            let dh = grad_out[[i, j]] * scale[j];
            sum_dh += dh;
            sum_dh_h += dh * cache.x_hat[[i, j]];
            grad_scale[j] += grad_out[[i, j]] * cache.x_hat[[i, j]];
        }
        let mean_dh = sum_dh / nt;
        let mean_dh_h = sum_dh_h / nt;
        for i in 0..n {
            let dh = grad_out[[i, j]] * scale[j];
            grad_x[[i, j]] = cache.inv_std[j] * (dh - mean_dh - cache.x_hat[[i, j]] * mean_dh_h);
        }
    }
    (grad_x, grad_scale)
}
