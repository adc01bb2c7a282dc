//! Multi-granularity feature structure: global, vertical-part, and
//! accumulated-part features with per-granularity losses, the
//! softmax-weighted holistic feature, and the test-time fusion.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::batch::{LabeledBatch, Modality};
use crate::error::{Error, Result};
use crate::losses::{
    batch_hard_triplet_loss, center_loss, cm_dl_loss, cm_emd_loss, identity_loss,
    kl_alignment_baseline, CmEmdOptions,
};
use crate::math::{
    bnneck, bnneck_backward, gem_pool, gem_pool_backward, softmax, softmax_backward, BnCache,
    BnMode, BnState, SpatialFeature,
};
use crate::real::Real;

/// Structural knobs: part count, accumulated-term weight, the five loss
/// weights, and the test-time fusion weight.
#[derive(Debug, Clone)]
pub struct MgsConfig<T> {
    pub parts: usize,
    pub alpha: T,
    pub gamma: [T; 5],
    pub beta: T,
    pub gem_p: T,
}

impl<T: Real> Default for MgsConfig<T> {
    fn default() -> Self {
        MgsConfig {
            parts: 6,
            alpha: T::c(0.2),
            gamma: [T::one(), T::one(), T::c(0.1), T::c(2.0), T::c(0.1)],
            beta: T::c(0.7),
            gem_p: T::c(crate::math::GEM_DEFAULT_P),
        }
    }
}

impl<T: Real> MgsConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.parts < 2 {
            return Err(Error::InvalidArgument("mgs parts must be >= 2".into()));
        }
        if self.alpha < T::zero() {
            return Err(Error::InvalidArgument("mgs alpha must be >= 0".into()));
        }
        if self.gamma.iter().any(|g| *g < T::zero() || !g.is_finite()) {
            return Err(Error::InvalidArgument("mgs gamma weights must be >= 0".into()));
        }
        if self.beta < T::zero() || self.beta > T::one() {
            return Err(Error::InvalidArgument("mgs beta must lie in [0,1]".into()));
        }
        if self.gem_p < T::one() {
            return Err(Error::InvalidArgument("gem exponent must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-batch feature set at every granularity.
#[derive(Debug, Clone)]
pub struct MgsFeatures<T> {
    pub global: Array2<T>,
    pub locals: Vec<Array2<T>>,
    /// Concatenations of the first 2..=K locals (K-1 matrices).
    pub accumulated: Vec<Array2<T>>,
    /// Concatenation of the softmax-weighted locals.
    pub holistic: Array2<T>,
    /// The softmax part weights used for the holistic feature.
    pub part_weights: Array1<T>,
}

impl<T: Real> MgsFeatures<T> {
    /// Build accumulated and holistic features from per-part locals.
    /// With `trainable_weights` off the holistic uses fixed 1/K weights.
    pub fn assemble(
        global: Array2<T>,
        locals: Vec<Array2<T>>,
        part_logits: &ArrayView1<T>,
        trainable_weights: bool,
    ) -> Result<Self> {
        if locals.len() < 2 {
            return Err(Error::InvalidArgument("mgs needs at least two parts".into()));
        }
        if part_logits.len() != locals.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} part logits for {} parts",
                part_logits.len(),
                locals.len()
            )));
        }
        let rows = locals[0].nrows();
        if locals.iter().any(|l| l.nrows() != rows) || global.nrows() != rows {
            return Err(Error::DimensionMismatch("row counts differ across granularities".into()));
        }
        let accumulated: Vec<Array2<T>> =
            (2..=locals.len()).map(|k| concat_rows(&locals[..k])).collect();
        let weights = if trainable_weights {
            softmax(part_logits)
        } else {
            Array1::from_elem(locals.len(), T::one() / T::from_usize_(locals.len()))
        };
        let holistic = weighted_concat(&locals, &weights);
        Ok(MgsFeatures { global, locals, accumulated, holistic, part_weights: weights })
    }
}

fn concat_rows<T: Real>(parts: &[Array2<T>]) -> Array2<T> {
    let rows = parts[0].nrows();
    let dim: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = Array2::zeros((rows, dim));
    let mut off = 0;
    for p in parts {
        out.slice_mut(s![.., off..off + p.ncols()]).assign(p);
        off += p.ncols();
    }
    out
}

fn weighted_concat<T: Real>(parts: &[Array2<T>], weights: &Array1<T>) -> Array2<T> {
    let rows = parts[0].nrows();
    let dim: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = Array2::zeros((rows, dim));
    let mut off = 0;
    for (k, p) in parts.iter().enumerate() {
        out.slice_mut(s![.., off..off + p.ncols()]).assign(&(p * weights[k]));
        off += p.ncols();
    }
    out
}

/// Weighted concatenation of part features (the holistic feature) and the
/// softmax weights it used.
pub fn holistic_feature<T: Real>(
    locals: &[Array2<T>],
    part_logits: &ArrayView1<T>,
) -> Result<(Array2<T>, Array1<T>)> {
    if locals.is_empty() || part_logits.len() != locals.len() {
        return Err(Error::DimensionMismatch("holistic: logits do not match parts".into()));
    }
    let rows = locals[0].nrows();
    if locals.iter().any(|l| l.nrows() != rows) {
        return Err(Error::DimensionMismatch("holistic: row counts differ".into()));
    }
    let w = softmax(part_logits);
    Ok((weighted_concat(locals, &w), w))
}

/// Backward through the holistic concatenation: splits the upstream gradient
/// into per-part feature gradients and a gradient on the part logits.
pub fn holistic_backward<T: Real>(
    grad_holistic: &Array2<T>,
    locals: &[Array2<T>],
    weights: &Array1<T>,
    trainable_weights: bool,
) -> (Vec<Array2<T>>, Array1<T>) {
    let mut grad_locals = Vec::with_capacity(locals.len());
    let mut grad_w = Array1::zeros(locals.len());
    let mut off = 0;
    for (k, p) in locals.iter().enumerate() {
        let block = grad_holistic.slice(s![.., off..off + p.ncols()]);
        grad_locals.push(&block * weights[k]);
        grad_w[k] = block.iter().zip(p.iter()).map(|(&g, &f)| g * f).sum();
        off += p.ncols();
    }
    let grad_logits = if trainable_weights {
        softmax_backward(&weights.view(), &grad_w.view())
    } else {
        Array1::zeros(locals.len())
    };
    (grad_locals, grad_logits)
}

/// Test-time fusion: `[beta * concat(locals) | (1-beta) * global]`.
pub fn inference_feature<T: Real>(
    locals: &[Array2<T>],
    global: &Array2<T>,
    beta: T,
) -> Result<Array2<T>> {
    if locals.is_empty() {
        return Err(Error::InvalidArgument("inference_feature: no local parts".into()));
    }
    let rows = global.nrows();
    if locals.iter().any(|l| l.nrows() != rows) {
        return Err(Error::DimensionMismatch("inference_feature: row counts differ".into()));
    }
    let local_cat = concat_rows(locals);
    let mut out = Array2::zeros((rows, local_cat.ncols() + global.ncols()));
    out.slice_mut(s![.., ..local_cat.ncols()]).assign(&(&local_cat * beta));
    out.slice_mut(s![.., local_cat.ncols()..]).assign(&(global * (T::one() - beta)));
    Ok(out)
}

/// Per-granularity batch-norm states: one for the global stream, one per
/// part of the local stream, never shared.
#[derive(Debug, Clone)]
pub struct MgsNormState<T> {
    pub global: BnState<T>,
    pub locals: Vec<BnState<T>>,
}

impl<T: Real> MgsNormState<T> {
    pub fn new(channels: usize, parts: usize) -> Self {
        MgsNormState {
            global: BnState::new(channels),
            locals: (0..parts).map(|_| BnState::new(channels)).collect(),
        }
    }
}

/// Intermediates needed to push gradients back through pooling and
/// normalization.
#[derive(Debug, Clone)]
pub struct MgsExtractCache<T> {
    pub global_pooled: Array2<T>,
    pub local_pooled: Vec<Array2<T>>,
    pub global_bn: BnCache<T>,
    pub local_bn: Vec<BnCache<T>>,
}

/// Pool and normalize spatial maps into per-granularity features: GeM over
/// the full global map, GeM over each of `parts` vertical bands of the local
/// map, batch-norm neck on each, then accumulated and holistic assembly.
#[allow(clippy::too_many_arguments)]
pub fn extract_mgs<T: Real>(
    global_maps: &[SpatialFeature<T>],
    local_maps: &[SpatialFeature<T>],
    parts: usize,
    gem_p: T,
    global_scale: &ArrayView1<T>,
    local_scales: &[ArrayView1<T>],
    norm: &mut MgsNormState<T>,
    mode: BnMode,
    part_logits: &ArrayView1<T>,
    trainable_weights: bool,
) -> Result<(MgsFeatures<T>, Option<MgsExtractCache<T>>)> {
    let n = global_maps.len();
    if n == 0 || local_maps.len() != n {
        return Err(Error::InvalidArgument("extract_mgs: empty or mismatched map batch".into()));
    }
    let h = local_maps[0].h();
    if !h.is_multiple_of(parts) {
        return Err(Error::InvalidArgument(format!(
            "extract_mgs: map height {} not divisible by {} parts",
            h, parts
        )));
    }
    if local_scales.len() != parts || norm.locals.len() != parts {
        return Err(Error::DimensionMismatch("extract_mgs: per-part state counts".into()));
    }
    let c = global_maps[0].channels();
    let band = h / parts;

    let mut global_pooled = Array2::zeros((n, c));
    for (i, map) in global_maps.iter().enumerate() {
        let v = gem_pool(map, (0, map.h()), gem_p)?;
        global_pooled.row_mut(i).assign(&v);
    }
    let (global_feat, global_bn) = bnneck(&global_pooled, global_scale, &mut norm.global, mode)?;

    let mut local_pooled = Vec::with_capacity(parts);
    let mut locals = Vec::with_capacity(parts);
    let mut local_bn = Vec::with_capacity(parts);
    for k in 0..parts {
        let rows = (k * band, (k + 1) * band);
        let mut pooled = Array2::zeros((n, c));
        for (i, map) in local_maps.iter().enumerate() {
            let v = gem_pool(map, rows, gem_p)?;
            pooled.row_mut(i).assign(&v);
        }
        let (feat, bn) = bnneck(&pooled, &local_scales[k], &mut norm.locals[k], mode)?;
        local_pooled.push(pooled);
        locals.push(feat);
        local_bn.push(bn);
    }

    let features = MgsFeatures::assemble(global_feat, locals, part_logits, trainable_weights)?;
    let cache = match mode {
        BnMode::Eval => None,
        _ => Some(MgsExtractCache {
            global_pooled,
            local_pooled,
            global_bn: global_bn.expect("stats mode caches"),
            local_bn: local_bn.into_iter().map(|b| b.expect("stats mode caches")).collect(),
        }),
    };
    Ok((features, cache))
}

/// Gradients produced by [`extract_mgs_backward`].
#[derive(Debug)]
pub struct MgsExtractGrads<T> {
    /// N x (H*W*C) upstream gradients for the two encoder streams.
    pub global_maps: Array2<T>,
    pub local_maps: Array2<T>,
    pub global_scale: Array1<T>,
    pub local_scales: Vec<Array1<T>>,
}

/// Push per-granularity feature gradients back through normalization and
/// pooling to the spatial maps and the norm scales.
#[allow(clippy::too_many_arguments)]
pub fn extract_mgs_backward<T: Real>(
    global_maps: &[SpatialFeature<T>],
    local_maps: &[SpatialFeature<T>],
    parts: usize,
    gem_p: T,
    global_scale: &ArrayView1<T>,
    local_scales: &[ArrayView1<T>],
    cache: &MgsExtractCache<T>,
    grad_global: &Array2<T>,
    grad_locals: &[Array2<T>],
) -> Result<MgsExtractGrads<T>> {
    let n = global_maps.len();
    let c = global_maps[0].channels();
    let cells_g = global_maps[0].h() * global_maps[0].w() * c;
    let cells_l = local_maps[0].h() * local_maps[0].w() * local_maps[0].channels();
    let band = local_maps[0].h() / parts;

    let (grad_gp, grad_gs) = bnneck_backward(grad_global, &cache.global_bn, global_scale);
    let mut gmap = Array2::zeros((n, cells_g));
    for (i, map) in global_maps.iter().enumerate() {
        let pooled = cache.global_pooled.row(i);
        let g = gem_pool_backward(map, (0, map.h()), gem_p, &pooled, &grad_gp.row(i));
        for (j, v) in g.into_iter().enumerate() {
            gmap[[i, j]] = v;
        }
    }

    let mut lmap = Array2::zeros((n, cells_l));
    let mut scale_grads = Vec::with_capacity(parts);
    for k in 0..parts {
        let (grad_lp, grad_ls) =
            bnneck_backward(&grad_locals[k], &cache.local_bn[k], &local_scales[k]);
        scale_grads.push(grad_ls);
        let rows = (k * band, (k + 1) * band);
        for (i, map) in local_maps.iter().enumerate() {
            let pooled = cache.local_pooled[k].row(i);
            let g = gem_pool_backward(map, rows, gem_p, &pooled, &grad_lp.row(i));
            for (j, v) in g.into_iter().enumerate() {
                lmap[[i, j]] += v;
            }
        }
    }
    Ok(MgsExtractGrads {
        global_maps: gmap,
        local_maps: lmap,
        global_scale: grad_gs,
        local_scales: scale_grads,
    })
}

/// Which alignment loss fills the gamma-3/gamma-5 slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentKind {
    CmEmd,
    /// Table-style ablation: Gaussian KL in place of the transport loss.
    Kl,
    None,
}

/// Which discrimination loss fills the gamma-1 slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscriminationKind {
    CmDl,
    Center,
    Triplet,
    None,
}

#[derive(Debug, Clone)]
pub struct MgsLossOptions<T> {
    pub gamma: [T; 5],
    pub alpha: T,
    pub alignment: AlignmentKind,
    pub discrimination: DiscriminationKind,
    pub emd: CmEmdOptions<T>,
    pub triplet_margin: T,
    pub trainable_part_weights: bool,
}

impl<T: Real> Default for MgsLossOptions<T> {
    fn default() -> Self {
        let cfg = MgsConfig::<T>::default();
        MgsLossOptions {
            gamma: cfg.gamma,
            alpha: cfg.alpha,
            alignment: AlignmentKind::CmEmd,
            discrimination: DiscriminationKind::CmDl,
            emd: CmEmdOptions::default(),
            triplet_margin: T::c(0.3),
            trainable_part_weights: true,
        }
    }
}

/// Affine classifier head parameters, viewed from wherever they live.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams<'a, T> {
    pub weight: ArrayView2<'a, T>,
    pub bias: ArrayView1<'a, T>,
}

#[derive(Debug, Clone)]
pub struct HeadGrad<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

/// The 2K+1 classification heads: one global, K local, K-1 accumulated.
#[derive(Debug, Clone)]
pub struct MgsHeads<'a, T> {
    pub global: HeadParams<'a, T>,
    pub locals: Vec<HeadParams<'a, T>>,
    pub accumulated: Vec<HeadParams<'a, T>>,
}

/// Raw (unweighted) values of the five objective terms.
#[derive(Debug, Clone, Copy)]
pub struct MgsLossTerms<T> {
    pub discrimination: T,
    pub id_local: T,
    pub alignment_local: T,
    pub id_global: T,
    pub alignment_global: T,
}

impl<T: Real> Default for MgsLossTerms<T> {
    fn default() -> Self {
        MgsLossTerms {
            discrimination: T::zero(),
            id_local: T::zero(),
            alignment_local: T::zero(),
            id_global: T::zero(),
            alignment_global: T::zero(),
        }
    }
}

#[derive(Debug)]
pub struct MgsLossOutput<T> {
    pub objective: T,
    pub terms: MgsLossTerms<T>,
    pub grad_global: Array2<T>,
    pub grad_locals: Vec<Array2<T>>,
    pub grad_part_logits: Array1<T>,
    pub grad_global_head: HeadGrad<T>,
    pub grad_local_heads: Vec<HeadGrad<T>>,
    pub grad_accumulated_heads: Vec<HeadGrad<T>>,
    /// False if any transport solve stopped on its iteration budget.
    pub plans_converged: bool,
}

fn head_forward<T: Real>(features: &Array2<T>, head: &HeadParams<'_, T>) -> Result<Array2<T>> {
    if features.ncols() != head.weight.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "head expects {} inputs, features have {}",
            head.weight.nrows(),
            features.ncols()
        )));
    }
    let mut logits = features.dot(&head.weight);
    for mut row in logits.rows_mut() {
        row += &head.bias;
    }
    Ok(logits)
}

fn head_backward<T: Real>(
    features: &Array2<T>,
    head: &HeadParams<'_, T>,
    grad_logits: &Array2<T>,
    scale: T,
) -> (Array2<T>, HeadGrad<T>) {
    let grad_features = grad_logits.dot(&head.weight.t()) * scale;
    let grad_weight = features.t().dot(grad_logits) * scale;
    let mut grad_bias = Array1::zeros(grad_logits.ncols());
    for row in grad_logits.rows() {
        grad_bias += &row;
    }
    (grad_features, HeadGrad { weight: grad_weight, bias: grad_bias * scale })
}

fn zero_head_grad<T: Real>(head: &HeadParams<'_, T>) -> HeadGrad<T> {
    HeadGrad {
        weight: Array2::zeros(head.weight.dim()),
        bias: Array1::zeros(head.bias.len()),
    }
}

/// Assemble the five-term objective over the multi-granularity features and
/// return its gradients on every feature matrix, the part logits, and the
/// classifier heads.
///
/// `objective = g1*L_disc(holistic) + g2*L_id(locals) + g3*L_align(locals)
///            + g4*L_id(global) + g5*L_align(global)`, where the local terms
/// sum over the K parts plus `alpha` times the accumulated features.
/// Terms with zero weight are skipped and reported as zero.
pub fn mgs_losses<T: Real>(
    features: &MgsFeatures<T>,
    labels: &[usize],
    modalities: &[Modality],
    heads: &MgsHeads<'_, T>,
    opts: &MgsLossOptions<T>,
    centers: Option<&Array2<T>>,
) -> Result<MgsLossOutput<T>> {
    let parts = features.locals.len();
    let n = features.global.nrows();
    if labels.len() != n || modalities.len() != n {
        return Err(Error::DimensionMismatch("mgs_losses: labels/modalities vs rows".into()));
    }
    if heads.locals.len() != parts || heads.accumulated.len() != parts - 1 {
        return Err(Error::DimensionMismatch(format!(
            "mgs_losses: expected {} local and {} accumulated heads",
            parts,
            parts - 1
        )));
    }
    let [g1, g2, g3, g4, g5] = opts.gamma;
    let vis: Vec<usize> =
        (0..n).filter(|&i| modalities[i] == Modality::Visible).collect();
    let thm: Vec<usize> =
        (0..n).filter(|&i| modalities[i] == Modality::Thermal).collect();

    let mut terms = MgsLossTerms::<T>::default();
    let mut grad_global = Array2::zeros(features.global.dim());
    let mut grad_locals: Vec<Array2<T>> =
        features.locals.iter().map(|l| Array2::zeros(l.dim())).collect();
    let mut grad_holistic = Array2::zeros(features.holistic.dim());
    let mut grad_global_head = zero_head_grad(&heads.global);
    let mut grad_local_heads: Vec<HeadGrad<T>> =
        heads.locals.iter().map(zero_head_grad).collect();
    let mut grad_accumulated_heads: Vec<HeadGrad<T>> =
        heads.accumulated.iter().map(zero_head_grad).collect();
    let mut plans_converged = true;

    // Splits a per-modality gradient pair back onto batch rows.
    let scatter = |target: &mut Array2<T>, rows: &[usize], grads: &Array2<T>, scale: T| {
        for (r, &i) in rows.iter().enumerate() {
            for d in 0..grads.ncols() {
                target[[i, d]] += grads[[r, d]] * scale;
            }
        }
    };

    let align =
        |feat: &Array2<T>, grad: &mut Array2<T>, scale: T, converged: &mut bool| -> Result<T> {
            if vis.is_empty() || thm.is_empty() {
                return Err(Error::InvalidArgument("alignment loss: a modality is empty".into()));
            }
            let take = |rows: &[usize]| -> Array2<T> {
                let mut m = Array2::zeros((rows.len(), feat.ncols()));
                for (r, &i) in rows.iter().enumerate() {
                    m.row_mut(r).assign(&feat.row(i));
                }
                m
            };
            let fv = take(&vis);
            let ft = take(&thm);
            match opts.alignment {
                AlignmentKind::CmEmd => {
                    let out = cm_emd_loss(&fv, &ft, &opts.emd)?;
                    *converged &= out.plan_converged;
                    scatter(grad, &vis, &out.grad_visible, scale);
                    scatter(grad, &thm, &out.grad_thermal, scale);
                    Ok(out.value)
                }
                AlignmentKind::Kl => {
                    let out = kl_alignment_baseline(&fv, &ft)?;
                    scatter(grad, &vis, &out.grad_visible, scale);
                    scatter(grad, &thm, &out.grad_thermal, scale);
                    Ok(out.value)
                }
                AlignmentKind::None => Ok(T::zero()),
            }
        };

    // Global stream: identity head and alignment.
    if g4 > T::zero() {
        let logits = head_forward(&features.global, &heads.global)?;
        let id = identity_loss(&logits, labels)?;
        terms.id_global = id.value;
        let (df, hg) = head_backward(&features.global, &heads.global, &id.grad_logits, g4);
        grad_global += &df;
        grad_global_head = hg;
    }
    if g5 > T::zero() && opts.alignment != AlignmentKind::None {
        terms.alignment_global =
            align(&features.global, &mut grad_global, g5, &mut plans_converged)?;
    }

    // Local stream: per-part and accumulated identity heads and alignment.
    let mut grad_accumulated: Vec<Array2<T>> =
        features.accumulated.iter().map(|a| Array2::zeros(a.dim())).collect();
    if g2 > T::zero() {
        let mut total = T::zero();
        for k in 0..parts {
            let logits = head_forward(&features.locals[k], &heads.locals[k])?;
            let id = identity_loss(&logits, labels)?;
            total += id.value;
            let (df, hg) =
                head_backward(&features.locals[k], &heads.locals[k], &id.grad_logits, g2);
            grad_locals[k] += &df;
            grad_local_heads[k] = hg;
        }
        if opts.alpha > T::zero() {
            for (a, feat) in features.accumulated.iter().enumerate() {
                let logits = head_forward(feat, &heads.accumulated[a])?;
                let id = identity_loss(&logits, labels)?;
                total += opts.alpha * id.value;
                let (df, hg) =
                    head_backward(feat, &heads.accumulated[a], &id.grad_logits, g2 * opts.alpha);
                grad_accumulated[a] += &df;
                grad_accumulated_heads[a] = hg;
            }
        }
        terms.id_local = total;
    }
    if g3 > T::zero() && opts.alignment != AlignmentKind::None {
        let mut total = T::zero();
        for k in 0..parts {
            total += align(&features.locals[k], &mut grad_locals[k], g3, &mut plans_converged)?;
        }
        if opts.alpha > T::zero() {
            for (a, feat) in features.accumulated.iter().enumerate() {
                let v = align(feat, &mut grad_accumulated[a], g3 * opts.alpha, &mut plans_converged)?;
                total += opts.alpha * v;
            }
        }
        terms.alignment_local = total;
    }
    // Fold accumulated-feature gradients back onto their source parts.
    for (a, g) in grad_accumulated.iter().enumerate() {
        let mut off = 0;
        for k in 0..=a + 1 {
            let w = features.locals[k].ncols();
            grad_locals[k] += &g.slice(s![.., off..off + w]);
            off += w;
        }
    }

    // Discrimination on the holistic feature.
    if g1 > T::zero() && opts.discrimination != DiscriminationKind::None {
        let hb = LabeledBatch::new(
            features.holistic.clone(),
            labels.to_vec(),
            modalities.to_vec(),
        )?;
        let (value, grad) = match opts.discrimination {
            DiscriminationKind::CmDl => {
                let out = cm_dl_loss(&hb)?;
                (out.value, out.grad)
            }
            DiscriminationKind::Center => {
                let c = centers.ok_or_else(|| {
                    Error::InvalidState("center baseline needs running centers".into())
                })?;
                let out = center_loss(&features.holistic, labels, c)?;
                (out.value, out.grad)
            }
            DiscriminationKind::Triplet => {
                let out = batch_hard_triplet_loss(&hb, opts.triplet_margin)?;
                (out.value, out.grad)
            }
            DiscriminationKind::None => unreachable!(),
        };
        terms.discrimination = value;
        grad_holistic += &(&grad * g1);
    }
    let (hl_grads, grad_part_logits) = holistic_backward(
        &grad_holistic,
        &features.locals,
        &features.part_weights,
        opts.trainable_part_weights,
    );
    for (k, g) in hl_grads.into_iter().enumerate() {
        grad_locals[k] += &g;
    }

    let objective = g1 * terms.discrimination
        + g2 * terms.id_local
        + g3 * terms.alignment_local
        + g4 * terms.id_global
        + g5 * terms.alignment_global;
    Ok(MgsLossOutput {
        objective,
        terms,
        grad_global,
        grad_locals,
        grad_part_logits,
        grad_global_head,
        grad_local_heads,
        grad_accumulated_heads,
        plans_converged,
    })
}
