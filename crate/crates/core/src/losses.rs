//! Alignment and discrimination losses with analytic gradients: the
//! transport-weighted cross-modality distance, the intra/inter variance
//! ratio, identity cross-entropy, and the ablation baselines.

use ndarray::{Array1, Array2};

use crate::batch::{LabeledBatch, Modality};
use crate::error::{Error, Result};
use crate::math::{pairwise_euclidean, softmax};
use crate::ot::{sinkhorn, MarginalWeights, SinkhornConfig};
use crate::real::Real;

/// Smoothing floor under the square root when dividing by a pair distance;
/// makes the gradient at coincident points exactly zero.
pub const DISTANCE_GRAD_FLOOR: f64 = 1e-12;

/// Floor on the variance-ratio denominator before declaring the batch
/// degenerate.
pub const INTER_VARIANCE_FLOOR: f64 = 1e-12;

/// How pair weights are chosen for the cross-modality distance loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// Entropic optimal-transport plan (the method).
    OptimalTransport,
    /// Cosine similarities mapped to [0,1] and normalized to sum 1 over the
    /// whole matrix (ablation).
    CosineSimilarity,
    /// Every pair weighted 1/(Nv*Nt) (ablation).
    Uniform,
}

#[derive(Debug, Clone)]
pub struct CmEmdOptions<T> {
    pub weight_mode: WeightMode,
    pub sinkhorn: SinkhornConfig<T>,
    /// L2-normalize feature rows before the cost computation (off by default).
    pub l2_normalize: bool,
}

impl<T: Real> Default for CmEmdOptions<T> {
    fn default() -> Self {
        CmEmdOptions {
            weight_mode: WeightMode::OptimalTransport,
            sinkhorn: SinkhornConfig::default(),
            l2_normalize: false,
        }
    }
}

/// Value and per-input gradients of the cross-modality distance loss.
#[derive(Debug, Clone)]
pub struct CmEmdLoss<T> {
    pub value: T,
    pub grad_visible: Array2<T>,
    pub grad_thermal: Array2<T>,
    /// The pair weights actually used (transport plan or substitute).
    pub weights: Array2<T>,
    /// False when the Sinkhorn iterate ran out of budget; the loss is still
    /// usable (diagnostics side channel, not an error).
    pub plan_converged: bool,
}

fn l2_normalize_rows<T: Real>(x: &Array2<T>) -> (Array2<T>, Vec<T>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let sq: T = row.iter().map(|&v| v * v).sum();
        let norm = sq.sqrt().max(T::c(1e-12));
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    (out, norms)
}

/// Transport-weighted sum of cross-modality pair distances.
///
/// The weight matrix is treated as a constant when differentiating (the
/// envelope gradient of the transport objective), so
/// `d value / d fv_i = sum_j W_ij (fv_i - ft_j) / M_ij`, with coincident
/// pairs contributing zero.
pub fn cm_emd_loss<T: Real>(
    fv: &Array2<T>,
    ft: &Array2<T>,
    opts: &CmEmdOptions<T>,
) -> Result<CmEmdLoss<T>> {
    if fv.nrows() == 0 || ft.nrows() == 0 {
        return Err(Error::InvalidArgument("cm_emd_loss: empty modality".into()));
    }
    if fv.ncols() != ft.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "cm_emd_loss: feature dims {} vs {}",
            fv.ncols(),
            ft.ncols()
        )));
    }
    let (xv, xt, norms) = if opts.l2_normalize {
        let (a, na) = l2_normalize_rows(fv);
        let (b, nb) = l2_normalize_rows(ft);
        (a, b, Some((na, nb)))
    } else {
        (fv.clone(), ft.clone(), None)
    };
    let nv = xv.nrows();
    let nt = xt.nrows();
    let cost = pairwise_euclidean(&xv, &xt)?;
    let mut converged = true;
    let weights = match opts.weight_mode {
        WeightMode::OptimalTransport => {
            let plan = sinkhorn(
                &cost,
                &MarginalWeights::uniform(nv),
                &MarginalWeights::uniform(nt),
                &opts.sinkhorn,
            )?;
            converged = plan.converged;
            plan.plan
        }
        WeightMode::CosineSimilarity => {
            let mut w = Array2::zeros((nv, nt));
            for i in 0..nv {
                let na: T = xv.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
                for j in 0..nt {
                    let nb: T = xt.row(j).iter().map(|&v| v * v).sum::<T>().sqrt();
                    let dot: T = xv.row(i).iter().zip(xt.row(j).iter()).map(|(&a, &b)| a * b).sum();
                    let cos = dot / (na * nb).max(T::c(1e-12));
                    w[[i, j]] = (T::one() + cos) / T::c(2.0);
                }
            }
            let total = w.sum();
            if total > T::zero() {
                w.mapv_inplace(|v| v / total);
            }
            w
        }
        WeightMode::Uniform => {
            Array2::from_elem((nv, nt), T::one() / T::from_usize_(nv * nt))
        }
    };

    let mut value = T::zero();
    let mut grad_v = Array2::zeros(xv.dim());
    let mut grad_t = Array2::zeros(xt.dim());
    let floor = T::c(DISTANCE_GRAD_FLOOR);
    for i in 0..nv {
        for j in 0..nt {
            value += weights[[i, j]] * cost.values[[i, j]];
            let mut sq = T::zero();
            for d in 0..xv.ncols() {
                let dd = xv[[i, d]] - xt[[j, d]];
                sq += dd * dd;
            }
            let inv = weights[[i, j]] / (sq + floor).sqrt();
            for d in 0..xv.ncols() {
                let dd = (xv[[i, d]] - xt[[j, d]]) * inv;
                grad_v[[i, d]] += dd;
                grad_t[[j, d]] -= dd;
            }
        }
    }
    if let Some((nv_norms, nt_norms)) = norms {
        grad_v = normalize_backward(fv, &grad_v, &nv_norms);
        grad_t = normalize_backward(ft, &grad_t, &nt_norms);
    }
    Ok(CmEmdLoss { value, grad_visible: grad_v, grad_thermal: grad_t, weights, plan_converged: converged })
}

/// Chain an upstream gradient back through per-row L2 normalization.
fn normalize_backward<T: Real>(raw: &Array2<T>, grad_y: &Array2<T>, norms: &[T]) -> Array2<T> {
    let mut out = Array2::zeros(raw.dim());
    for i in 0..raw.nrows() {
        let r = norms[i];
        let y: Vec<T> = raw.row(i).iter().map(|&v| v / r).collect();
        let dot: T = grad_y.row(i).iter().zip(y.iter()).map(|(&g, &u)| g * u).sum();
        for d in 0..raw.ncols() {
            out[[i, d]] = (grad_y[[i, d]] - y[d] * dot) / r;
        }
    }
    out
}

/// Arithmetic feature mean of each modality.
pub fn modality_means<T: Real>(batch: &LabeledBatch<T>) -> Result<(Array1<T>, Array1<T>)> {
    let fv = batch.features_of(Modality::Visible);
    let ft = batch.features_of(Modality::Thermal);
    if fv.nrows() == 0 || ft.nrows() == 0 {
        return Err(Error::InvalidArgument("modality_means: a modality is missing".into()));
    }
    Ok((mean_rows(&fv), mean_rows(&ft)))
}

fn mean_rows<T: Real>(x: &Array2<T>) -> Array1<T> {
    let n = T::from_usize_(x.nrows());
    let mut m = Array1::zeros(x.ncols());
    for row in x.rows() {
        for (d, &v) in row.iter().enumerate() {
            m[d] += v;
        }
    }
    m.mapv_inplace(|v| v / n);
    m
}

/// Per-class per-modality means and sample counts, sorted by class index.
#[derive(Debug, Clone)]
pub struct ClassMeans<T> {
    pub class: usize,
    pub visible: Array1<T>,
    pub thermal: Array1<T>,
    pub n_visible: usize,
    pub n_thermal: usize,
}

pub fn class_modality_means<T: Real>(batch: &LabeledBatch<T>) -> Result<Vec<ClassMeans<T>>> {
    let d = batch.dim();
    let mut out: Vec<ClassMeans<T>> = Vec::new();
    for class in batch.classes() {
        let mut visible = Array1::zeros(d);
        let mut thermal = Array1::zeros(d);
        let mut nv = 0usize;
        let mut nt = 0usize;
        for i in 0..batch.len() {
            if batch.identities[i] != class {
                continue;
            }
            match batch.modalities[i] {
                Modality::Visible => {
                    visible += &batch.features.row(i);
                    nv += 1;
                }
                Modality::Thermal => {
                    thermal += &batch.features.row(i);
                    nt += 1;
                }
            }
        }
        if nv == 0 || nt == 0 {
            return Err(Error::InvalidArgument(format!(
                "class {} is missing from one modality",
                class
            )));
        }
        visible.mapv_inplace(|v| v / T::from_usize_(nv));
        thermal.mapv_inplace(|v| v / T::from_usize_(nt));
        out.push(ClassMeans { class, visible, thermal, n_visible: nv, n_thermal: nt });
    }
    Ok(out)
}

/// Value and batch-aligned gradient of the variance-ratio loss.
#[derive(Debug, Clone)]
pub struct CmDlLoss<T> {
    pub value: T,
    pub grad: Array2<T>,
    pub intra: T,
    pub inter: T,
}

/// Cross-modality discrimination loss: the ratio of cross-referenced
/// intra-class variance to inter-class variance (squared-norm traces of the
/// scatter terms), with the analytic quotient-rule gradient including the
/// means' dependence on the features.
pub fn cm_dl_loss<T: Real>(batch: &LabeledBatch<T>) -> Result<CmDlLoss<T>> {
    let stats = cm_dl_statistics(batch)?;
    if stats.inter < T::c(INTER_VARIANCE_FLOOR) {
        return Err(Error::DegenerateBatch(format!(
            "inter-class variance {} below floor",
            stats.inter
        )));
    }
    let (mu_v, mu_t) = modality_means(batch)?;
    let class_means = class_modality_means(batch)?;
    let n = batch.len();
    let d = batch.dim();
    let nv_total = batch.indices_of(Modality::Visible).len();
    let nt_total = batch.indices_of(Modality::Thermal).len();

    // Batch-wide sums reused by the inter-variance gradient.
    let mut sum_v_dev = Array1::<T>::zeros(d);
    let mut sum_t_dev = Array1::<T>::zeros(d);
    for cm in &class_means {
        for k in 0..d {
            sum_v_dev[k] += T::from_usize_(cm.n_visible) * (cm.visible[k] - mu_t[k]);
            sum_t_dev[k] += T::from_usize_(cm.n_thermal) * (cm.thermal[k] - mu_v[k]);
        }
    }

    let two = T::c(2.0);
    let mut grad = Array2::zeros((n, d));
    for i in 0..n {
        let cm = class_means
            .iter()
            .find(|c| c.class == batch.identities[i])
            .expect("class means cover the batch");
        for k in 0..d {
            let f = batch.features[[i, k]];
            let (d_intra, d_inter) = match batch.modalities[i] {
                Modality::Thermal => {
                    let nt_c = T::from_usize_(cm.n_thermal);
                    let nv_c = T::from_usize_(cm.n_visible);
                    let di = two * (f - cm.visible[k])
                        - two * nv_c / nt_c * (cm.visible[k] - cm.thermal[k]);
                    let de = two * (cm.thermal[k] - mu_v[k])
                        - two / T::from_usize_(nt_total) * sum_v_dev[k];
                    (di, de)
                }
                Modality::Visible => {
                    let nv_c = T::from_usize_(cm.n_visible);
                    let nt_c = T::from_usize_(cm.n_thermal);
                    let di = two * (f - cm.thermal[k])
                        - two * nt_c / nv_c * (cm.thermal[k] - cm.visible[k]);
                    let de = two * (cm.visible[k] - mu_t[k])
                        - two / T::from_usize_(nv_total) * sum_t_dev[k];
                    (di, de)
                }
            };
            grad[[i, k]] =
                (d_intra * stats.inter - stats.intra * d_inter) / (stats.inter * stats.inter);
        }
    }
    Ok(CmDlLoss { value: stats.intra / stats.inter, grad, intra: stats.intra, inter: stats.inter })
}

/// The two scatter sums behind the ratio loss; also reported by the
/// evaluation kit without gradients.
#[derive(Debug, Clone, Copy)]
pub struct CmDlStats<T> {
    pub intra: T,
    pub inter: T,
}

pub fn cm_dl_statistics<T: Real>(batch: &LabeledBatch<T>) -> Result<CmDlStats<T>> {
    let class_means = class_modality_means(batch)?;
    if class_means.len() < 2 {
        return Err(Error::InvalidArgument(
            "cm_dl requires at least two classes in the batch".into(),
        ));
    }
    let (mu_v, mu_t) = modality_means(batch)?;
    let mut intra = T::zero();
    for i in 0..batch.len() {
        let cm = class_means
            .iter()
            .find(|c| c.class == batch.identities[i])
            .expect("class means cover the batch");
        let opposite = match batch.modalities[i] {
            Modality::Thermal => &cm.visible,
            Modality::Visible => &cm.thermal,
        };
        for k in 0..batch.dim() {
            let dd = batch.features[[i, k]] - opposite[k];
            intra += dd * dd;
        }
    }
    let mut inter = T::zero();
    for cm in &class_means {
        for k in 0..batch.dim() {
            let dv = cm.visible[k] - mu_t[k];
            let dt = cm.thermal[k] - mu_v[k];
            inter += T::from_usize_(cm.n_visible) * dv * dv
                + T::from_usize_(cm.n_thermal) * dt * dt;
        }
    }
    Ok(CmDlStats { intra, inter })
}

/// Mean softmax cross-entropy over rows and its gradient on the logits.
#[derive(Debug, Clone)]
pub struct IdentityLoss<T> {
    pub value: T,
    pub grad_logits: Array2<T>,
}

pub fn identity_loss<T: Real>(logits: &Array2<T>, labels: &[usize]) -> Result<IdentityLoss<T>> {
    let n = logits.nrows();
    let k = logits.ncols();
    if n == 0 || labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "identity_loss: {} logit rows vs {} labels",
            n,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "identity_loss: label {} out of range for {} classes",
            bad, k
        )));
    }
    let nt = T::from_usize_(n);
    let mut value = T::zero();
    let mut grad = Array2::zeros((n, k));
    for i in 0..n {
        let row = logits.row(i);
        let p = softmax(&row);
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse: T = row.iter().map(|&x| (x - m).exp()).sum::<T>().ln() + m;
        value += lse - row[labels[i]];
        for j in 0..k {
            let indicator = if j == labels[i] { T::one() } else { T::zero() };
            grad[[i, j]] = (p[j] - indicator) / nt;
        }
    }
    Ok(IdentityLoss { value: value / nt, grad_logits: grad })
}

/// Divergence between per-dimension Gaussian fits of the two modalities.
#[derive(Debug, Clone)]
pub struct KlLoss<T> {
    pub value: T,
    pub grad_visible: Array2<T>,
    pub grad_thermal: Array2<T>,
}

const KL_VARIANCE_FLOOR: f64 = 1e-6;

/// KL divergence from the visible fit to the thermal fit, summed over
/// dimensions, with analytic gradients through both means and variances.
pub fn kl_alignment_baseline<T: Real>(fv: &Array2<T>, ft: &Array2<T>) -> Result<KlLoss<T>> {
    if fv.nrows() == 0 || ft.nrows() == 0 {
        return Err(Error::InvalidArgument("kl_alignment_baseline: empty modality".into()));
    }
    if fv.ncols() != ft.ncols() {
        return Err(Error::DimensionMismatch("kl_alignment_baseline: feature dims differ".into()));
    }
    let d = fv.ncols();
    let nv = T::from_usize_(fv.nrows());
    let nt = T::from_usize_(ft.nrows());
    let floor = T::c(KL_VARIANCE_FLOOR);
    let mu_v = mean_rows(fv);
    let mu_t = mean_rows(ft);
    let var = |x: &Array2<T>, mu: &Array1<T>, k: usize| -> T {
        let n = T::from_usize_(x.nrows());
        x.column(k).iter().map(|&v| (v - mu[k]) * (v - mu[k])).sum::<T>() / n
    };
    let half = T::c(0.5);
    let mut value = T::zero();
    let mut d_mu_v = Array1::zeros(d);
    let mut d_mu_t = Array1::zeros(d);
    let mut d_var_v = Array1::zeros(d);
    let mut d_var_t = Array1::zeros(d);
    let mut raw_var_v = Array1::zeros(d);
    let mut raw_var_t = Array1::zeros(d);
    for k in 0..d {
        let vv_raw = var(fv, &mu_v, k);
        let vt_raw = var(ft, &mu_t, k);
        raw_var_v[k] = vv_raw;
        raw_var_t[k] = vt_raw;
        let vv = vv_raw.max(floor);
        let vt = vt_raw.max(floor);
        let dm = mu_v[k] - mu_t[k];
        value += half * (vt / vv).ln() + (vv + dm * dm) / (T::c(2.0) * vt) - half;
        d_mu_v[k] = dm / vt;
        d_mu_t[k] = -dm / vt;
        d_var_v[k] = if vv_raw > floor { -half / vv + half / vt } else { T::zero() };
        d_var_t[k] = if vt_raw > floor {
            half / vt - (vv + dm * dm) / (T::c(2.0) * vt * vt)
        } else {
            T::zero()
        };
    }
    let chain = |x: &Array2<T>, mu: &Array1<T>, d_mu: &Array1<T>, d_var: &Array1<T>, n: T| {
        let mut g = Array2::zeros(x.dim());
        for i in 0..x.nrows() {
            for k in 0..x.ncols() {
                g[[i, k]] = d_mu[k] / n + d_var[k] * T::c(2.0) * (x[[i, k]] - mu[k]) / n;
            }
        }
        g
    };
    Ok(KlLoss {
        value,
        grad_visible: chain(fv, &mu_v, &d_mu_v, &d_var_v, nv),
        grad_thermal: chain(ft, &mu_t, &d_mu_t, &d_var_t, nt),
    })
}

#[derive(Debug, Clone)]
pub struct CenterLoss<T> {
    pub value: T,
    pub grad: Array2<T>,
}

/// Mean squared distance of each sample to its running class center.
pub fn center_loss<T: Real>(
    features: &Array2<T>,
    labels: &[usize],
    centers: &Array2<T>,
) -> Result<CenterLoss<T>> {
    let n = features.nrows();
    if n == 0 || labels.len() != n {
        return Err(Error::DimensionMismatch("center_loss: rows vs labels".into()));
    }
    if features.ncols() != centers.ncols() {
        return Err(Error::DimensionMismatch("center_loss: feature dim vs center dim".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= centers.nrows()) {
        return Err(Error::InvalidArgument(format!("center_loss: label {} has no center", bad)));
    }
    let nt = T::from_usize_(n);
    let mut value = T::zero();
    let mut grad = Array2::zeros(features.dim());
    for i in 0..n {
        for k in 0..features.ncols() {
            let dd = features[[i, k]] - centers[[labels[i], k]];
            value += dd * dd;
            grad[[i, k]] = T::c(2.0) * dd / nt;
        }
    }
    Ok(CenterLoss { value: value / nt, grad })
}

/// Standard running-center update: each used center moves toward the mean of
/// its batch samples, damped by the sample count.
pub fn update_centers<T: Real>(
    centers: &mut Array2<T>,
    features: &Array2<T>,
    labels: &[usize],
    rate: T,
) {
    let mut counts = vec![0usize; centers.nrows()];
    let mut sums = Array2::<T>::zeros(centers.dim());
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for k in 0..features.ncols() {
            sums[[l, k]] += features[[i, k]];
        }
    }
    for c in 0..centers.nrows() {
        if counts[c] == 0 {
            continue;
        }
        let denom = T::one() + T::from_usize_(counts[c]);
        for k in 0..centers.ncols() {
            let delta =
                (T::from_usize_(counts[c]) * centers[[c, k]] - sums[[c, k]]) / denom;
            centers[[c, k]] -= rate * delta;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TripletLoss<T> {
    pub value: T,
    pub grad: Array2<T>,
    /// False when no anchor had both a positive and a negative; the loss is
    /// zero in that case.
    pub has_valid_triplets: bool,
}

/// Batch-hard triplet loss: per anchor, hardest positive minus hardest
/// negative plus margin, hinged at zero.
pub fn batch_hard_triplet_loss<T: Real>(
    batch: &LabeledBatch<T>,
    margin: T,
) -> Result<TripletLoss<T>> {
    if batch.classes().len() < 2 {
        return Err(Error::InvalidArgument("triplet loss requires at least two classes".into()));
    }
    let n = batch.len();
    let d = batch.dim();
    let dist = pairwise_euclidean(&batch.features, &batch.features)?.values;
    let floor = T::c(DISTANCE_GRAD_FLOOR);
    let mut grad = Array2::zeros((n, d));
    let mut total = T::zero();
    let mut counted = 0usize;
    let mut actives: Vec<(usize, usize, usize)> = Vec::new();
    for a in 0..n {
        let mut hp: Option<usize> = None;
        let mut hn: Option<usize> = None;
        for o in 0..n {
            if o == a {
                continue;
            }
            if batch.identities[o] == batch.identities[a] {
                if hp.is_none_or(|p| dist[[a, o]] > dist[[a, p]]) {
                    hp = Some(o);
                }
            } else if hn.is_none_or(|q| dist[[a, o]] < dist[[a, q]]) {
                hn = Some(o);
            }
        }
        if let (Some(p), Some(q)) = (hp, hn) {
            counted += 1;
            let term = dist[[a, p]] - dist[[a, q]] + margin;
            if term > T::zero() {
                total += term;
                actives.push((a, p, q));
            }
        }
    }
    if counted == 0 {
        return Ok(TripletLoss { value: T::zero(), grad, has_valid_triplets: false });
    }
    let scale = T::one() / T::from_usize_(counted);
    for (a, p, q) in actives {
        let mut sq_p = T::zero();
        let mut sq_q = T::zero();
        for k in 0..d {
            let dp = batch.features[[a, k]] - batch.features[[p, k]];
            let dq = batch.features[[a, k]] - batch.features[[q, k]];
            sq_p += dp * dp;
            sq_q += dq * dq;
        }
        let inv_p = scale / (sq_p + floor).sqrt();
        let inv_q = scale / (sq_q + floor).sqrt();
        for k in 0..d {
            let up = (batch.features[[a, k]] - batch.features[[p, k]]) * inv_p;
            let uq = (batch.features[[a, k]] - batch.features[[q, k]]) * inv_q;
            grad[[a, k]] += up - uq;
            grad[[p, k]] -= up;
            grad[[q, k]] += uq;
        }
    }
    Ok(TripletLoss { value: total * scale, grad, has_valid_triplets: true })
}
