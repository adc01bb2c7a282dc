//! Retrieval and alignment metrics: cross-modality CMC/mAP, the modality-gap
//! measure, and the held-out discriminability ratio.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::batch::{LabeledBatch, Modality};
use crate::error::{Error, Result};
use crate::losses::cm_dl_statistics;
use crate::math::{pairwise_euclidean, CostMatrix};
use crate::ot::{exact_transport, transport_cost, MarginalWeights};
use crate::real::Real;

/// Query/gallery orientation of a retrieval run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    VisibleToThermal,
    ThermalToVisible,
}

impl Direction {
    pub fn query_modality(self) -> Modality {
        match self {
            Direction::VisibleToThermal => Modality::Visible,
            Direction::ThermalToVisible => Modality::Thermal,
        }
    }
}

/// CMC accuracies at ranks 1/10/20 plus mean average precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub rank_1: f64,
    pub rank_10: f64,
    pub rank_20: f64,
    #[serde(rename = "map")]
    pub map_score: f64,
    pub direction: Direction,
    /// Queries dropped because their identity never occurs in the gallery.
    pub excluded_queries: usize,
}

/// Rank the gallery per query by ascending Euclidean distance (stable in
/// gallery order on ties) and score CMC@{1,10,20} and mAP with the
/// interpolation-free average precision.
pub fn evaluate_retrieval<T: Real>(
    query: &LabeledBatch<T>,
    gallery: &LabeledBatch<T>,
    direction: Direction,
) -> Result<RetrievalReport> {
    let qm = direction.query_modality();
    if query.modalities.iter().any(|&m| m != qm) {
        return Err(Error::InvalidArgument("query batch has wrong-modality rows".into()));
    }
    if gallery.modalities.iter().any(|&m| m != qm.opposite()) {
        return Err(Error::InvalidArgument("gallery batch has wrong-modality rows".into()));
    }
    let dist = pairwise_euclidean(&query.features, &gallery.features)?.values;
    let g = gallery.len();
    let mut excluded = 0usize;
    let mut counted = 0usize;
    let mut hits1 = 0usize;
    let mut hits10 = 0usize;
    let mut hits20 = 0usize;
    let mut ap_sum = 0.0f64;
    for qi in 0..query.len() {
        let relevant =
            gallery.identities.iter().filter(|&&id| id == query.identities[qi]).count();
        if relevant == 0 {
            excluded += 1;
            continue;
        }
        counted += 1;
        let mut order: Vec<usize> = (0..g).collect();
        order.sort_by(|&a, &b| {
            dist[[qi, a]].partial_cmp(&dist[[qi, b]]).unwrap().then(a.cmp(&b))
        });
        let mut first_hit = None;
        let mut hits = 0usize;
        let mut ap = 0.0f64;
        for (rank0, &gi) in order.iter().enumerate() {
            if gallery.identities[gi] == query.identities[qi] {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(rank0);
                }
            }
        }
        ap /= relevant as f64;
        ap_sum += ap;
        let fh = first_hit.expect("relevant > 0 guarantees a hit");
        if fh < 1 {
            hits1 += 1;
        }
        if fh < 10 {
            hits10 += 1;
        }
        if fh < 20 {
            hits20 += 1;
        }
    }
    if counted == 0 {
        return Err(Error::InvalidArgument(
            "no query identity appears in the gallery".into(),
        ));
    }
    let n = counted as f64;
    Ok(RetrievalReport {
        rank_1: hits1 as f64 / n,
        rank_10: hits10 as f64 / n,
        rank_20: hits20 as f64 / n,
        map_score: ap_sum / n,
        direction,
        excluded_queries: excluded,
    })
}

/// Split a mixed batch into (query, gallery) sub-batches for a direction.
pub fn split_for_direction<T: Real>(
    batch: &LabeledBatch<T>,
    direction: Direction,
) -> Result<(LabeledBatch<T>, LabeledBatch<T>)> {
    let qm = direction.query_modality();
    let (qf, qi) = batch.split(qm);
    let (gf, gi) = batch.split(qm.opposite());
    let q = LabeledBatch::new(qf, qi, vec![qm; batch.indices_of(qm).len()])?;
    let g = LabeledBatch::new(
        gf,
        gi,
        vec![qm.opposite(); batch.indices_of(qm.opposite()).len()],
    )?;
    Ok((q, g))
}

/// Distance between modality mean vectors, plus the exact small-instance
/// transport distance between the two empirical clouds when the sizes allow
/// an exact solve.
#[derive(Debug, Clone)]
pub struct ModalityGap<T> {
    pub mean_distance: T,
    pub emd: Option<T>,
}

pub fn modality_gap<T: Real>(fv: &Array2<T>, ft: &Array2<T>) -> Result<ModalityGap<T>> {
    if fv.nrows() == 0 || ft.nrows() == 0 {
        return Err(Error::InvalidArgument("modality_gap: empty modality".into()));
    }
    if fv.ncols() != ft.ncols() {
        return Err(Error::DimensionMismatch("modality_gap: feature dims differ".into()));
    }
    let d = fv.ncols();
    let mut sq = T::zero();
    for k in 0..d {
        let mv: T = fv.column(k).iter().copied().sum::<T>() / T::from_usize_(fv.nrows());
        let mt: T = ft.column(k).iter().copied().sum::<T>() / T::from_usize_(ft.nrows());
        sq += (mv - mt) * (mv - mt);
    }
    let mean_distance = sq.max(T::zero()).sqrt();
    let emd = if fv.nrows() == ft.nrows() && fv.nrows() <= 64 {
        let cost = pairwise_euclidean(fv, ft)?;
        let u = MarginalWeights::uniform(fv.nrows());
        let plan = exact_transport(&cost, &u, &u)?;
        Some(transport_cost(&plan, &cost)?)
    } else {
        None
    };
    Ok(ModalityGap { mean_distance, emd })
}

/// Intra/inter variance ratio on held-out features, without gradients.
/// A collapsed denominator reports as +inf rather than erroring.
pub fn fisher_ratio<T: Real>(batch: &LabeledBatch<T>) -> Result<T> {
    let stats = cm_dl_statistics(batch)?;
    if stats.inter < T::c(crate::losses::INTER_VARIANCE_FLOOR) {
        return Ok(T::infinity());
    }
    Ok(stats.intra / stats.inter)
}

/// Exact small-instance transport distance between two same-size clouds.
pub fn exact_emd<T: Real>(cost: &CostMatrix<T>) -> Result<T> {
    let u = MarginalWeights::uniform(cost.nrows());
    let t = MarginalWeights::uniform(cost.ncols());
    let plan = exact_transport(cost, &u, &t)?;
    transport_cost(&plan, cost)
}
