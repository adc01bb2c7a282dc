//! Finite-difference verification of every analytic gradient path: the
//! transport-weighted distance loss (frozen plan), the variance-ratio loss,
//! identity cross-entropy, the holistic part weights, and the full encoder
//! stack end to end.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batch::{LabeledBatch, Modality};
use crate::config::RunConfig;
use crate::error::Result;
use crate::losses::{
    cm_dl_loss, cm_emd_loss, identity_loss, CmEmdOptions, WeightMode,
};
use crate::math::BnMode;
use crate::mgs::{
    mgs_losses, AlignmentKind, DiscriminationKind, MgsFeatures, MgsLossOptions,
};
use crate::model::Model;
use crate::ot::SinkhornConfig;

/// Gradient paths checked by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradComponent {
    CmEmd,
    CmDl,
    Identity,
    HolisticWeights,
    Encoder,
}

impl GradComponent {
    pub fn name(self) -> &'static str {
        match self {
            GradComponent::CmEmd => "cm_emd_frozen_plan",
            GradComponent::CmDl => "cm_dl",
            GradComponent::Identity => "identity",
            GradComponent::HolisticWeights => "holistic_part_weights",
            GradComponent::Encoder => "encoder_end_to_end",
        }
    }

    pub fn parse(name: &str) -> Option<GradComponent> {
        match name {
            "cm_emd" | "cm_emd_frozen_plan" => Some(GradComponent::CmEmd),
            "cm_dl" => Some(GradComponent::CmDl),
            "identity" => Some(GradComponent::Identity),
            "holistic" | "holistic_part_weights" => Some(GradComponent::HolisticWeights),
            "encoder" | "encoder_end_to_end" => Some(GradComponent::Encoder),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComponentResult {
    pub component: GradComponent,
    pub max_rel_error: f64,
    pub probes: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub components: Vec<ComponentResult>,
    pub threshold: f64,
    /// True when probes == 0: nothing was checked.
    pub vacuous: bool,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.max_rel_error <= self.threshold)
    }
}

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn rel_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen::<f64>() * 2.0 - 1.0)
}

fn pk_labels(classes: usize, per_side: usize) -> (Vec<usize>, Vec<Modality>) {
    let mut ids = Vec::new();
    let mut mods = Vec::new();
    for c in 0..classes {
        for _ in 0..per_side {
            ids.push(c);
            mods.push(Modality::Visible);
        }
        for _ in 0..per_side {
            ids.push(c);
            mods.push(Modality::Thermal);
        }
    }
    (ids, mods)
}

/// Central finite differences of `f` at selected flat coordinates of a
/// matrix-valued input, compared against the analytic gradient.
fn probe_matrix(
    x: &Array2<f64>,
    analytic: &Array2<f64>,
    probes: usize,
    rng: &mut ChaCha8Rng,
    corrupt_first: bool,
    mut f: impl FnMut(&Array2<f64>) -> f64,
) -> (f64, usize) {
    let len = x.len();
    let count = probes.min(len);
    let mut worst = 0.0f64;
    for p in 0..count {
        let flat = rng.gen_range(0..len);
        let (i, j) = (flat / x.ncols(), flat % x.ncols());
        let mut plus = x.clone();
        plus[[i, j]] += FD_STEP;
        let mut minus = x.clone();
        minus[[i, j]] -= FD_STEP;
        let fd = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
        let mut a = analytic[[i, j]];
        if corrupt_first && p == 0 {
            a += 0.1;
        }
        worst = worst.max(rel_error(a, fd));
    }
    (worst, count)
}

fn check_cm_emd(probes: usize, corrupt: bool) -> Result<ComponentResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let fv = rand_mat(&mut rng, 5, 6);
    let ft = rand_mat(&mut rng, 6, 6);
    let opts = CmEmdOptions {
        weight_mode: WeightMode::OptimalTransport,
        sinkhorn: SinkhornConfig { tolerance: 1e-9, max_iterations: 100_000, ..Default::default() },
        l2_normalize: false,
    };
    let out = cm_emd_loss(&fv, &ft, &opts)?;
    let w = out.weights.clone();
    let frozen = |a: &Array2<f64>, b: &Array2<f64>| -> f64 {
        let mut acc = 0.0;
        for i in 0..a.nrows() {
            for j in 0..b.nrows() {
                let mut sq = 0.0;
                for k in 0..a.ncols() {
                    sq += (a[[i, k]] - b[[j, k]]).powi(2);
                }
                acc += w[[i, j]] * sq.sqrt();
            }
        }
        acc
    };
    let half = probes / 2 + probes % 2;
    let (e1, n1) = probe_matrix(&fv, &out.grad_visible, half, &mut rng, corrupt, |x| {
        frozen(x, &ft)
    });
    let (e2, n2) = probe_matrix(&ft, &out.grad_thermal, probes / 2, &mut rng, false, |x| {
        frozen(&fv, x)
    });
    Ok(ComponentResult {
        component: GradComponent::CmEmd,
        max_rel_error: e1.max(e2),
        probes: n1 + n2,
    })
}

fn check_cm_dl(probes: usize, corrupt: bool) -> Result<ComponentResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (ids, mods) = pk_labels(3, 2);
    let features = rand_mat(&mut rng, ids.len(), 6);
    let batch = LabeledBatch::new(features.clone(), ids.clone(), mods.clone())?;
    let out = cm_dl_loss(&batch)?;
    let ids2 = ids.clone();
    let mods2 = mods.clone();
    let (err, n) = probe_matrix(&features, &out.grad, probes, &mut rng, corrupt, move |x| {
        let b = LabeledBatch::new(x.clone(), ids2.clone(), mods2.clone()).unwrap();
        cm_dl_loss(&b).unwrap().value
    });
    Ok(ComponentResult { component: GradComponent::CmDl, max_rel_error: err, probes: n })
}

fn check_identity(probes: usize, corrupt: bool) -> Result<ComponentResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let logits = rand_mat(&mut rng, 8, 5);
    let labels: Vec<usize> = (0..8).map(|i| i % 5).collect();
    let out = identity_loss(&logits, &labels)?;
    let labels2 = labels.clone();
    let (err, n) = probe_matrix(&logits, &out.grad_logits, probes, &mut rng, corrupt, move |x| {
        identity_loss(x, &labels2).unwrap().value
    });
    Ok(ComponentResult { component: GradComponent::Identity, max_rel_error: err, probes: n })
}

fn check_holistic(probes: usize, corrupt: bool, parts: usize) -> Result<ComponentResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let dim = 4;
    let (ids, mods) = pk_labels(3, 2);
    let n = ids.len();
    let locals: Vec<Array2<f64>> = (0..parts).map(|_| rand_mat(&mut rng, n, dim)).collect();
    let global = rand_mat(&mut rng, n, dim);
    let logits = Array1::from_shape_fn(parts, |_| rng.gen::<f64>() - 0.5);
    let opts = MgsLossOptions {
        gamma: [1.0, 0.0, 0.0, 0.0, 0.0],
        alignment: AlignmentKind::None,
        discrimination: DiscriminationKind::CmDl,
        ..Default::default()
    };
    // Heads are unused at gamma = (1,0,0,0,0) but the assembler still wants
    // consistent shapes.
    let own_w: Vec<(Array2<f64>, Array1<f64>)> = (0..parts)
        .map(|_| (Array2::zeros((dim, 3)), Array1::zeros(3)))
        .collect();
    let own_acc: Vec<(Array2<f64>, Array1<f64>)> =
        (2..=parts).map(|k| (Array2::zeros((k * dim, 3)), Array1::zeros(3))).collect();
    let own_g = (Array2::<f64>::zeros((dim, 3)), Array1::<f64>::zeros(3));
    let make_heads = || crate::mgs::MgsHeads {
        global: crate::mgs::HeadParams { weight: own_g.0.view(), bias: own_g.1.view() },
        locals: own_w
            .iter()
            .map(|(w, b)| crate::mgs::HeadParams { weight: w.view(), bias: b.view() })
            .collect(),
        accumulated: own_acc
            .iter()
            .map(|(w, b)| crate::mgs::HeadParams { weight: w.view(), bias: b.view() })
            .collect(),
    };
    let objective = |lg: &Array1<f64>| -> f64 {
        let f = MgsFeatures::assemble(global.clone(), locals.clone(), &lg.view(), true).unwrap();
        mgs_losses(&f, &ids, &mods, &make_heads(), &opts, None).unwrap().objective
    };
    let f = MgsFeatures::assemble(global.clone(), locals.clone(), &logits.view(), true)?;
    let out = mgs_losses(&f, &ids, &mods, &make_heads(), &opts, None)?;
    let count = probes.min(parts);
    let mut worst = 0.0f64;
    for p in 0..count {
        let k = p % parts;
        let mut plus = logits.clone();
        plus[k] += FD_STEP;
        let mut minus = logits.clone();
        minus[k] -= FD_STEP;
        let fd = (objective(&plus) - objective(&minus)) / (2.0 * FD_STEP);
        let mut a = out.grad_part_logits[k];
        if corrupt && p == 0 {
            a += 0.1;
        }
        worst = worst.max(rel_error(a, fd));
    }
    Ok(ComponentResult {
        component: GradComponent::HolisticWeights,
        max_rel_error: worst,
        probes: count,
    })
}

/// End-to-end check of every trainable tensor through the assembled
/// objective. The alignment slots use uniform pair weights so the weights
/// are constants and plain finite differences of the objective are exact;
/// the chain rule through the encoder, pooling, normalization, heads, and
/// logits is identical to the transport-weighted path.
fn check_encoder(cfg: &RunConfig, probes: usize, corrupt: bool) -> Result<ComponentResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let num_ids = 3;
    let mut model = Model::new(&cfg.encoder, cfg.mgs.parts, cfg.mgs.gem_p, num_ids, 77)?;
    let (ids, mods) = pk_labels(num_ids, 2);
    let inputs = rand_mat(&mut rng, ids.len(), cfg.encoder.input_dim);
    let opts = MgsLossOptions {
        gamma: [1.0, 1.0, 0.5, 1.0, 0.5],
        alpha: 0.5,
        alignment: AlignmentKind::CmEmd,
        discrimination: DiscriminationKind::CmDl,
        emd: CmEmdOptions { weight_mode: WeightMode::Uniform, ..Default::default() },
        triplet_margin: 0.3,
        trainable_part_weights: true,
    };
    let objective = |model: &mut Model| -> f64 {
        let (features, _) = model
            .forward(&inputs, &mods, BnMode::TrainFrozen, true)
            .expect("forward");
        let heads = model.heads();
        mgs_losses(&features, &ids, &mods, &heads, &opts, None).expect("losses").objective
    };
    // Analytic gradients.
    model.store.zero_grads();
    let (features, cache) = model.forward(&inputs, &mods, BnMode::TrainFrozen, true)?;
    let heads = model.heads();
    let out = mgs_losses(&features, &ids, &mods, &heads, &opts, None)?;
    drop(heads);
    model.backward(cache.as_ref().expect("cache"), &out)?;

    let ids_list = model.all_tensor_ids();
    let mut worst = 0.0f64;
    let mut total = 0usize;
    let mut first = corrupt;
    for id in ids_list {
        let len = model.store.tensor(id).value.len();
        let count = probes.min(len);
        for _ in 0..count {
            let idx = rng.gen_range(0..len);
            let mut analytic = model.store.tensor(id).grad[idx];
            if first {
                analytic += 0.1;
                first = false;
            }
            let orig = model.store.tensor(id).value[idx];
            model.store.tensor_mut(id).value[idx] = orig + FD_STEP;
            let plus = objective(&mut model);
            model.store.tensor_mut(id).value[idx] = orig - FD_STEP;
            let minus = objective(&mut model);
            model.store.tensor_mut(id).value[idx] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic, fd));
            total += 1;
        }
    }
    Ok(ComponentResult { component: GradComponent::Encoder, max_rel_error: worst, probes: total })
}

/// Run all five components with `probes` finite-difference probes each.
/// `corrupt` deliberately offsets one analytic gradient of the named
/// component (negative-control fixture for tests and the CLI).
pub fn run_gradcheck(
    cfg: &RunConfig,
    probes: usize,
    corrupt: Option<GradComponent>,
) -> Result<GradCheckReport> {
    if probes == 0 {
        return Ok(GradCheckReport {
            components: vec![],
            threshold: GRADCHECK_THRESHOLD,
            vacuous: true,
        });
    }
    let hit = |c: GradComponent| corrupt == Some(c);
    let components = vec![
        check_cm_emd(probes, hit(GradComponent::CmEmd))?,
        check_cm_dl(probes, hit(GradComponent::CmDl))?,
        check_identity(probes, hit(GradComponent::Identity))?,
        check_holistic(probes, hit(GradComponent::HolisticWeights), cfg.mgs.parts)?,
        check_encoder(cfg, probes, hit(GradComponent::Encoder))?,
    ];
    Ok(GradCheckReport { components, threshold: GRADCHECK_THRESHOLD, vacuous: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_passes() {
        let cfg = RunConfig::default();
        let report = run_gradcheck(&cfg, 6, None).unwrap();
        assert!(!report.vacuous);
        assert_eq!(report.components.len(), 5);
        for c in &report.components {
            assert!(
                c.max_rel_error <= report.threshold,
                "{}: {}",
                c.component.name(),
                c.max_rel_error
            );
        }
        assert!(report.passed());
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let cfg = RunConfig::default();
        for component in [
            GradComponent::CmEmd,
            GradComponent::CmDl,
            GradComponent::Identity,
            GradComponent::HolisticWeights,
            GradComponent::Encoder,
        ] {
            let report = run_gradcheck(&cfg, 3, Some(component)).unwrap();
            assert!(!report.passed(), "corruption in {} not caught", component.name());
        }
    }

    #[test]
    fn zero_probes_vacuous_pass() {
        let cfg = RunConfig::default();
        let report = run_gradcheck(&cfg, 0, None).unwrap();
        assert!(report.vacuous);
        assert!(report.passed());
    }
}
