//! Acceptance suite. Each test prints one PASS/FAIL line (run with
//! `cargo test -p cmemd --test acceptance -- --nocapture` to see them) and
//! asserts its criterion:
//!
//!  A1 transport solver matches the exact oracle at small epsilon
//!  A2 gradient suite within 1e-4 of finite differences
//!  A3 alignment halves the held-out modality gap vs the identity baseline
//!  A4 discrimination improves rank-1 and lowers the variance ratio
//!  A5 ablation ordering: baseline <= +alignment <= full, strict overall
//!  A6 transport weighting beats cosine, uniform, and KL weighting
//!  A7 within-row plan monotonicity and negative plan/cost correlation
//!  A8 retrieval metrics match a brute-force oracle exactly
//!  A9 byte-identical training runs for identical config and seed

use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use cmemd::batch::{LabeledBatch, Modality};
use cmemd::config::{BaselineLoss, RunConfig, WeightModeConfig};
use cmemd::error::Result;
use cmemd::eval::{evaluate_retrieval, Direction};
use cmemd::gradcheck::run_gradcheck;
use cmemd::math::{pairwise_euclidean, CostMatrix};
use cmemd::ot::{
    adjusted_cost_monotonicity_check, exact_transport, sinkhorn, transport_cost, MarginalWeights,
    SinkhornConfig,
};
use cmemd::trainer::{evaluate_model, load_data, train};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!("{} {} - {}", criterion, if pass { "PASS" } else { "FAIL" }, detail);
    assert!(pass, "{} failed: {}", criterion, detail);
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// A1: on 100 seeded random 8x8 distance matrices with uniform marginals,
/// the entropic solve at epsilon 1e-3 lands within 1e-3 relative of the
/// exact optimum, with marginals met to 1e-6, in under 5 seconds.
#[test]
fn a1_transport_matches_exact_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA1);
    let u = MarginalWeights::uniform(8);
    let cfg = SinkhornConfig { epsilon: 1e-3, max_iterations: 200_000, ..Default::default() };
    let mut worst_rel = 0.0f64;
    let mut worst_violation = 0.0f64;
    for instance in 0..100 {
        let x = normal_matrix(&mut rng, 8, 4);
        let y = normal_matrix(&mut rng, 8, 4);
        let cost = pairwise_euclidean(&x, &y).unwrap();
        let plan = sinkhorn(&cost, &u, &u, &cfg).unwrap();
        assert!(plan.converged, "instance {} did not converge", instance);
        assert!(plan.plan.iter().all(|&p| p >= 0.0));
        let sink_cost = transport_cost(&plan, &cost).unwrap();
        let exact = exact_transport(&cost, &u, &u).unwrap();
        let exact_cost = transport_cost(&exact, &cost).unwrap();
        let rel = (sink_cost - exact_cost).abs() / exact_cost;
        worst_rel = worst_rel.max(rel);
        worst_violation = worst_violation.max(plan.marginal_violation);
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "A1",
        worst_rel <= 1e-3 && worst_violation <= 1e-6 && elapsed < 5.0,
        &format!(
            "max relative cost error {:.3e} (limit 1e-3), max marginal violation {:.3e}, {:.2}s",
            worst_rel, worst_violation, elapsed
        ),
    );
}

/// A2: the finite-difference suite passes at 1e-4 across all five gradient
/// paths in under 30 seconds.
#[test]
fn a2_gradient_suite() {
    let start = Instant::now();
    let reportd = run_gradcheck(&RunConfig::default(), 20, None).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let worst = reportd
        .components
        .iter()
        .map(|c| c.max_rel_error)
        .fold(0.0f64, f64::max);
    let detail: Vec<String> = reportd
        .components
        .iter()
        .map(|c| format!("{}={:.2e}", c.component.name(), c.max_rel_error))
        .collect();
    report(
        "A2",
        reportd.passed() && !reportd.vacuous && elapsed < 30.0,
        &format!("max rel error {:.3e} [{}], {:.2}s", worst, detail.join(", "), elapsed),
    );
}

/// Base synthetic-data config shared by the training criteria.
fn training_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.synth.seed = seed * 1000;
    cfg.batch.identities = 6;
    cfg.batch.visible_per_identity = 4;
    cfg.batch.thermal_per_identity = 4;
    cfg.mgs.alpha = 1.0;
    cfg.mgs.beta = 0.5;
    cfg.run.seed = seed;
    cfg
}

fn run_training(cfg: &RunConfig) -> Result<(f64, f64, f64)> {
    let dir = tempfile::tempdir().expect("tempdir");
    let run_start = Instant::now();
    let (mut model, outcome) = train(cfg, dir.path())?;
    let elapsed = run_start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "training run exceeded 60s ({:.1}s)", elapsed);
    let data = load_data(cfg)?;
    let (v2t, t2v) = evaluate_model(&mut model, &data.test, cfg.mgs.beta)?;
    let rank1 = (v2t.rank_1 + t2v.rank_1) / 2.0;
    Ok((outcome.final_gap, outcome.final_fisher, rank1))
}

const SEEDS: [u64; 5] = [11, 12, 13, 14, 15];

/// A3: with alignment-heavy weights, enabling the transport loss cuts the
/// held-out modality gap by at least half against the identity-only
/// baseline, on every seed, at equal epochs.
#[test]
fn a3_alignment_effect() {
    let mut ratios = Vec::new();
    for &seed in &SEEDS {
        let mut emd = training_config(seed);
        emd.mgs.gamma = [0.0, 2.0, 1.2, 1.0, 2.0];
        emd.ablation.enable_cm_dl = false;
        let mut base = emd.clone();
        base.ablation.enable_cm_emd = false;
        let (gap_emd, _, _) = run_training(&emd).unwrap();
        let (gap_base, _, _) = run_training(&base).unwrap();
        ratios.push(gap_emd / gap_base);
    }
    let worst = ratios.iter().cloned().fold(0.0f64, f64::max);
    report(
        "A3",
        worst <= 0.5,
        &format!(
            "gap ratios vs identity-only baseline {:?} (all must be <= 0.5)",
            ratios.iter().map(|r| format!("{:.3}", r)).collect::<Vec<_>>()
        ),
    );
}

struct TrioRun {
    base_rank1: f64,
    emd_rank1: f64,
    emd_fisher: f64,
    full_rank1: f64,
    full_fisher: f64,
}

/// Shared three-arm runs (baseline / +alignment / full) reused by A4 and A5.
fn trio_runs() -> &'static Vec<TrioRun> {
    static RUNS: OnceLock<Vec<TrioRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let mut full = training_config(seed);
                full.mgs.gamma = [4.0, 2.0, 0.4, 1.0, 0.6];
                let mut emd = full.clone();
                emd.ablation.enable_cm_dl = false;
                let mut base = emd.clone();
                base.ablation.enable_cm_emd = false;
                let (_, _, base_rank1) = run_training(&base).unwrap();
                let (_, emd_fisher, emd_rank1) = run_training(&emd).unwrap();
                let (_, full_fisher, full_rank1) = run_training(&full).unwrap();
                TrioRun { base_rank1, emd_rank1, emd_fisher, full_rank1, full_fisher }
            })
            .collect()
    })
}

/// A4: adding the discrimination loss on top of alignment improves held-out
/// rank-1 in at least 4 of 5 seeds and lowers the held-out variance ratio in
/// at least 4 of 5 seeds.
#[test]
fn a4_discrimination_effect() {
    let runs = trio_runs();
    let rank_wins = runs.iter().filter(|r| r.full_rank1 > r.emd_rank1).count();
    let fisher_wins = runs.iter().filter(|r| r.full_fisher < r.emd_fisher).count();
    report(
        "A4",
        rank_wins >= 4 && fisher_wins >= 4,
        &format!(
            "rank-1 improved on {}/5 seeds, variance ratio reduced on {}/5 seeds (need >= 4)",
            rank_wins, fisher_wins
        ),
    );
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

/// A5: median rank-1 over the seeds is ordered baseline <= +alignment <=
/// full method, with strict improvement from baseline to full.
#[test]
fn a5_ablation_ordering() {
    let runs = trio_runs();
    let base = median(&mut runs.iter().map(|r| r.base_rank1).collect());
    let emd = median(&mut runs.iter().map(|r| r.emd_rank1).collect());
    let full = median(&mut runs.iter().map(|r| r.full_rank1).collect());
    report(
        "A5",
        base <= emd && emd <= full && base < full,
        &format!("median rank-1: baseline {:.3} <= +alignment {:.3} <= full {:.3}", base, emd, full),
    );
}

/// A6: on a profile where some identities are clean and some are very noisy,
/// median held-out rank-1 orders the pair weightings as transport >= cosine
/// >= uniform and >= KL.
#[test]
fn a6_weighting_ablation() {
    let weighting_config = |seed: u64| {
        let mut cfg = training_config(seed);
        cfg.mgs.gamma = [3.0, 2.0, 0.4, 1.0, 0.6];
        cfg.data.synth.intra_identity_noise = 0.1;
        cfg.data.synth.noise_hetero_fraction = 0.375;
        cfg.data.synth.noise_hetero_multiplier = 10.0;
        cfg.data.synth.modality_offset_scale = 2.0;
        // Explosion guard for the KL arm; never binds for healthy runs.
        cfg.optim.clip_grad_norm = 500.0;
        cfg
    };
    let mut medians = std::collections::BTreeMap::new();
    for mode in ["ot", "cos", "uni", "kl"] {
        let mut ranks = Vec::new();
        for &seed in &SEEDS {
            let mut cfg = weighting_config(seed);
            match mode {
                "cos" => cfg.ablation.weight_mode = WeightModeConfig::CosineSimilarity,
                "uni" => cfg.ablation.weight_mode = WeightModeConfig::Uniform,
                "kl" => cfg.ablation.baseline_loss = BaselineLoss::Kl,
                _ => {}
            }
            let (_, _, rank1) = run_training(&cfg).unwrap();
            ranks.push(rank1);
        }
        medians.insert(mode, median(&mut ranks));
    }
    let (ot, cos, uni, kl) = (medians["ot"], medians["cos"], medians["uni"], medians["kl"]);
    report(
        "A6",
        ot >= cos && cos >= uni && cos >= kl,
        &format!(
            "median rank-1: transport {:.3} >= cosine {:.3} >= uniform {:.3} / kl {:.3}",
            ot, cos, uni, kl
        ),
    );
}

/// Spearman rank correlation with average ranks on ties.
fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let n = v.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut out = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = avg;
            }
            i = j + 1;
        }
        out
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for k in 0..a.len() {
        cov += (ra[k] - ma) * (rb[k] - mb);
        va += (ra[k] - ma).powi(2);
        vb += (rb[k] - mb).powi(2);
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// A7: within every row the plan decreases in the dual-adjusted cost on all
/// 100 instances, and the plan correlates negatively with the raw cost on at
/// least 95 of them.
#[test]
fn a7_negative_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA7);
    let u = MarginalWeights::uniform(8);
    let cfg = SinkhornConfig { epsilon: 0.1, ..Default::default() };
    let mut monotone_all = true;
    let mut negative = 0usize;
    for _ in 0..100 {
        let cost =
            CostMatrix::new(Array2::from_shape_fn((8, 8), |_| rng.gen::<f64>())).unwrap();
        let plan = sinkhorn(&cost, &u, &u, &cfg).unwrap();
        monotone_all &= adjusted_cost_monotonicity_check(&plan, &cost).unwrap();
        let p: Vec<f64> = plan.plan.iter().cloned().collect();
        let c: Vec<f64> = cost.values.iter().cloned().collect();
        if spearman(&p, &c) < 0.0 {
            negative += 1;
        }
    }
    report(
        "A7",
        monotone_all && negative >= 95,
        &format!(
            "row monotonicity on all instances: {}; negative Spearman on {}/100 (need >= 95)",
            monotone_all, negative
        ),
    );
}

/// Counting-based CMC/mAP oracle, independent of the sorting implementation.
fn oracle_report(q: &LabeledBatch<f64>, g: &LabeledBatch<f64>) -> (f64, f64, f64, f64) {
    let dist = pairwise_euclidean(&q.features, &g.features).unwrap().values;
    let mut counted = 0usize;
    let (mut h1, mut h10, mut h20) = (0usize, 0usize, 0usize);
    let mut ap_sum = 0.0;
    for qi in 0..q.len() {
        let relevant = g.identities.iter().filter(|&&id| id == q.identities[qi]).count();
        if relevant == 0 {
            continue;
        }
        counted += 1;
        let rank_of = |gi: usize| -> usize {
            let mut r = 1;
            for o in 0..g.len() {
                if o != gi
                    && (dist[[qi, o]] < dist[[qi, gi]]
                        || (dist[[qi, o]] == dist[[qi, gi]] && o < gi))
                {
                    r += 1;
                }
            }
            r
        };
        let mut hit_ranks: Vec<usize> = (0..g.len())
            .filter(|&gi| g.identities[gi] == q.identities[qi])
            .map(rank_of)
            .collect();
        hit_ranks.sort_unstable();
        let mut ap = 0.0;
        for (i, &r) in hit_ranks.iter().enumerate() {
            ap += (i + 1) as f64 / r as f64;
        }
        ap_sum += ap / relevant as f64;
        if hit_ranks[0] <= 1 {
            h1 += 1;
        }
        if hit_ranks[0] <= 10 {
            h10 += 1;
        }
        if hit_ranks[0] <= 20 {
            h20 += 1;
        }
    }
    let n = counted as f64;
    (h1 as f64 / n, h10 as f64 / n, h20 as f64 / n, ap_sum / n)
}

/// A8: the retrieval metrics agree exactly with the brute-force oracle on 50
/// random instances up to 50x50.
#[test]
fn a8_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA8);
    let mut checked = 0usize;
    while checked < 50 {
        let nq = rng.gen_range(2..=50);
        let ng = rng.gen_range(2..=50);
        let d = rng.gen_range(2..6);
        let ids = rng.gen_range(2..8);
        let q = LabeledBatch::new(
            Array2::from_shape_fn((nq, d), |_| rng.gen::<f64>()),
            (0..nq).map(|_| rng.gen_range(0..ids)).collect(),
            vec![Modality::Visible; nq],
        )
        .unwrap();
        let g = LabeledBatch::new(
            Array2::from_shape_fn((ng, d), |_| rng.gen::<f64>()),
            (0..ng).map(|_| rng.gen_range(0..ids)).collect(),
            vec![Modality::Thermal; ng],
        )
        .unwrap();
        if q.identities.iter().all(|qid| !g.identities.contains(qid)) {
            continue;
        }
        let r = evaluate_retrieval(&q, &g, Direction::VisibleToThermal).unwrap();
        let (h1, h10, h20, map) = oracle_report(&q, &g);
        assert_eq!(r.rank_1, h1, "rank_1 mismatch on instance {}", checked);
        assert_eq!(r.rank_10, h10);
        assert_eq!(r.rank_20, h20);
        assert_eq!(r.map_score, map);
        checked += 1;
    }
    report("A8", true, "exact oracle agreement on 50 instances up to 50x50");
}

/// A9: identical config and seed produce byte-identical metrics CSVs (and
/// checkpoints) across two runs.
#[test]
fn a9_determinism() {
    let mut cfg = training_config(11);
    cfg.optim.epochs = 10;
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (_, o1) = train(&cfg, d1.path()).unwrap();
    let (_, o2) = train(&cfg, d2.path()).unwrap();
    let m1 = std::fs::read(&o1.metrics_path).unwrap();
    let m2 = std::fs::read(&o2.metrics_path).unwrap();
    let c1 = std::fs::read(&o1.checkpoint_path).unwrap();
    let c2 = std::fs::read(&o2.checkpoint_path).unwrap();
    report(
        "A9",
        m1 == m2 && c1 == c2,
        &format!(
            "metrics CSVs byte-identical: {}; checkpoints byte-identical: {}",
            m1 == m2,
            c1 == c2
        ),
    );
}
