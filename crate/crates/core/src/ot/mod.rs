//! Transportation-problem solvers: log-domain Sinkhorn iteration for the
//! entropically regularized problem, plus an exact small-instance oracle.

mod hungarian;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::math::CostMatrix;
use crate::real::Real;

/// Probability weights over one modality's samples (a simplex vector).
#[derive(Debug, Clone)]
pub struct MarginalWeights<T> {
    weights: Vec<T>,
}

impl<T: Real> MarginalWeights<T> {
    pub fn new(weights: Vec<T>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("marginals must be nonempty".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w <= T::zero()) {
            return Err(Error::InvalidArgument("marginal weights must be positive".into()));
        }
        let sum: T = weights.iter().copied().sum();
        let tol = T::c(1e-9).max(T::epsilon() * T::c(64.0));
        if (sum - T::one()).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "marginal weights must sum to 1, got {}",
                sum
            )));
        }
        Ok(MarginalWeights { weights })
    }

    pub fn uniform(n: usize) -> Self {
        let w = T::one() / T::from_usize_(n);
        MarginalWeights { weights: vec![w; n] }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        let u = T::one() / T::from_usize_(self.len());
        self.weights.iter().all(|&w| (w - u).abs() <= T::c(1e-9))
    }
}

/// Solver output: the coupling matrix with prescribed marginals.
#[derive(Debug, Clone)]
pub struct TransportPlan<T> {
    pub plan: Array2<T>,
    pub converged: bool,
    pub iterations: usize,
    /// Max absolute row/column-sum error against the requested marginals.
    pub marginal_violation: T,
    /// Dual potentials (row, column) in the scale of the original cost,
    /// recorded by the Sinkhorn solver; the exact oracle leaves them unset.
    pub potentials: Option<(Array1<T>, Array1<T>)>,
}

/// Entropic-solver knobs. `epsilon` applies to the cost after max-entry
/// normalization when `normalize_cost` is set, which makes it scale-free.
#[derive(Debug, Clone)]
pub struct SinkhornConfig<T> {
    pub epsilon: T,
    pub max_iterations: usize,
    pub tolerance: T,
    pub normalize_cost: bool,
    /// Warm-start through a halving epsilon schedule; cuts iteration counts
    /// dramatically at small epsilon without changing the fixed point.
    pub epsilon_scaling: bool,
}

impl<T: Real> Default for SinkhornConfig<T> {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: T::c(0.1),
            max_iterations: 1000,
            tolerance: T::c(1e-6),
            normalize_cost: true,
            epsilon_scaling: true,
        }
    }
}

impl<T: Real> SinkhornConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= T::zero() {
            return Err(Error::InvalidArgument("sinkhorn epsilon must be positive".into()));
        }
        if !self.tolerance.is_finite() || self.tolerance <= T::zero() {
            return Err(Error::InvalidArgument("sinkhorn tolerance must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("sinkhorn max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_dims<T: Real>(
    cost: &CostMatrix<T>,
    v: &MarginalWeights<T>,
    t: &MarginalWeights<T>,
) -> Result<()> {
    if cost.nrows() != v.len() || cost.ncols() != t.len() {
        return Err(Error::DimensionMismatch(format!(
            "cost is {}x{} but marginals have lengths {} and {}",
            cost.nrows(),
            cost.ncols(),
            v.len(),
            t.len()
        )));
    }
    Ok(())
}

/// Log-domain Sinkhorn iteration on dual potentials.
///
/// Returns a plan meeting `cfg.tolerance` on the marginals (`converged`) or
/// the best iterate once the iteration budget is spent (`converged = false`).
/// Deterministic for fixed inputs.
pub fn sinkhorn<T: Real>(
    cost: &CostMatrix<T>,
    v: &MarginalWeights<T>,
    t: &MarginalWeights<T>,
    cfg: &SinkhornConfig<T>,
) -> Result<TransportPlan<T>> {
    cfg.validate()?;
    check_dims(cost, v, t)?;
    if cost.values.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("sinkhorn cost matrix".into()));
    }
    let (work, scale) = if cfg.normalize_cost {
        let normalized = cost.normalized();
        let s = normalized.normalizer / cost.normalizer;
        (normalized.values, s)
    } else {
        (cost.values.clone(), T::one())
    };
    let m = work.nrows();
    let n = work.ncols();
    let a: Vec<T> = v.as_slice().to_vec();
    let b: Vec<T> = t.as_slice().to_vec();
    let la: Vec<T> = a.iter().map(|x| x.ln()).collect();
    let lb: Vec<T> = b.iter().map(|x| x.ln()).collect();

    // Epsilon schedule: halve from the cost scale down to the target.
    let cost_max = work.iter().fold(T::zero(), |acc, &c| acc.max(c));
    let mut stages = Vec::new();
    if cfg.epsilon_scaling && cost_max > cfg.epsilon {
        let mut e = cost_max;
        while e > cfg.epsilon * (T::one() + T::c(1e-9)) {
            stages.push(e);
            e *= T::c(0.5);
        }
    }
    stages.push(cfg.epsilon);
    let coarse_tol = cfg.tolerance.max(T::c(1e-3));

    let mut f = vec![T::zero(); m];
    let mut g = vec![T::zero(); n];
    let mut plan = Array2::zeros((m, n));
    let mut violation = T::infinity();
    let mut iterations = 0usize;
    let mut converged = false;

    'stages: for (si, &eps) in stages.iter().enumerate() {
        let last = si + 1 == stages.len();
        let stage_tol = if last { cfg.tolerance } else { coarse_tol };
        loop {
            if iterations >= cfg.max_iterations {
                break 'stages;
            }
            for i in 0..m {
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max((g[j] - work[[i, j]]) / eps);
                }
                let mut s = T::zero();
                for j in 0..n {
                    s += ((g[j] - work[[i, j]]) / eps - mx).exp();
                }
                f[i] = eps * (la[i] - mx - s.ln());
            }
            for j in 0..n {
                let mut mx = T::neg_infinity();
                for i in 0..m {
                    mx = mx.max((f[i] - work[[i, j]]) / eps);
                }
                let mut s = T::zero();
                for i in 0..m {
                    s += ((f[i] - work[[i, j]]) / eps - mx).exp();
                }
                g[j] = eps * (lb[j] - mx - s.ln());
            }
            iterations += 1;
            violation = T::zero();
            for i in 0..m {
                let mut row = T::zero();
                for j in 0..n {
                    plan[[i, j]] = ((f[i] + g[j] - work[[i, j]]) / eps).exp();
                    row += plan[[i, j]];
                }
                violation = violation.max((row - a[i]).abs());
            }
            for j in 0..n {
                let mut col = T::zero();
                for i in 0..m {
                    col += plan[[i, j]];
                }
                violation = violation.max((col - b[j]).abs());
            }
            if violation <= stage_tol {
                if last {
                    converged = true;
                }
                break;
            }
        }
    }

    let fo = Array1::from_iter(f.iter().map(|&x| x * scale));
    let go = Array1::from_iter(g.iter().map(|&x| x * scale));
    Ok(TransportPlan {
        plan,
        converged,
        iterations,
        marginal_violation: violation,
        potentials: Some((fo, go)),
    })
}

/// Objective value of a plan against a ground cost.
pub fn transport_cost<T: Real>(plan: &TransportPlan<T>, cost: &CostMatrix<T>) -> Result<T> {
    if plan.plan.dim() != cost.values.dim() {
        return Err(Error::DimensionMismatch(format!(
            "plan is {:?} but cost is {:?}",
            plan.plan.dim(),
            cost.values.dim()
        )));
    }
    Ok(plan.plan.iter().zip(cost.values.iter()).map(|(&p, &c)| p * c).sum())
}

const ASSIGNMENT_LIMIT: usize = 64;
const GENERAL_LIMIT: usize = 6;
const EXPANSION_LIMIT: usize = 64;

/// Exact transportation solve for small instances.
///
/// Uniform marginals with equal sizes go through the assignment solver (the
/// plan is a permutation scaled by 1/N; cost ties resolve to the
/// lexicographically smallest permutation). Other small instances are
/// decomposed into unit assignments by expressing the marginals as fractions
/// over a common denominator.
pub fn exact_transport<T: Real>(
    cost: &CostMatrix<T>,
    v: &MarginalWeights<T>,
    t: &MarginalWeights<T>,
) -> Result<TransportPlan<T>> {
    check_dims(cost, v, t)?;
    let m = cost.nrows();
    let n = cost.ncols();
    if m == n && v.is_uniform() && t.is_uniform() {
        if n > ASSIGNMENT_LIMIT {
            return Err(Error::UnsupportedSize(format!(
                "{}x{} exceeds the {0}x{0} assignment limit {}",
                m, n, ASSIGNMENT_LIMIT
            )));
        }
        let (assign, _) = hungarian::solve_lexmin(&cost.values);
        let mass = T::one() / T::from_usize_(n);
        let mut plan = Array2::zeros((m, n));
        for (i, &j) in assign.iter().enumerate() {
            plan[[i, j]] = mass;
        }
        return Ok(TransportPlan {
            plan,
            converged: true,
            iterations: 0,
            marginal_violation: T::zero(),
            potentials: None,
        });
    }
    if m > GENERAL_LIMIT || n > GENERAL_LIMIT {
        return Err(Error::UnsupportedSize(format!(
            "{}x{} with general marginals exceeds the {}x{} limit",
            m, n, GENERAL_LIMIT, GENERAL_LIMIT
        )));
    }
    let d = lcm(denominator_of(v.as_slice())?, denominator_of(t.as_slice())?);
    if d > EXPANSION_LIMIT {
        return Err(Error::UnsupportedSize(format!(
            "marginal denominators expand past {} units",
            EXPANSION_LIMIT
        )));
    }
    let row_units = units_over(v.as_slice(), d)?;
    let col_units = units_over(t.as_slice(), d)?;
    if row_units.iter().sum::<usize>() != d || col_units.iter().sum::<usize>() != d {
        return Err(Error::UnsupportedSize("marginal unit counts do not balance".into()));
    }
    let mut row_of = Vec::with_capacity(d);
    for (i, &u) in row_units.iter().enumerate() {
        row_of.extend(std::iter::repeat_n(i, u));
    }
    let mut col_of = Vec::with_capacity(d);
    for (j, &u) in col_units.iter().enumerate() {
        col_of.extend(std::iter::repeat_n(j, u));
    }
    let expanded = Array2::from_shape_fn((d, d), |(a, b)| cost.values[[row_of[a], col_of[b]]]);
    let (assign, _) = hungarian::solve(&expanded);
    let unit = T::one() / T::from_usize_(d);
    let mut plan = Array2::zeros((m, n));
    for (a, &b) in assign.iter().enumerate() {
        plan[[row_of[a], col_of[b]]] += unit;
    }
    let mut violation = T::zero();
    for i in 0..m {
        let row: T = plan.row(i).sum();
        violation = violation.max((row - v.as_slice()[i]).abs());
    }
    for j in 0..n {
        let col: T = plan.column(j).sum();
        violation = violation.max((col - t.as_slice()[j]).abs());
    }
    Ok(TransportPlan {
        plan,
        converged: true,
        iterations: 0,
        marginal_violation: violation,
        potentials: None,
    })
}

/// Smallest common denominator (capped at [`EXPANSION_LIMIT`]) representing
/// every weight as a fraction within 1e-9.
fn denominator_of<T: Real>(weights: &[T]) -> Result<usize> {
    let mut denom = 1usize;
    for &w in weights {
        let mut best_q = 0usize;
        let mut best_err = T::infinity();
        for q in 1..=EXPANSION_LIMIT {
            let p = (w * T::from_usize_(q)).round();
            let err = (w - p / T::from_usize_(q)).abs();
            if err < best_err - T::c(1e-15) {
                best_err = err;
                best_q = q;
            }
        }
        if best_err > T::c(1e-9) {
            return Err(Error::UnsupportedSize(format!(
                "marginal weight {} is not a small rational",
                w
            )));
        }
        denom = lcm(denom, best_q);
        if denom > EXPANSION_LIMIT {
            return Err(Error::UnsupportedSize(format!(
                "marginal denominators expand past {} units",
                EXPANSION_LIMIT
            )));
        }
    }
    Ok(denom)
}

/// Integer unit counts of each weight over denominator `d`.
fn units_over<T: Real>(weights: &[T], d: usize) -> Result<Vec<usize>> {
    let dt = T::from_usize_(d);
    let mut units = Vec::with_capacity(weights.len());
    for &w in weights {
        let u = (w * dt).round();
        if (w - u / dt).abs() > T::c(1e-9) {
            return Err(Error::UnsupportedSize(format!(
                "marginal weight {} does not fit denominator {}",
                w, d
            )));
        }
        units.push(u.to_usize().unwrap_or(0));
    }
    Ok(units)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Verify the closed-form consequence of entropic optimality: within every
/// row, plan entries decrease as the dual-adjusted cost `C[i][j] - v[j]`
/// increases. Ties within the tolerance are accepted.
pub fn adjusted_cost_monotonicity_check<T: Real>(
    plan: &TransportPlan<T>,
    cost: &CostMatrix<T>,
) -> Result<bool> {
    let (_, col_pot) = plan
        .potentials
        .as_ref()
        .ok_or_else(|| Error::InvalidState("plan has no recorded dual potentials".into()))?;
    if plan.plan.dim() != cost.values.dim() || col_pot.len() != cost.ncols() {
        return Err(Error::DimensionMismatch("plan/cost/potential shapes disagree".into()));
    }
    let tol = T::c(1e-9);
    for i in 0..cost.nrows() {
        let mut order: Vec<usize> = (0..cost.ncols()).collect();
        let adjusted: Vec<T> =
            (0..cost.ncols()).map(|j| cost.values[[i, j]] - col_pot[j]).collect();
        order.sort_by(|&a, &b| adjusted[a].partial_cmp(&adjusted[b]).unwrap());
        for w in order.windows(2) {
            let (ja, jb) = (w[0], w[1]);
            if adjusted[jb] - adjusted[ja] > tol && plan.plan[[i, jb]] > plan.plan[[i, ja]] + tol {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
