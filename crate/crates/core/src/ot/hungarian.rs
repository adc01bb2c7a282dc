//! Exact minimum-cost assignment via shortest augmenting paths with dual
//! potentials, O(n^3) on square matrices.

use ndarray::Array2;

use crate::real::Real;

/// Optimal assignment of a square cost matrix. Returns `assign[row] = col`
/// and the total cost.
pub fn solve<T: Real>(cost: &Array2<T>) -> (Vec<usize>, T) {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment requires a square matrix");
    let inf = T::infinity();
    // 1-based arrays; p[j] is the row matched to column j, 0 = unmatched.
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost[[i, assign[i]]]).sum();
    (assign, total)
}

/// Among all optimal assignments, the lexicographically smallest permutation
/// (row 0's column first, then row 1's, ...). Ties are detected within a
/// small relative tolerance.
pub fn solve_lexmin<T: Real>(cost: &Array2<T>) -> (Vec<usize>, T) {
    let n = cost.nrows();
    let (_, best) = solve(cost);
    let tol = T::c(1e-9) * (T::one() + best.abs());
    let mut fixed_cols: Vec<usize> = Vec::with_capacity(n);
    let mut fixed_cost = T::zero();
    let mut free_cols: Vec<usize> = (0..n).collect();
    for row in 0..n {
        let rest_rows: Vec<usize> = (row + 1..n).collect();
        let mut chosen = None;
        for (ci, &col) in free_cols.iter().enumerate() {
            let cand_cost = fixed_cost + cost[[row, col]];
            let rest = if rest_rows.is_empty() {
                T::zero()
            } else {
                let mut sub = Array2::zeros((rest_rows.len(), free_cols.len() - 1));
                for (ri, &r) in rest_rows.iter().enumerate() {
                    let mut cj = 0;
                    for (cjj, &c) in free_cols.iter().enumerate() {
                        if cjj == ci {
                            continue;
                        }
                        sub[[ri, cj]] = cost[[r, c]];
                        cj += 1;
                    }
                }
                solve(&sub).1
            };
            if cand_cost + rest <= best + tol {
                chosen = Some(ci);
                break;
            }
        }
        let ci = chosen.expect("an optimal completion must exist");
        fixed_cost += cost[[row, free_cols[ci]]];
        fixed_cols.push(free_cols.remove(ci));
    }
    (fixed_cols, fixed_cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn brute_force(cost: &Array2<f64>) -> f64 {
        let n = cost.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut perm, 0, cost, &mut best);
        best
    }

    fn permute(perm: &mut Vec<usize>, k: usize, cost: &Array2<f64>, best: &mut f64) {
        let n = perm.len();
        if k == n {
            let total: f64 = (0..n).map(|i| cost[[i, perm[i]]]).sum();
            *best = best.min(total);
            return;
        }
        for i in k..n {
            perm.swap(k, i);
            permute(perm, k + 1, cost, best);
            perm.swap(k, i);
        }
    }

    #[test]
    fn matches_brute_force_on_random() {
        let mut s = 99_u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64) / (u32::MAX as f64)
        };
        for n in 2..=6 {
            for _ in 0..20 {
                let cost = Array2::from_shape_fn((n, n), |_| next());
                let (assign, total) = solve(&cost);
                let mut seen = vec![false; n];
                for &c in &assign {
                    assert!(!seen[c]);
                    seen[c] = true;
                }
                let expect = brute_force(&cost);
                assert!((total - expect).abs() < 1e-9, "n={}: {} vs {}", n, total, expect);
            }
        }
    }

    #[test]
    fn lexmin_breaks_ties_toward_smaller_columns() {
        // Both permutations cost 5; identity is lexicographically smaller.
        let cost = array![[1.0_f64, 2.0], [3.0, 4.0]];
        let (assign, total) = solve_lexmin(&cost);
        assert_eq!(assign, vec![0, 1]);
        assert!((total - 5.0).abs() < 1e-12);
    }

    #[test]
    fn lexmin_still_optimal() {
        let cost = array![[0.0_f64, 10.0], [10.0, 0.0]];
        let (assign, total) = solve_lexmin(&cost);
        assert_eq!(assign, vec![0, 1]);
        assert_eq!(total, 0.0);
    }
}
