//! Maximum-weight assignment, used to align mixture components between fits.

use nalgebra::DMatrix;

/// Hungarian method on a square cost matrix; returns `perm` with row `r`
/// assigned to column `perm[r]`, minimising the total cost.
pub fn min_cost_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square matrix");
    // 1-based potentials formulation
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut col_of = vec![0usize; n + 1];
    for i in 1..=n {
        col_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_of[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
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
                    u[col_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_of[j0] = col_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        if col_of[j] > 0 {
            perm[col_of[j] - 1] = j - 1;
        }
    }
    perm
}

/// For responsibilities of two fits on the same rows, returns `perm` such
/// that component `g` of `reference` corresponds to `perm[g]` of `other`.
pub fn match_components(reference: &DMatrix<f64>, other: &DMatrix<f64>) -> Vec<usize> {
    let overlap = reference.tr_mul(other);
    min_cost_assignment(&(-overlap))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(cost: &DMatrix<f64>) -> f64 {
        fn rec(cost: &DMatrix<f64>, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.nrows() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..cost.ncols() {
                if !used[c] {
                    used[c] = true;
                    best = best.min(cost[(row, c)] + rec(cost, row + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost.ncols()])
    }

    #[test]
    fn matches_exhaustive_search() {
        for seed in 0..30u64 {
            let n = 1 + (seed as usize % 6);
            let cost = DMatrix::from_fn(n, n, |i, j| (((i * 31 + j * 17) as u64 * (seed + 3)) % 23) as f64 - 7.0);
            let perm = min_cost_assignment(&cost);
            let total: f64 = perm.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum();
            assert!((total - brute_force(&cost)).abs() < 1e-12);
            let mut sorted = perm.clone();
            sorted.sort();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn recovers_swapped_labels() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.1, 0.9]);
        let b = DMatrix::from_fn(4, 2, |i, g| a[(i, 1 - g)]);
        assert_eq!(match_components(&a, &b), vec![1, 0]);
    }
}
