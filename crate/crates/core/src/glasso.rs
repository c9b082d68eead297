//! Graphical lasso with pinned zeros.
//!
//! Minimises `−½ log det Θ + ½ tr(ΘΣ̂) + λ Σ_{l≠m} |Θ_lm|` over positive
//! definite `Θ` with `Θ_lm = 0` on a prescribed edge set. The penalty counts
//! both `(l, m)` and `(m, l)`, so optimality reads
//! `Σ̂_lm − W_lm + 2λ·sign(Θ_lm) = 0` with `W = Θ⁻¹`; this is the usual
//! blockwise coordinate descent with per-entry penalty `ρ = 2λ` and no
//! penalty on the diagonal. Pinned pairs are never updated.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Unordered pairs `(l, m)`, `l ≠ m`, whose precision entry is fixed at 0.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroEdgeSet {
    pairs: BTreeSet<(usize, usize)>,
}

impl ZeroEdgeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>, p: usize) -> Result<Self> {
        let mut set = Self::new();
        for (l, m) in pairs {
            set.insert(l, m, p)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, l: usize, m: usize, p: usize) -> Result<()> {
        if l == m {
            return Err(Error::InvalidInput(format!("zero-edge pair ({l}, {m}) is on the diagonal")));
        }
        if l >= p || m >= p {
            return Err(Error::InvalidInput(format!("zero-edge pair ({l}, {m}) out of range for p = {p}")));
        }
        self.pairs.insert((l.min(m), l.max(m)));
        Ok(())
    }

    pub fn contains(&self, l: usize, m: usize) -> bool {
        self.pairs.contains(&(l.min(m), l.max(m)))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.pairs.iter().map(|&(_, m)| m).max()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlassoSolution {
    pub precision: DMatrix<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Diagonal jitter added to the input covariance, 0 if none.
    pub jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlassoOptions {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for GlassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_sweeps: 500,
        }
    }
}

/// `−½ log det Θ + ½ tr(ΘΣ̂) + λ Σ_{l≠m} |Θ_lm|`.
pub fn glasso_objective(precision: &DMatrix<f64>, cov: &DMatrix<f64>, lambda_eff: f64) -> Result<f64> {
    let log_det = linalg::log_det_spd(precision)?;
    let trace = precision.component_mul(cov).sum();
    let p = precision.nrows();
    let mut off = 0.0;
    for j in 0..p {
        for i in 0..p {
            if i != j {
                off += precision[(i, j)].abs();
            }
        }
    }
    Ok(-0.5 * log_det + 0.5 * trace + lambda_eff * off)
}

/// Largest violation of the optimality conditions over free coordinates.
pub fn kkt_residual(precision: &DMatrix<f64>, cov: &DMatrix<f64>, lambda_eff: f64, zeros: &ZeroEdgeSet) -> Result<f64> {
    let w = linalg::inverse_spd(precision).map_err(|_| Error::Numerical("estimate is not positive definite".into()))?;
    let rho = 2.0 * lambda_eff;
    let p = precision.nrows();
    let mut worst = 0.0_f64;
    for m in 0..p {
        for l in 0..p {
            let gap = cov[(l, m)] - w[(l, m)];
            let r = if l == m {
                gap.abs()
            } else if zeros.contains(l, m) {
                0.0
            } else if precision[(l, m)] != 0.0 {
                (gap + rho * precision[(l, m)].signum()).abs()
            } else {
                (gap.abs() - rho).max(0.0)
            };
            worst = worst.max(r);
        }
    }
    Ok(worst)
}

fn validate(cov: &DMatrix<f64>, lambda_eff: f64, zeros: &ZeroEdgeSet) -> Result<()> {
    if !cov.is_square() || cov.nrows() == 0 {
        return Err(Error::InvalidInput("covariance must be a non-empty square matrix".into()));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("covariance has non-finite entries".into()));
    }
    if linalg::max_asymmetry(cov) > 1e-10 * (1.0 + cov.amax()) {
        return Err(Error::InvalidInput("covariance is not symmetric".into()));
    }
    if let Some(j) = (0..cov.nrows()).find(|&j| !(cov[(j, j)] > 0.0)) {
        return Err(Error::InvalidInput(format!("covariance diagonal entry {j} is {}", cov[(j, j)])));
    }
    if !(lambda_eff >= 0.0 && lambda_eff.is_finite()) {
        return Err(Error::InvalidInput(format!("penalty {lambda_eff} must be finite and non-negative")));
    }
    if zeros.max_index().is_some_and(|m| m >= cov.nrows()) {
        return Err(Error::InvalidInput("zero-edge set refers to a feature beyond p".into()));
    }
    Ok(())
}

pub fn glasso_fit(cov: &DMatrix<f64>, lambda_eff: f64, zeros: &ZeroEdgeSet, tol: f64) -> Result<GlassoSolution> {
    glasso_fit_warm(
        cov,
        lambda_eff,
        zeros,
        GlassoOptions {
            tol,
            ..GlassoOptions::default()
        },
        None,
    )
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Blockwise coordinate descent, optionally warm-started from a previous
/// estimate. The result never has a larger objective than a valid warm
/// start.
pub fn glasso_fit_warm(
    cov: &DMatrix<f64>,
    lambda_eff: f64,
    zeros: &ZeroEdgeSet,
    options: GlassoOptions,
    warm: Option<&DMatrix<f64>>,
) -> Result<GlassoSolution> {
    validate(cov, lambda_eff, zeros)?;
    let p = cov.nrows();
    let mut s = linalg::symmetrize(cov);
    let mut jitter = 0.0;
    if !linalg::is_positive_definite(&s) {
        jitter = 1e-8 * s.diagonal().mean();
        for j in 0..p {
            s[(j, j)] += jitter;
        }
    }
    let rho = 2.0 * lambda_eff;

    let warm = warm.filter(|t| {
        t.shape() == (p, p) && linalg::is_positive_definite(t) && zeros.iter().all(|(l, m)| t[(l, m)] == 0.0 && t[(m, l)] == 0.0)
    });

    let free: Vec<Vec<usize>> = (0..p)
        .map(|j| (0..p).filter(|&k| k != j && !zeros.contains(j, k)).collect())
        .collect();
    let cold = || (s.clone(), DMatrix::zeros(p, p));
    // Block descent from a warm start is not guaranteed to stay positive
    // definite; fall back to the cold start.
    let (theta, residual, sweeps) = match warm {
        Some(t) => {
            let mut w = linalg::inverse_spd(t)?;
            let beta = DMatrix::from_fn(p, p, |k, j| if k == j { 0.0 } else { -t[(k, j)] / t[(j, j)] });
            for j in 0..p {
                w[(j, j)] = s[(j, j)];
            }
            match block_descent(&s, rho, lambda_eff, zeros, &free, options, w, beta) {
                Ok(r) => r,
                Err(_) => {
                    log::debug!("glasso: warm start failed at λ = {lambda_eff:e}, restarting cold");
                    let (w, beta) = cold();
                    block_descent(&s, rho, lambda_eff, zeros, &free, options, w, beta)?
                }
            }
        }
        None => {
            let (w, beta) = cold();
            block_descent(&s, rho, lambda_eff, zeros, &free, options, w, beta)?
        }
    };
    let objective = glasso_objective(&theta, &s, lambda_eff)?;
    let mut solution = GlassoSolution {
        precision: theta,
        objective,
        kkt_residual: residual,
        iterations: sweeps,
        jitter,
    };
    if let Some(t) = warm {
        let warm_obj = glasso_objective(t, &s, lambda_eff)?;
        if warm_obj < solution.objective {
            solution = GlassoSolution {
                precision: t.clone(),
                objective: warm_obj,
                kkt_residual: kkt_residual(t, &s, lambda_eff, zeros)?,
                iterations: sweeps,
                jitter,
            };
        }
    }
    Ok(solution)
}

/// Sweeps of column-wise lasso updates on the working covariance `w` (with
/// regression coefficients `beta`, column j regressing j on the rest) until
/// the KKT residual meets the tolerance. Returns `(Θ, residual, sweeps)`.
#[allow(clippy::too_many_arguments)]
fn block_descent(
    s: &DMatrix<f64>,
    rho: f64,
    lambda_eff: f64,
    zeros: &ZeroEdgeSet,
    free: &[Vec<usize>],
    options: GlassoOptions,
    mut w: DMatrix<f64>,
    mut beta: DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64, usize)> {
    let p = s.nrows();
    let inner_tol = 0.05 * options.tol;
    let mut v = vec![0.0; p];
    let mut last_residual = f64::INFINITY;

    for sweep in 1..=options.max_sweeps {
        for j in 0..p {
            // v = W11 β
            v.iter_mut().for_each(|x| *x = 0.0);
            for &k in &free[j] {
                let b = beta[(k, j)];
                if b != 0.0 {
                    let wk = &w.as_slice()[k * p..(k + 1) * p];
                    for (vi, wik) in v.iter_mut().zip(wk) {
                        *vi += wik * b;
                    }
                }
            }
            let mut full_pass = true;
            for _ in 0..10_000 {
                let mut max_step = 0.0_f64;
                for &k in &free[j] {
                    let old = beta[(k, j)];
                    if !full_pass && old == 0.0 {
                        continue;
                    }
                    let wkk = w[(k, k)];
                    let r = s[(k, j)] - (v[k] - wkk * old);
                    let new = soft_threshold(r, rho) / wkk;
                    if new != old {
                        let delta = new - old;
                        let wk = &w.as_slice()[k * p..(k + 1) * p];
                        for (vi, wik) in v.iter_mut().zip(wk) {
                            *vi += wik * delta;
                        }
                        beta[(k, j)] = new;
                        max_step = max_step.max((delta * wkk).abs());
                    }
                }
                if max_step <= inner_tol {
                    if full_pass {
                        break;
                    }
                    full_pass = true;
                } else {
                    full_pass = false;
                }
            }
            for k in 0..p {
                if k != j {
                    w[(k, j)] = v[k];
                    w[(j, k)] = v[k];
                }
            }
        }

        let theta = assemble(&w, &beta, zeros);
        let residual = kkt_residual(&theta, s, lambda_eff, zeros).unwrap_or(f64::INFINITY);
        last_residual = residual;
        if residual <= options.tol {
            return Ok((theta, residual, sweep));
        }
    }
    Err(Error::GlassoNonConvergence {
        iterations: options.max_sweeps,
        residual: last_residual,
    })
}

fn assemble(w: &DMatrix<f64>, beta: &DMatrix<f64>, zeros: &ZeroEdgeSet) -> DMatrix<f64> {
    let p = w.nrows();
    let mut theta = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut dot = 0.0;
        for k in 0..p {
            if k != j {
                dot += w[(k, j)] * beta[(k, j)];
            }
        }
        let tjj = 1.0 / (w[(j, j)] - dot);
        theta[(j, j)] = tjj;
        for k in 0..p {
            if k != j {
                theta[(k, j)] = -beta[(k, j)] * tjj;
            }
        }
    }
    let mut sym = linalg::symmetrize(&theta);
    for v in sym.iter_mut() {
        // canonical +0.0
        *v += 0.0;
    }
    for (l, m) in zeros.iter() {
        sym[(l, m)] = 0.0;
        sym[(m, l)] = 0.0;
    }
    sym
}

/// Bisection on `log λ` for a solution whose off-diagonal density is within
/// ±10% (relative) of `target`; returns the closest solution found after 30
/// steps otherwise.
pub fn fit_density(cov: &DMatrix<f64>, target: f64, zeros: &ZeroEdgeSet, options: GlassoOptions) -> Result<(f64, GlassoSolution)> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::InvalidInput(format!("target density {target} must lie in (0, 1]")));
    }
    validate(cov, 0.0, zeros)?;
    let p = cov.nrows();
    let mut top = 0.0_f64;
    for m in 0..p {
        for l in 0..m {
            top = top.max(cov[(l, m)].abs());
        }
    }
    let within = |d: f64| (d - target).abs() <= 0.1 * target;
    if top == 0.0 {
        let sol = glasso_fit_warm(cov, 0.0, zeros, options, None)?;
        return Ok((0.0, sol));
    }
    let (mut lo, mut hi) = ((top * 1e-6).ln(), (top * 0.5).ln());
    let mut warm: Option<DMatrix<f64>> = None;
    let mut best: Option<(f64, GlassoSolution)> = None;
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        let sol = glasso_fit_warm(cov, mid.exp(), zeros, options, warm.as_ref())?;
        let d = edge_density(&sol.precision);
        let closer = best
            .as_ref()
            .is_none_or(|(_, b)| (d - target).abs() < (edge_density(&b.precision) - target).abs());
        warm = Some(sol.precision.clone());
        if closer {
            best = Some((mid.exp(), sol));
        }
        if within(d) {
            break;
        }
        if d > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.expect("at least one bisection step"))
}

/// Number of nonzero strictly-upper-triangular entries.
pub fn count_edges(precision: &DMatrix<f64>) -> usize {
    let p = precision.nrows();
    (0..p).flat_map(|m| (0..m).map(move |l| (l, m))).filter(|&(l, m)| precision[(l, m)] != 0.0).count()
}

/// Fraction of nonzero off-diagonal pairs among `C(p, 2)`.
pub fn edge_density(precision: &DMatrix<f64>) -> f64 {
    let p = precision.nrows();
    if p < 2 {
        return 0.0;
    }
    count_edges(precision) as f64 / (p * (p - 1) / 2) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_cov(seed: u64, p: usize, n: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let mix = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { rng.random_range(-0.4..0.4) });
        let y = x * mix;
        y.tr_mul(&y) / n as f64
    }

    #[test]
    fn unpenalized_solution_is_the_inverse() {
        let cov = random_cov(1, 3, 50);
        let sol = glasso_fit(&cov, 0.0, &ZeroEdgeSet::new(), 1e-9).unwrap();
        let inv = linalg::inverse_spd(&cov).unwrap();
        assert!((sol.precision - inv).amax() < 1e-6);
    }

    #[test]
    fn huge_penalty_is_diagonal() {
        let cov = random_cov(2, 5, 40);
        let sol = glasso_fit(&cov, 1e6, &ZeroEdgeSet::new(), 1e-6).unwrap();
        for j in 0..5 {
            for k in 0..5 {
                if j == k {
                    assert_eq!(sol.precision[(j, j)], 1.0 / cov[(j, j)]);
                } else {
                    assert_eq!(sol.precision[(j, k)].to_bits(), 0.0_f64.to_bits());
                }
            }
        }
    }

    #[test]
    fn two_by_two_grid_search() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let lambda = 0.1;
        let sol = glasso_fit(&cov, lambda, &ZeroEdgeSet::new(), 1e-9).unwrap();
        // symmetric problem: Θ = [[a, b], [b, a]]
        let f = |a: f64, b: f64| -0.5 * (a * a - b * b).ln() + 0.5 * (2.0 * a + b) + lambda * 2.0 * b.abs();
        let mut best = f64::INFINITY;
        let mut a: f64 = 0.5;
        while a <= 3.0 {
            let mut b: f64 = -1.5;
            while b <= 1.5 {
                if a > b.abs() {
                    best = best.min(f(a, b));
                }
                b += 1e-3;
            }
            a += 1e-3;
        }
        assert!((sol.objective - best).abs() < 1e-4, "{} vs {best}", sol.objective);
        assert!(sol.objective <= best + 1e-9);
    }

    #[test]
    fn objective_matches_eigen_evaluation() {
        let theta = random_cov(3, 4, 30) + DMatrix::identity(4, 4) * 0.1;
        let cov = random_cov(4, 4, 30);
        let eig = SymmetricEigen::new(theta.clone()).eigenvalues;
        let log_det: f64 = eig.iter().map(|e: &f64| e.ln()).sum();
        let mut trace = 0.0;
        for i in 0..4 {
            for k in 0..4 {
                trace += theta[(i, k)] * cov[(k, i)];
            }
        }
        let mut off = 0.0;
        for i in 0..4 {
            for k in 0..4 {
                if i != k {
                    off += theta[(i, k)].abs();
                }
            }
        }
        let expected = -0.5 * log_det + 0.5 * trace + 0.3 * off;
        assert!((glasso_objective(&theta, &cov, 0.3).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn objective_trivial_values() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert!((glasso_objective(&i3, &i3, 0.0).unwrap() - 1.5).abs() < 1e-15);
        assert!((glasso_objective(&i2, &i2, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(glasso_objective(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), &i2, 0.0).is_err());
    }

    #[test]
    fn pinned_pairs_are_exact_zeros() {
        let cov = random_cov(5, 6, 80);
        let zeros = ZeroEdgeSet::from_pairs([(0, 1), (2, 5), (4, 3)], 6).unwrap();
        for &lambda in &[0.0, 0.01, 0.1] {
            let sol = glasso_fit(&cov, lambda, &zeros, 1e-7).unwrap();
            for (l, m) in zeros.iter() {
                assert_eq!(sol.precision[(l, m)].to_bits(), 0u64);
                assert_eq!(sol.precision[(m, l)].to_bits(), 0u64);
            }
            assert!(sol.kkt_residual <= 1e-7);
            assert!(linalg::max_asymmetry(&sol.precision) <= 1e-12);
            assert!(linalg::is_positive_definite(&sol.precision));
        }
    }

    fn chain_cov(seed: u64, p: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = DMatrix::identity(p, p);
        for j in 1..p {
            let w = rng.random_range(0.2..0.45) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            theta[(j - 1, j)] = w;
            theta[(j, j - 1)] = w;
        }
        linalg::inverse_spd(&theta).unwrap()
    }

    #[test]
    fn path_is_monotone_in_edges() {
        for seed in 0..10 {
            let cases = [chain_cov(seed, 8), random_cov(30 + seed, 3, 40), random_cov(50 + seed, 2, 20)];
            for cov in cases {
                let mut last = usize::MAX;
                for k in 0..20 {
                    let lambda = 1e-3 * 10f64.powf(k as f64 / 5.0);
                    let sol = glasso_fit(&cov, lambda, &ZeroEdgeSet::new(), 1e-9).unwrap();
                    let edges = count_edges(&sol.precision);
                    assert!(edges <= last, "seed {seed} λ {lambda}: {edges} > {last}");
                    last = edges;
                }
            }
        }
    }

    #[test]
    fn support_can_regrow_at_optimality() {
        // an entry crossing zero leaves the support and returns
        let cov = random_cov(13, 8, 60);
        let counts: Vec<usize> = [0.00251, 0.00398]
            .iter()
            .map(|&lambda| {
                let sol = glasso_fit(&cov, lambda, &ZeroEdgeSet::new(), 1e-10).unwrap();
                assert!(sol.kkt_residual <= 1e-10);
                count_edges(&sol.precision)
            })
            .collect();
        assert_eq!(counts, vec![27, 28]);
    }

    #[test]
    fn warm_start_never_worse() {
        let cov = random_cov(20, 6, 50);
        let first = glasso_fit(&cov, 0.05, &ZeroEdgeSet::new(), 1e-8).unwrap();
        let cov2 = random_cov(21, 6, 50);
        let warm_obj = glasso_objective(&first.precision, &cov2, 0.07).unwrap();
        let sol = glasso_fit_warm(&cov2, 0.07, &ZeroEdgeSet::new(), GlassoOptions::default(), Some(&first.precision)).unwrap();
        assert!(sol.objective <= warm_obj + 1e-9);
        let cold = glasso_fit(&cov2, 0.07, &ZeroEdgeSet::new(), 1e-8).unwrap();
        assert!((cold.objective - sol.objective).abs() < 1e-8);
    }

    #[test]
    fn bad_inputs() {
        let mut cov = DMatrix::identity(3, 3);
        cov[(1, 1)] = 0.0;
        assert!(matches!(glasso_fit(&cov, 0.1, &ZeroEdgeSet::new(), 1e-6), Err(Error::InvalidInput(_))));
        assert!(ZeroEdgeSet::from_pairs([(1, 1)], 3).is_err());
        assert!(ZeroEdgeSet::from_pairs([(1, 4)], 3).is_err());
    }

    #[test]
    fn rank_deficient_covariance_gets_jitter() {
        let v = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, -1.0]);
        let cov = &v * v.transpose() + DMatrix::from_diagonal_element(3, 3, 0.0);
        let sol = glasso_fit(&cov, 0.2, &ZeroEdgeSet::new(), 1e-6).unwrap();
        assert!(sol.jitter > 0.0);
        assert!(linalg::is_positive_definite(&sol.precision));
    }

    /// Instances where block descent from the warm start never reaches a
    /// positive definite iterate.
    #[test]
    fn warm_start_failure_falls_back_to_cold() {
        for seed in [74u64, 81, 109, 124, 129] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = rng.random_range(3..9);
            let a = DMatrix::from_fn(2 * p, p, |_, _| rng.random_range(-1.0..1.0));
            let s = a.tr_mul(&a) / (2 * p) as f64;
            let b = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
            let t = b.tr_mul(&b) + DMatrix::identity(p, p) * rng.random_range(0.05..1.0);
            let lambda = 10f64.powf(rng.random_range(-3.0..-0.5));
            let sol = glasso_fit_warm(&s, lambda, &ZeroEdgeSet::new(), GlassoOptions::default(), Some(&t)).unwrap();
            assert!(sol.kkt_residual <= 1e-6, "seed {seed}");
            assert!(sol.objective <= glasso_objective(&t, &s, lambda).unwrap());
        }
    }
}
