//! ADMM solver for the per-row variational-mean subproblem
//!
//! ```text
//! min_M  ½ (M − μ)ᵀ Θ (M − μ) + Σ_j [ −Y_j M_j + l·exp(M_j + S_j/2) ]
//! ```
//!
//! The quadratic part is moved onto a copy `N` of `M`, so the `M`-update is
//! `p` independent one-dimensional problems and the `N`-update is a linear
//! solve with `ρI + Θ`. That matrix depends only on the component, so it is
//! factorised once per component per M-step and shared by every row.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::pln::{CountDataset, MixtureParams};
use crate::variational::VariationalState;

/// Bracket for the one-dimensional Newton solves.
const NEWTON_BOUND: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmSettings {
    pub rho: f64,
    pub max_iter: usize,
    /// Relative objective change `δ_M` below which a row is converged.
    pub tol: f64,
    /// Primal tolerance on `‖M − N‖₂ / (1 + ‖M‖₂)`.
    pub primal_tol: f64,
    /// Dual tolerance on `ρ‖N − N_prev‖₂ / (1 + ‖M‖₂)`.
    pub dual_tol: f64,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            rho: 3.0,
            max_iter: 100,
            tol: 1e-6,
            primal_tol: 1e-6,
            dual_tol: 1e-6,
        }
    }
}

/// Cached `(ρI + Θ_g)⁻¹` and `(ρI + Θ_g)⁻¹ Θ_g μ_g` for one component.
#[derive(Debug, Clone)]
pub struct AdmmWorkspace {
    pub settings: AdmmSettings,
    inverse: DMatrix<f64>,
    offset: Vec<f64>,
    theta: DMatrix<f64>,
    mu: Vec<f64>,
}

impl AdmmWorkspace {
    pub fn new(theta: &DMatrix<f64>, mu: &[f64], settings: AdmmSettings) -> Result<Self> {
        if !(settings.rho > 0.0) {
            return Err(Error::Parameter(format!("ADMM step size ρ = {} must be positive", settings.rho)));
        }
        let p = mu.len();
        let shifted = theta + DMatrix::identity(p, p) * settings.rho;
        let chol = linalg::cholesky(&shifted)
            .ok_or_else(|| Error::Parameter("ρI + Θ is not positive definite".into()))?;
        let inverse = linalg::symmetrize(&chol.inverse());
        let mut theta_mu = vec![0.0; p];
        linalg::mat_vec(theta, mu, &mut theta_mu);
        let mut offset = vec![0.0; p];
        linalg::mat_vec(&inverse, &theta_mu, &mut offset);
        Ok(Self {
            settings,
            inverse,
            offset,
            theta: theta.clone(),
            mu: mu.to_vec(),
        })
    }

    /// Step 2: `N = (ρI + Θ)⁻¹ (ρM + α + Θμ)`, the minimiser of the augmented
    /// Lagrangian in `N` for the multiplier update `α ← α + ρ(M − N)`.
    pub fn n_update(&self, m: &[f64], alpha: &[f64]) -> Vec<f64> {
        let rhs: Vec<f64> = m.iter().zip(alpha).map(|(mj, aj)| self.settings.rho * mj + aj).collect();
        let mut n = vec![0.0; m.len()];
        linalg::mat_vec(&self.inverse, &rhs, &mut n);
        n.iter_mut().zip(&self.offset).for_each(|(v, o)| *v += o);
        n
    }
}

/// Root of `−y + l·exp(M + s/2) + α + ρ(M − n_target)` (strictly increasing
/// in `M`), by Newton's method safeguarded with bisection on `[−60, 60]`.
pub fn newton_1d_m(y: f64, l: f64, s: f64, n_target: f64, alpha: f64, rho: f64) -> Result<f64> {
    newton_1d_m_from(y, l, s, n_target, alpha, rho, n_target)
}

pub(crate) fn newton_1d_m_from(y: f64, l: f64, s: f64, n_target: f64, alpha: f64, rho: f64, start: f64) -> Result<f64> {
    if !(s > 0.0 && rho > 0.0 && l > 0.0) {
        return Err(Error::Parameter(format!("invalid Newton inputs: s = {s}, ρ = {rho}, l = {l}")));
    }
    newton_scaled(y, l * (0.5 * s).exp(), n_target, alpha, rho, start).map_err(|e| match e {
        Error::Numerical(msg) => Error::Numerical(format!("{msg} (l = {l}, s = {s})")),
        other => other,
    })
}

/// Same root with `c = l·exp(s/2)` precomputed.
fn newton_scaled(y: f64, c: f64, n_target: f64, alpha: f64, rho: f64, start: f64) -> Result<f64> {
    let grad = |x: f64| -y + c * x.exp() + alpha + rho * (x - n_target);
    let no_root = || {
        Error::Numerical(format!(
            "no root in [−{NEWTON_BOUND}, {NEWTON_BOUND}] for y = {y}, target = {n_target}, α = {alpha}"
        ))
    };
    let (mut lo, mut hi) = (-NEWTON_BOUND, NEWTON_BOUND);
    let (mut lo_checked, mut hi_checked) = (false, false);
    let mut x = if start.is_finite() { start.clamp(lo, hi) } else { 0.0 };
    for _ in 0..300 {
        let ex = c * x.exp();
        let g = -y + ex + alpha + rho * (x - n_target);
        if !g.is_finite() {
            return Err(no_root());
        }
        if g.abs() <= 1e-10 {
            return Ok(x);
        }
        if g > 0.0 {
            hi = x;
            hi_checked = true;
        } else {
            lo = x;
            lo_checked = true;
        }
        let mut next = x - g / (ex + rho);
        if !(next > lo && next < hi) {
            if !hi_checked {
                if grad(hi) < 0.0 {
                    return Err(no_root());
                }
                hi_checked = true;
            }
            if !lo_checked {
                if grad(lo) > 0.0 {
                    return Err(no_root());
                }
                lo_checked = true;
            }
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 4.0 * f64::EPSILON * (1.0 + x.abs()) {
            return Ok(next);
        }
        x = next;
    }
    Err(Error::Numerical(format!("Newton iteration for the mean update stalled at M = {x}")))
}

/// Row objective `L1 + Σ_j L2`.
pub fn m_objective(y: &[f64], l: f64, s_row: &[f64], m_row: &[f64], theta: &DMatrix<f64>, mu: &[f64]) -> f64 {
    let d: Vec<f64> = m_row.iter().zip(mu).map(|(a, b)| a - b).collect();
    0.5 * linalg::quad_form(theta, &d) + poisson_part(y, l, s_row, m_row)
}

fn poisson_part(y: &[f64], l: f64, s_row: &[f64], m_row: &[f64]) -> f64 {
    let log_l = l.ln();
    m_row
        .iter()
        .zip(y)
        .zip(s_row)
        .map(|((&m, &yj), &s)| -yj * m + (m + 0.5 * s + log_l).exp())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RowStatus {
    Converged,
    /// Hit the iteration cap; carries the last relative objective change.
    MaxIter { last_delta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowUpdate {
    pub row: Vec<f64>,
    pub status: RowStatus,
    pub iterations: usize,
    pub primal_residual: f64,
}

/// Runs the ADMM iterations for one row starting from `m_row` with zero
/// multipliers. The returned row never has a larger objective than the
/// incoming one.
pub fn admm_row(y: &[f64], l: f64, s_row: &[f64], m_row: &[f64], ws: &AdmmWorkspace) -> Result<RowUpdate> {
    let p = m_row.len();
    let rho = ws.settings.rho;
    let mut m = m_row.to_vec();
    let mut n = m_row.to_vec();
    let mut alpha = vec![0.0; p];
    let d0: Vec<f64> = n.iter().zip(&ws.mu).map(|(a, b)| a - b).collect();
    let mut last_obj = 0.5 * linalg::quad_form(&ws.theta, &d0) + poisson_part(y, l, s_row, &m);
    let mut status = RowStatus::MaxIter { last_delta: f64::INFINITY };
    let mut iterations = 0;
    let mut primal = 0.0;
    if !(l > 0.0) || s_row.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Parameter(format!("invalid row inputs: l = {l}, S must be positive")));
    }
    let c: Vec<f64> = s_row.iter().map(|&v| l * (0.5 * v).exp()).collect();
    for t in 0..ws.settings.max_iter {
        iterations = t + 1;
        for j in 0..p {
            m[j] = newton_scaled(y[j], c[j], n[j], alpha[j], rho, m[j])
                .map_err(|e| Error::Numerical(format!("coordinate {j}: {e}")))?;
        }
        let n_prev = std::mem::replace(&mut n, ws.n_update(&m, &alpha));
        // Θ(N − μ) = ρ(M − N) + α_old, so L1(N) needs no extra product.
        let quad: f64 = (0..p)
            .map(|j| (n[j] - ws.mu[j]) * (rho * (m[j] - n[j]) + alpha[j]))
            .sum();
        for j in 0..p {
            alpha[j] += rho * (m[j] - n[j]);
        }
        let obj = 0.5 * quad + poisson_part(y, l, s_row, &m);
        let delta = (obj - last_obj).abs() / last_obj.abs().max(f64::MIN_POSITIVE);
        last_obj = obj;
        let gap: f64 = m.iter().zip(&n).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = m.iter().map(|a| a * a).sum::<f64>().sqrt();
        primal = gap / (1.0 + norm);
        let step: f64 = n.iter().zip(&n_prev).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let dual = rho * step / (1.0 + norm);
        status = RowStatus::MaxIter { last_delta: delta };
        if delta <= ws.settings.tol && primal <= ws.settings.primal_tol && dual <= ws.settings.dual_tol {
            status = RowStatus::Converged;
            break;
        }
    }
    let incoming = m_objective(y, l, s_row, m_row, &ws.theta, &ws.mu);
    let outgoing = m_objective(y, l, s_row, &m, &ws.theta, &ws.mu);
    if !(outgoing <= incoming) {
        m = m_row.to_vec();
    }
    Ok(RowUpdate {
        row: m,
        status,
        iterations,
        primal_residual: primal,
    })
}

/// Updates `M_{g,i·}` from the current state.
pub fn m_row_update(
    i: usize,
    g: usize,
    data: &CountDataset,
    state: &VariationalState,
    ws: &AdmmWorkspace,
) -> Result<RowUpdate> {
    let y: Vec<f64> = data.counts().row(i).iter().copied().collect();
    let s: Vec<f64> = state.var_variances[g].row(i).iter().copied().collect();
    let m: Vec<f64> = state.var_means[g].row(i).iter().copied().collect();
    admm_row(&y, data.scaling()[i], &s, &m, ws)
        .map_err(|e| Error::Numerical(format!("M-step row {i}, component {g}: {e}")))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MStepReport {
    /// Number of `(ρI + Θ_g)` factorisations performed.
    pub factorizations: usize,
    pub rows: usize,
    pub unconverged: usize,
    pub max_iterations: usize,
}

/// Full M-step over all `(i, g)`.
pub fn m_step(
    data: &CountDataset,
    params: &MixtureParams,
    state: &VariationalState,
    settings: AdmmSettings,
) -> Result<(Vec<DMatrix<f64>>, MStepReport)> {
    let (n, p) = (data.n(), data.p());
    let mut report = MStepReport::default();
    let mut out = Vec::with_capacity(params.components());
    for g in 0..params.components() {
        let mu: Vec<f64> = params.means[g].iter().copied().collect();
        let ws = AdmmWorkspace::new(&params.precisions[g], &mu, settings)?;
        report.factorizations += 1;
        let rows: Vec<RowUpdate> = (0..n)
            .into_par_iter()
            .map(|i| m_row_update(i, g, data, state, &ws))
            .collect::<Result<Vec<_>>>()?;
        for r in &rows {
            report.rows += 1;
            report.max_iterations = report.max_iterations.max(r.iterations);
            if r.status != RowStatus::Converged {
                report.unconverged += 1;
            }
        }
        out.push(DMatrix::from_fn(n, p, |i, j| rows[i].row[j]));
    }
    if report.unconverged > 0 {
        log::debug!("M-step: {} of {} rows hit the ADMM iteration cap", report.unconverged, report.rows);
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bisection(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn newton_limits() {
        let m = newton_1d_m(0.0, 1e-15, 0.5, 1.7, 0.0, 1.0).unwrap();
        assert!((m - 1.7).abs() < 1e-9);
        let m = newton_1d_m(1.0, 1.0, 1e-12, 3.0, 0.0, 1e-12).unwrap();
        assert!(m.abs() < 1e-9);
    }

    #[test]
    fn newton_matches_bisection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let y = rng.random_range(0..50) as f64;
            let l = rng.random_range(0.1..20.0);
            let s = rng.random_range(0.01..2.0);
            let n = rng.random_range(-3.0..3.0);
            let a = rng.random_range(-2.0..2.0);
            let rho = rng.random_range(0.1..5.0);
            let f = |x: f64| -y + l * (x + 0.5 * s).exp() + a + rho * (x - n);
            let m = newton_1d_m(y, l, s, n, a, rho).unwrap();
            assert!(f(m).abs() <= 1e-10);
            assert!((m - bisection(f, -60.0, 60.0)).abs() < 1e-8);
        }
    }

    #[test]
    fn newton_reports_missing_bracket() {
        let r = newton_1d_m(0.0, 1e-40, 0.5, 500.0, 0.0, 1.0);
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    #[test]
    fn n_update_fixed_point_at_prior_mean() {
        let theta = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.5, -0.2, 0.0, -0.2, 1.0]);
        let mu = [0.4, -1.0, 2.0];
        let ws = AdmmWorkspace::new(&theta, &mu, AdmmSettings::default()).unwrap();
        let n = ws.n_update(&mu, &[0.0; 3]);
        for j in 0..3 {
            assert!((n[j] - mu[j]).abs() < 1e-14);
        }
    }

    fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let r = (5.0_f64.sqrt() - 1.0) / 2.0;
        while b - a > 1e-11 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn weak_coupling_recovers_log_count() {
        // Θ = 10⁻⁶ I, large counts, tiny S: each coordinate ≈ log y.
        let theta = DMatrix::identity(2, 2) * 1e-6;
        let mu = [0.0, 0.0];
        let ws = AdmmWorkspace::new(&theta, &mu, AdmmSettings::default()).unwrap();
        let y = [400.0, 1500.0];
        let s = [1e-6, 1e-6];
        let r = admm_row(&y, 1.0, &s, &[5.0, 6.0], &ws).unwrap();
        for j in 0..2 {
            let f = |m: f64| -y[j] * m + (m + 0.5 * s[j]).exp() + 0.5 * 1e-6 * m * m;
            let oracle = golden_section(f, 0.0, 20.0);
            assert!((r.row[j] - oracle).abs() < 1e-5, "{} vs {}", r.row[j], oracle);
            assert!((r.row[j] - y[j].ln()).abs() < 1e-3);
        }
    }

    #[test]
    fn admm_returns_incoming_row_if_not_better() {
        let theta = DMatrix::identity(2, 2);
        let ws = AdmmWorkspace::new(
            &theta,
            &[0.0, 0.0],
            AdmmSettings {
                max_iter: 1,
                ..AdmmSettings::default()
            },
        )
        .unwrap();
        let y = [3.0, 1.0];
        let s = [0.5, 0.5];
        // start at the exact optimum found with many iterations
        let ws_full = AdmmWorkspace::new(
            &theta,
            &[0.0, 0.0],
            AdmmSettings {
                max_iter: 5000,
                tol: 1e-15,
                primal_tol: 1e-13,
                dual_tol: 1e-13,
                ..AdmmSettings::default()
            },
        )
        .unwrap();
        let best = admm_row(&y, 1.0, &s, &[0.0, 0.0], &ws_full).unwrap().row;
        let r = admm_row(&y, 1.0, &s, &best, &ws).unwrap();
        let f = |m: &[f64]| m_objective(&y, 1.0, &s, m, &theta, &[0.0, 0.0]);
        assert!(f(&r.row) <= f(&best));
    }

    #[test]
    fn primal_residual_small_on_success() {
        let theta = DMatrix::from_row_slice(3, 3, &[1.2, -0.3, 0.0, -0.3, 1.0, 0.2, 0.0, 0.2, 0.9]);
        let mu = [0.5, 1.0, -0.5];
        let ws = AdmmWorkspace::new(&theta, &mu, AdmmSettings::default()).unwrap();
        let r = admm_row(&[2.0, 5.0, 0.0], 1.5, &[0.3, 0.2, 0.8], &[0.0, 0.0, 0.0], &ws).unwrap();
        assert_eq!(r.status, RowStatus::Converged);
        assert!(r.primal_residual <= 1e-6);
    }
}
