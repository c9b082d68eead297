//! Mean-field variational family and its evidence lower bound.
//!
//! Conditional on `Z_i = g`, `X_ij` is `N(M_{g,ij}, S_{g,ij})` independently
//! over `j`, and `Z_i` is categorical with probabilities `P_i·`. The bound
//! decomposes as `ℓ_E = Σ_g ℓ_E^{(g)}` with
//!
//! ```text
//! ℓ_E^{(g)} = Σ_i P_ig { Σ_j [Y_ij M_ij − F1_ij + ½ log S_ij]
//!                        + log π_g − log P_ig + F2_ig }  +  K_g
//! F1_ij = exp(M_ij + S_ij/2 + log l_i)
//! F2_ig = ½ { log det Θ_g − tr(Θ_g Σ_gi) },  Σ_gi = d dᵀ + D(S_i·), d = M_i· − μ_g
//! K_g   = Σ_ij P_ig { −log Y_ij! + Y_ij log l_i }
//! ```
//!
//! Additive constants that do not depend on any parameter (`p/2` per sample)
//! are left out, so this is a lower bound on the log-likelihood shifted by
//! `−n p / 2`.

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::pln::{CountDataset, MixtureParams};

/// Minimum total responsibility `Σ_i P_ig` for a component to be usable.
pub const RESPONSIBILITY_FLOOR: f64 = 1e-8;

/// Upper bound on the exponent inside `F1`.
pub const EXPONENT_CLAMP: f64 = 30.0;

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PStepMode {
    /// `U_ig = F2` only.
    #[default]
    Paper,
    /// `U_ig` includes every `g`-dependent term of the bound; an exact
    /// coordinate maximisation.
    Exact,
}

impl std::str::FromStr for PStepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(PStepMode::Paper),
            "exact" => Ok(PStepMode::Exact),
            other => Err(Error::InvalidInput(format!("unknown p-step mode '{other}'"))),
        }
    }
}

/// Variational parameters η = ({M_g}, {S_g}, P).
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub var_means: Vec<DMatrix<f64>>,
    pub var_variances: Vec<DMatrix<f64>>,
    pub responsibilities: DMatrix<f64>,
}

impl VariationalState {
    pub fn components(&self) -> usize {
        self.var_means.len()
    }

    pub fn component_weight(&self, g: usize) -> f64 {
        self.responsibilities.column(g).iter().sum()
    }

    pub fn validate(&self, n: usize, p: usize) -> Result<()> {
        let g = self.var_means.len();
        if g == 0 || self.var_variances.len() != g || self.responsibilities.shape() != (n, g) {
            return Err(Error::State("inconsistent number of components".into()));
        }
        for k in 0..g {
            if self.var_means[k].shape() != (n, p) || self.var_variances[k].shape() != (n, p) {
                return Err(Error::State(format!("component {k} has wrong shape")));
            }
            if let Some(s) = self.var_variances[k].iter().find(|s| !(s.is_finite() && **s > 0.0)) {
                return Err(Error::State(format!("variational variance {s} in component {k} is not positive")));
            }
            if self.var_means[k].iter().any(|m| !m.is_finite()) {
                return Err(Error::State(format!("non-finite variational mean in component {k}")));
            }
        }
        for i in 0..n {
            let row = self.responsibilities.row(i);
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::State(format!("responsibility row {i} has negative entries")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::State(format!("responsibility row {i} sums to {s}")));
            }
        }
        Ok(())
    }
}

/// Per-component aggregates of the terms of the bound, each already
/// weighted by `P_·g`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboTerms {
    /// `P_·gᵀ (Y ⊙ M_g) 1`
    pub poisson_linear: f64,
    /// `P_·gᵀ F1 1`, entering with a minus sign
    pub poisson_exp: f64,
    /// `P_·gᵀ (½ log S_g) 1`
    pub entropy: f64,
    /// `P_·gᵀ (log π_g − log P_·g)`
    pub assignment: f64,
    /// `P_·gᵀ F2`
    pub gaussian: f64,
    /// `K_g(Y)`
    pub constant: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.poisson_linear - self.poisson_exp + self.entropy + self.assignment + self.gaussian + self.constant
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub per_component: Vec<f64>,
    pub total: f64,
    pub terms: Vec<ElboTerms>,
}

/// `F1 = exp(M + S/2 + log l)` with the exponent clamped at [`EXPONENT_CLAMP`].
pub fn f1(log_l: f64, m: f64, s: f64) -> f64 {
    let e = m + 0.5 * s + log_l;
    if e > EXPONENT_CLAMP {
        if !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!("F1 exponent {e:.3} clamped at {EXPONENT_CLAMP}");
        }
        EXPONENT_CLAMP.exp()
    } else {
        e.exp()
    }
}

/// `F2 = ½{log det Θ − (dᵀΘd + Σ_j Θ_jj S_j)}`.
pub(crate) fn f2(theta: &DMatrix<f64>, log_det: f64, m_row: &[f64], s_row: &[f64], mu: &DVector<f64>) -> f64 {
    let d: Vec<f64> = m_row.iter().zip(mu.iter()).map(|(m, u)| m - u).collect();
    let diag: f64 = s_row.iter().enumerate().map(|(j, s)| theta[(j, j)] * s).sum();
    0.5 * (log_det - linalg::quad_form(theta, &d) - diag)
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Row terms shared by the bound and the exact P-step:
/// `(Σ_j Y M, Σ_j F1, Σ_j ½ log S)`.
fn poisson_row_terms(data: &CountDataset, state: &VariationalState, g: usize, i: usize) -> (f64, f64, f64) {
    let log_l = data.scaling()[i].ln();
    let m = &state.var_means[g];
    let s = &state.var_variances[g];
    let y = data.counts();
    let mut lin = 0.0;
    let mut ex = 0.0;
    let mut ent = 0.0;
    for j in 0..data.p() {
        let (mij, sij) = (m[(i, j)], s[(i, j)]);
        lin += y[(i, j)] * mij;
        ex += f1(log_l, mij, sij);
        ent += 0.5 * sij.ln();
    }
    (lin, ex, ent)
}

fn check_shapes(data: &CountDataset, params: &MixtureParams, state: &VariationalState) -> Result<()> {
    if params.dim() != data.p() || params.components() != state.components() {
        return Err(Error::InvalidInput("parameter, state and data dimensions disagree".into()));
    }
    state.validate(data.n(), data.p())
}

fn log_dets(params: &MixtureParams) -> Result<Vec<f64>> {
    params
        .precisions
        .iter()
        .enumerate()
        .map(|(g, t)| {
            linalg::log_det_spd(t).map_err(|_| Error::Parameter(format!("precision {g} is not positive definite")))
        })
        .collect()
}

/// Evaluates the bound and its per-component decomposition.
pub fn elbo(data: &CountDataset, params: &MixtureParams, state: &VariationalState) -> Result<ElboBreakdown> {
    check_shapes(data, params, state)?;
    let log_dets = log_dets(params)?;
    let n = data.n();
    let mut terms = Vec::with_capacity(params.components());
    for g in 0..params.components() {
        let theta = &params.precisions[g];
        let mu = &params.means[g];
        let log_pi = params.proportions[g].ln();
        let rows: Vec<ElboTerms> = (0..n)
            .into_par_iter()
            .map(|i| {
                let w = state.responsibilities[(i, g)];
                if w == 0.0 {
                    return ElboTerms::default();
                }
                let (lin, ex, ent) = poisson_row_terms(data, state, g, i);
                let gauss = f2(theta, log_dets[g], &row(&state.var_means[g], i), &row(&state.var_variances[g], i), mu);
                let log_l = data.scaling()[i].ln();
                let y_sum = data.row_total(i);
                ElboTerms {
                    poisson_linear: w * lin,
                    poisson_exp: w * ex,
                    entropy: w * ent,
                    assignment: w * (log_pi - w.ln()),
                    gaussian: w * gauss,
                    constant: w * (y_sum * log_l - data.row_log_factorial(i)),
                }
            })
            .collect();
        let mut acc = ElboTerms::default();
        for r in &rows {
            acc.poisson_linear += r.poisson_linear;
            acc.poisson_exp += r.poisson_exp;
            acc.entropy += r.entropy;
            acc.assignment += r.assignment;
            acc.gaussian += r.gaussian;
            acc.constant += r.constant;
        }
        terms.push(acc);
    }
    let per_component: Vec<f64> = terms.iter().map(ElboTerms::total).collect();
    let total = per_component.iter().sum();
    Ok(ElboBreakdown {
        per_component,
        total,
        terms,
    })
}

/// Responsibility update `P_ig ∝ π_g exp(U_ig)`, computed with
/// max-subtraction.
pub fn p_step(data: &CountDataset, params: &MixtureParams, state: &VariationalState, mode: PStepMode) -> Result<DMatrix<f64>> {
    check_shapes(data, params, state)?;
    let log_dets = log_dets(params)?;
    let big_g = params.components();
    let rows: Vec<Vec<f64>> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let scores: Vec<f64> = (0..big_g)
                .map(|g| {
                    let mut u = f2(
                        &params.precisions[g],
                        log_dets[g],
                        &row(&state.var_means[g], i),
                        &row(&state.var_variances[g], i),
                        &params.means[g],
                    );
                    if mode == PStepMode::Exact {
                        let (lin, ex, ent) = poisson_row_terms(data, state, g, i);
                        u += lin - ex + ent;
                    }
                    params.proportions[g].ln() + u
                })
                .collect();
            softmax(&scores).ok_or_else(|| Error::Numerical(format!("responsibility row {i} has no finite score")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(data.n(), big_g, |i, g| rows[i][g]))
}

pub(crate) fn softmax(scores: &[f64]) -> Option<Vec<f64>> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || scores.iter().any(|s| s.is_nan()) {
        return None;
    }
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Some(exps.into_iter().map(|e| e / total).collect())
}

/// `π_g = n⁻¹ Σ_i P_ig`.
pub fn pi_step(state: &VariationalState) -> Vec<f64> {
    let n = state.responsibilities.nrows() as f64;
    (0..state.components())
        .map(|g| state.component_weight(g) / n)
        .collect()
}

fn checked_weight(state: &VariationalState, g: usize) -> Result<f64> {
    let w = state.component_weight(g);
    if !(w > RESPONSIBILITY_FLOOR) {
        return Err(Error::Degenerate { component: g, weight: w });
    }
    Ok(w)
}

/// `μ_g = Σ_i P_ig M_{g,i·} / Σ_i P_ig`.
pub fn mu_step(state: &VariationalState) -> Result<Vec<DVector<f64>>> {
    (0..state.components())
        .map(|g| {
            let w = checked_weight(state, g)?;
            let weights = state.responsibilities.column(g);
            let m = &state.var_means[g];
            Ok(DVector::from_iterator(
                m.ncols(),
                (0..m.ncols()).map(|j| m.column(j).iter().zip(weights.iter()).map(|(a, b)| a * b).sum::<f64>() / w),
            ))
        })
        .collect()
}

/// Minimiser over `S > 0` of `a·exp(S/2) + ½θS − ½log S`, with `a = l·exp(M)`.
///
/// Stationarity `½a·exp(S/2) + ½θ − 1/(2S) = 0` has its root in
/// `[1/(θ + a·exp(1/(2θ))), 1/θ]`; safeguarded Newton inside that bracket.
pub fn solve_variance(a: f64, theta_jj: f64, warm: f64) -> Result<f64> {
    if !(theta_jj > 0.0 && theta_jj.is_finite()) {
        return Err(Error::Parameter(format!("diagonal precision entry {theta_jj} is not positive")));
    }
    if !(a >= 0.0 && a.is_finite()) {
        return Err(Error::Numerical(format!("Poisson rate {a} is not finite")));
    }
    let grad = |s: f64| 0.5 * a * (0.5 * s).exp() + 0.5 * theta_jj - 0.5 / s;
    let mut hi = 1.0 / theta_jj;
    let cap = a * (0.5 / theta_jj).exp();
    let mut lo = if cap.is_finite() { 1.0 / (theta_jj + cap) } else { f64::MIN_POSITIVE };
    let mut s = if warm.is_finite() && warm > lo && warm < hi { warm } else { 0.5 * (lo + hi) };
    for _ in 0..500 {
        let g = grad(s);
        if g.abs() <= 1e-8 {
            return Ok(s);
        }
        if g > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        let curvature = 0.25 * a * (0.5 * s).exp() + 0.5 / (s * s);
        let next = s - g / curvature;
        s = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            return Ok(s);
        }
    }
    Err(Error::Numerical(format!("variance update failed to converge (a = {a}, θ_jj = {theta_jj})")))
}

/// Coordinate-wise variance update for every `(i, g, j)`.
pub fn s_step(data: &CountDataset, params: &MixtureParams, state: &VariationalState) -> Result<Vec<DMatrix<f64>>> {
    check_shapes(data, params, state)?;
    let (n, p) = (data.n(), data.p());
    (0..params.components())
        .map(|g| {
            let theta = &params.precisions[g];
            let m = &state.var_means[g];
            let s_old = &state.var_variances[g];
            let rows: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let l = data.scaling()[i];
                    (0..p)
                        .map(|j| {
                            solve_variance(l * m[(i, j)].exp(), theta[(j, j)], s_old[(i, j)])
                                .map_err(|e| Error::Numerical(format!("S-step at (i={i}, g={g}, j={j}): {e}")))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
        })
        .collect()
}

/// `Σ̂_g = Σ_i P_ig {(M_i − μ)(M_i − μ)ᵀ + D(S_i)} / Σ_i P_ig`.
pub fn weighted_covariance(state: &VariationalState, means: &[DVector<f64>], g: usize) -> Result<DMatrix<f64>> {
    let w = checked_weight(state, g)?;
    let m = &state.var_means[g];
    let s = &state.var_variances[g];
    let (n, p) = m.shape();
    let mu = &means[g];
    let weights = state.responsibilities.column(g);
    let scaled = DMatrix::from_fn(n, p, |i, j| weights[i].sqrt() * (m[(i, j)] - mu[j]));
    let mut cov = scaled.tr_mul(&scaled);
    for j in 0..p {
        let extra: f64 = s.column(j).iter().zip(weights.iter()).map(|(a, b)| a * b).sum();
        cov[(j, j)] += extra;
    }
    cov /= w;
    Ok(linalg::symmetrize(&cov))
}
