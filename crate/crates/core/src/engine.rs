//! Variational EM driver: initialisation, the block-update loop, and
//! penalty selection by ICL or by target network density.
//!
//! Penalties are on the scale of the penalised bound
//! `ℓ_E − Σ_g λ_g ‖Θ_g‖₁,off`; the graphical lasso for component `g` then
//! runs with `λ_g / Σ_i P_ig`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{self, AdmmSettings};
use crate::assign::match_components;
use crate::error::{Error, Result};
use crate::glasso::{self, GlassoOptions, ZeroEdgeSet};
use crate::kmeans::kmeans;
use crate::pln::{CountDataset, MixtureParams};
use crate::rng::{derive_seed, TAG_KMEANS};
use crate::variational::{self, ElboBreakdown, PStepMode, VariationalState, RESPONSIBILITY_FLOOR};

/// Weight of the non-assigned components in the initial responsibilities.
const INIT_SMOOTHING: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub components: usize,
    pub lambda: f64,
    /// Per-component penalties; overrides `lambda` when set.
    pub component_lambdas: Option<Vec<f64>>,
    pub zero_edges: ZeroEdgeSet,
    pub max_outer: usize,
    pub min_outer: usize,
    pub tol_elbo: f64,
    pub tol_sign: f64,
    pub admm: AdmmSettings,
    pub glasso: GlassoOptions,
    pub p_step_mode: PStepMode,
    pub seed: u64,
    pub kmeans_restarts: usize,
}

impl FitConfig {
    pub fn new(components: usize, lambda: f64) -> Self {
        Self {
            components,
            lambda,
            component_lambdas: None,
            zero_edges: ZeroEdgeSet::new(),
            max_outer: 100,
            min_outer: 1,
            tol_elbo: 1e-6,
            tol_sign: 1e-4,
            admm: AdmmSettings::default(),
            glasso: GlassoOptions::default(),
            p_step_mode: PStepMode::Paper,
            seed: 0,
            kmeans_restarts: 10,
        }
    }

    pub fn lambdas(&self) -> Vec<f64> {
        match &self.component_lambdas {
            Some(l) => l.clone(),
            None => vec![self.lambda; self.components],
        }
    }

    fn with_lambdas(&self, lambdas: Vec<f64>) -> Self {
        Self {
            component_lambdas: Some(lambdas),
            ..self.clone()
        }
    }

    fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            component_lambdas: None,
            ..self.clone()
        }
    }

    pub fn validate(&self, data: &CountDataset) -> Result<()> {
        if self.components == 0 {
            return Err(Error::InvalidInput("number of components must be at least 1".into()));
        }
        if self.components > data.n() {
            return Err(Error::InvalidInput(format!("{} components for {} samples", self.components, data.n())));
        }
        let lambdas = self.lambdas();
        if lambdas.len() != self.components || lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidInput("penalties must be finite, non-negative, one per component".into()));
        }
        if !(self.tol_elbo > 0.0 && self.tol_sign > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if self.min_outer == 0 || self.max_outer < self.min_outer {
            return Err(Error::InvalidInput("need max_outer >= min_outer >= 1".into()));
        }
        if self.zero_edges.max_index().is_some_and(|m| m >= data.p()) {
            return Err(Error::InvalidInput("zero-edge set refers to a feature beyond p".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FitStatus {
    Converged,
    MaxIter,
    /// A component lost all responsibility; results are from the last
    /// complete iteration.
    Degenerate { component: usize, weight: f64, iteration: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub elbo: f64,
    pub penalized_objective: f64,
    pub delta_elbo: f64,
    pub delta_sign: f64,
    pub factorizations: usize,
    pub admm_unconverged: usize,
    pub glasso_sweeps: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: MixtureParams,
    pub state: VariationalState,
    pub lambdas: Vec<f64>,
    pub elbo: ElboBreakdown,
    pub trace: Vec<IterationRecord>,
    pub status: FitStatus,
}

impl FitResult {
    /// Hard assignment by largest responsibility.
    pub fn labels(&self) -> Vec<usize> {
        argmax_rows(&self.state.responsibilities)
    }

    pub fn penalized_objective(&self) -> f64 {
        penalized_objective(self.elbo.total, &self.params.precisions, &self.lambdas)
    }

    pub fn densities(&self) -> Vec<f64> {
        self.params.precisions.iter().map(glasso::edge_density).collect()
    }
}

pub(crate) fn argmax_rows(m: &DMatrix<f64>) -> Vec<usize> {
    (0..m.nrows())
        .map(|i| {
            let mut best = 0;
            for g in 1..m.ncols() {
                if m[(i, g)] > m[(i, best)] {
                    best = g;
                }
            }
            best
        })
        .collect()
}

fn off_l1(theta: &DMatrix<f64>) -> f64 {
    let p = theta.nrows();
    let mut total = 0.0;
    for j in 0..p {
        for i in 0..p {
            if i != j {
                total += theta[(i, j)].abs();
            }
        }
    }
    total
}

/// `−ℓ_E + Σ_g λ_g Σ_{l≠m} |Θ_g,lm|`.
pub fn penalized_objective(elbo_total: f64, precisions: &[DMatrix<f64>], lambdas: &[f64]) -> f64 {
    -elbo_total + precisions.iter().zip(lambdas).map(|(t, l)| l * off_l1(t)).sum::<f64>()
}

/// `max_g Σ_{l<m} |sign Θ_new − sign Θ_old| / C(p, 2)`.
pub fn sign_change(old: &[DMatrix<f64>], new: &[DMatrix<f64>]) -> f64 {
    let mut worst = 0.0_f64;
    for (a, b) in old.iter().zip(new) {
        let p = a.nrows();
        if p < 2 {
            continue;
        }
        let mut total = 0.0;
        for m in 0..p {
            for l in 0..m {
                total += (sign(b[(l, m)]) - sign(a[(l, m)])).abs();
            }
        }
        worst = worst.max(total / (p * (p - 1) / 2) as f64);
    }
    worst
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Ỹ = log(Y + 1) − log l`, row-wise.
pub fn normalized_counts(data: &CountDataset) -> DMatrix<f64> {
    let y = data.counts();
    DMatrix::from_fn(data.n(), data.p(), |i, j| (y[(i, j)] + 1.0).ln() - data.scaling()[i].ln())
}

/// Mean and MLE covariance of the selected rows. A feature with no spread
/// gets unit variance so the graphical lasso stays well posed.
pub(crate) fn sample_moments(x: &DMatrix<f64>, rows: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
    let p = x.ncols();
    let k = rows.len() as f64;
    let mut mean = DVector::zeros(p);
    for &i in rows {
        for j in 0..p {
            mean[j] += x[(i, j)];
        }
    }
    mean /= k;
    let centred = DMatrix::from_fn(rows.len(), p, |r, j| x[(rows[r], j)] - mean[j]);
    let mut cov = centred.tr_mul(&centred) / k;
    for j in 0..p {
        if !(cov[(j, j)] > 0.0) {
            cov[(j, j)] = 1.0;
        }
    }
    (mean, crate::linalg::symmetrize(&cov))
}

/// K-means on `Ỹ`, smoothed hard responsibilities, `M_g = Ỹ`, `S_g = 1`,
/// cluster means and per-cluster graphical lasso.
pub fn initialize(data: &CountDataset, config: &FitConfig) -> Result<(MixtureParams, VariationalState)> {
    config.validate(data)?;
    let (n, p, big_g) = (data.n(), data.p(), config.components);
    let y_t = normalized_counts(data);
    let km = kmeans(&y_t, big_g, config.kmeans_restarts, derive_seed(config.seed, &[TAG_KMEANS]))?;
    let norm = 1.0 + big_g as f64 * INIT_SMOOTHING;
    let responsibilities = DMatrix::from_fn(n, big_g, |i, g| {
        (if km.labels[i] == g { 1.0 } else { 0.0 } + INIT_SMOOTHING) / norm
    });
    let lambdas = config.lambdas();
    let mut means = Vec::with_capacity(big_g);
    let mut covs = Vec::with_capacity(big_g);
    let mut sizes = Vec::with_capacity(big_g);
    for g in 0..big_g {
        let rows: Vec<usize> = (0..n).filter(|&i| km.labels[i] == g).collect();
        let (mean, cov) = sample_moments(&y_t, &rows);
        sizes.push(rows.len() as f64);
        means.push(mean);
        covs.push(cov);
    }
    let precisions = (0..big_g)
        .into_par_iter()
        .map(|g| {
            glasso::glasso_fit_warm(&covs[g], lambdas[g] / sizes[g], &config.zero_edges, config.glasso, None)
                .map(|s| s.precision)
        })
        .collect::<Result<Vec<_>>>()?;
    let state = VariationalState {
        var_means: vec![y_t.clone(); big_g],
        var_variances: vec![DMatrix::from_element(n, p, 1.0); big_g],
        responsibilities,
    };
    let params = MixtureParams::new(variational::pi_step(&state), means, precisions)?;
    Ok((params, state))
}

/// Initialises and runs the block updates; components are reported in
/// decreasing order of mixing proportion.
pub fn fit(data: &CountDataset, config: &FitConfig) -> Result<FitResult> {
    let (params, state) = initialize(data, config)?;
    run(data, config, params, state).map(sort_components)
}

/// Runs the block updates from a given starting point, keeping its
/// component order.
pub fn fit_from(
    data: &CountDataset,
    config: &FitConfig,
    params: MixtureParams,
    state: VariationalState,
) -> Result<FitResult> {
    config.validate(data)?;
    run(data, config, params, state)
}

struct StepOutput {
    record: IterationRecord,
    breakdown: ElboBreakdown,
}

fn outer_step(
    data: &CountDataset,
    config: &FitConfig,
    lambdas: &[f64],
    params: &mut MixtureParams,
    state: &mut VariationalState,
    prev_elbo: f64,
    iteration: usize,
) -> Result<StepOutput> {
    let old_precisions = params.precisions.clone();
    state.responsibilities = variational::p_step(data, params, state, config.p_step_mode)?;
    for g in 0..params.components() {
        let w = state.component_weight(g);
        if !(w > RESPONSIBILITY_FLOOR) {
            return Err(Error::Degenerate { component: g, weight: w });
        }
    }
    params.proportions = variational::pi_step(state);
    let (m, report) = admm::m_step(data, params, state, config.admm)?;
    state.var_means = m;
    state.var_variances = variational::s_step(data, params, state)?;
    params.means = variational::mu_step(state)?;
    let solutions = (0..params.components())
        .into_par_iter()
        .map(|g| {
            let cov = variational::weighted_covariance(state, &params.means, g)?;
            let lambda_eff = lambdas[g] / state.component_weight(g);
            glasso::glasso_fit_warm(&cov, lambda_eff, &config.zero_edges, config.glasso, Some(&params.precisions[g]))
        })
        .collect::<Result<Vec<_>>>()?;
    let glasso_sweeps = solutions.iter().map(|s| s.iterations).sum();
    params.precisions = solutions.into_iter().map(|s| s.precision).collect();
    let breakdown = variational::elbo(data, params, state)?;
    let record = IterationRecord {
        iteration,
        elbo: breakdown.total,
        penalized_objective: penalized_objective(breakdown.total, &params.precisions, lambdas),
        delta_elbo: (breakdown.total - prev_elbo).abs() / prev_elbo.abs(),
        delta_sign: sign_change(&old_precisions, &params.precisions),
        factorizations: report.factorizations,
        admm_unconverged: report.unconverged,
        glasso_sweeps,
    };
    Ok(StepOutput { record, breakdown })
}

fn run(data: &CountDataset, config: &FitConfig, mut params: MixtureParams, mut state: VariationalState) -> Result<FitResult> {
    let lambdas = config.lambdas();
    if params.components() != config.components || params.dim() != data.p() {
        return Err(Error::InvalidInput("starting point does not match the configuration".into()));
    }
    let mut breakdown = variational::elbo(data, &params, &state)?;
    let mut trace = Vec::new();
    let mut status = FitStatus::MaxIter;
    for k in 1..=config.max_outer {
        let snapshot = (params.clone(), state.clone());
        match outer_step(data, config, &lambdas, &mut params, &mut state, breakdown.total, k) {
            Ok(out) => {
                breakdown = out.breakdown;
                let done = k >= config.min_outer
                    && out.record.delta_elbo <= config.tol_elbo
                    && out.record.delta_sign <= config.tol_sign;
                log::debug!(
                    "iteration {k}: elbo {:.6} δL {:.3e} δs {:.3e}",
                    out.record.elbo,
                    out.record.delta_elbo,
                    out.record.delta_sign
                );
                trace.push(out.record);
                if done {
                    status = FitStatus::Converged;
                    break;
                }
            }
            Err(Error::Degenerate { component, weight }) => {
                log::warn!("component {component} degenerate at iteration {k} (weight {weight:e})");
                (params, state) = snapshot;
                status = FitStatus::Degenerate {
                    component,
                    weight,
                    iteration: k,
                };
                break;
            }
            Err(e) => return Err(e.at_iteration(k)),
        }
    }
    Ok(FitResult {
        params,
        state,
        lambdas,
        elbo: breakdown,
        trace,
        status,
    })
}

/// Reorders components by decreasing mixing proportion (stable).
pub fn sort_components(mut fit: FitResult) -> FitResult {
    let big_g = fit.params.components();
    let mut order: Vec<usize> = (0..big_g).collect();
    order.sort_by(|&a, &b| fit.params.proportions[b].total_cmp(&fit.params.proportions[a]));
    permute_components(&mut fit, &order);
    fit
}

/// Puts old component `order[k]` at position `k`.
pub fn permute_components(fit: &mut FitResult, order: &[usize]) {
    fn pick<T: Clone>(v: &[T], order: &[usize]) -> Vec<T> {
        order.iter().map(|&g| v[g].clone()).collect()
    }
    fit.params.proportions = pick(&fit.params.proportions, order);
    fit.params.means = pick(&fit.params.means, order);
    fit.params.precisions = pick(&fit.params.precisions, order);
    fit.state.var_means = pick(&fit.state.var_means, order);
    fit.state.var_variances = pick(&fit.state.var_variances, order);
    let p = fit.state.responsibilities.clone();
    fit.state.responsibilities = DMatrix::from_fn(p.nrows(), order.len(), |i, k| p[(i, order[k])]);
    fit.lambdas = pick(&fit.lambdas, order);
    fit.elbo.per_component = pick(&fit.elbo.per_component, order);
    fit.elbo.terms = pick(&fit.elbo.terms, order);
    if let FitStatus::Degenerate { component, .. } = &mut fit.status {
        *component = order.iter().position(|&g| g == *component).unwrap_or(*component);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IclCount {
    /// Every nonzero entry of `Θ̂_g`, diagonal included.
    #[default]
    AllEntries,
    /// Nonzero off-diagonal pairs `l < m` only.
    OffDiagonalPairs,
}

/// `−2ℓ_E^{(g)} + log(Σ_i P_ig) · s(Θ̂_g)`.
pub fn icl_score(fit: &FitResult, g: usize, count: IclCount) -> Result<f64> {
    let weight = fit.state.component_weight(g);
    if !(weight > 0.0) {
        return Err(Error::Degenerate { component: g, weight });
    }
    let theta = &fit.params.precisions[g];
    let s = match count {
        IclCount::AllEntries => theta.iter().filter(|v| **v != 0.0).count(),
        IclCount::OffDiagonalPairs => glasso::count_edges(theta),
    };
    Ok(-2.0 * fit.elbo.per_component[g] + weight.ln() * s as f64)
}

/// Default ICL grid: 20 log-spaced values over `[10⁻³, 1] · n · max|Σ̂_lm|`
/// with `Σ̂` the covariance of `Ỹ`.
pub fn default_lambda_grid(data: &CountDataset) -> Vec<f64> {
    let y_t = normalized_counts(data);
    let rows: Vec<usize> = (0..data.n()).collect();
    let (_, cov) = sample_moments(&y_t, &rows);
    let p = data.p();
    let mut top = 0.0_f64;
    for m in 0..p {
        for l in 0..m {
            top = top.max(cov[(l, m)].abs());
        }
    }
    let top = if top > 0.0 { top * data.n() as f64 } else { 1.0 };
    (0..20).map(|k| top * 10f64.powf(-3.0 + 3.0 * k as f64 / 19.0)).collect()
}

#[derive(Debug, Clone)]
pub struct IclSelection {
    /// Chosen penalty per component, in the order of `fit`.
    pub lambdas: Vec<f64>,
    pub fit: FitResult,
    /// `(λ, ICL per component)` along the path, components in the order of
    /// the first path fit.
    pub path: Vec<(f64, Vec<f64>)>,
}

/// Fits along `grid` (sparse to dense, warm-started), picks per-component
/// penalties minimising the ICL, then refits. Ties go to the larger penalty.
pub fn select_lambda_icl(data: &CountDataset, config: &FitConfig, grid: &[f64], count: IclCount) -> Result<IclSelection> {
    if grid.is_empty() || grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidInput("penalty grid must be non-empty, finite and non-negative".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let big_g = config.components;

    let mut path: Vec<(f64, FitResult)> = Vec::new();
    let mut last_degenerate = None;
    for &lambda in grid.iter().rev() {
        let cfg = config.with_lambda(lambda);
        let (params, state) = match path.last() {
            Some((_, prev)) => (prev.params.clone(), prev.state.clone()),
            None => initialize(data, &cfg)?,
        };
        let fit = fit_from(data, &cfg, params, state)?;
        if let FitStatus::Degenerate { component, weight, .. } = fit.status {
            log::warn!("fit at λ = {lambda} is degenerate; skipped");
            last_degenerate = Some(Error::Degenerate { component, weight });
            continue;
        }
        path.push((lambda, fit));
    }
    if path.is_empty() {
        return Err(last_degenerate.unwrap_or_else(|| Error::State("no fit along the penalty path".into())));
    }

    let reference = path[0].1.state.responsibilities.clone();
    let mut scores = Vec::with_capacity(path.len());
    for (lambda, fit) in &path {
        let perm = match_components(&reference, &fit.state.responsibilities);
        let icl = (0..big_g).map(|g| icl_score(fit, perm[g], count)).collect::<Result<Vec<_>>>()?;
        scores.push((*lambda, icl));
    }
    // path runs from the largest penalty down, so a strict comparison keeps
    // the sparser choice on ties
    let chosen: Vec<f64> = (0..big_g)
        .map(|g| {
            let mut best = &scores[0];
            for s in &scores[1..] {
                if s.1[g] < best.1[g] {
                    best = s;
                }
            }
            best.0
        })
        .collect();

    let start = &path[0].1;
    let refit = fit_from(data, &config.with_lambdas(chosen), start.params.clone(), start.state.clone())?;
    let fit = sort_components(refit);
    Ok(IclSelection {
        lambdas: fit.lambdas.clone(),
        fit,
        path: scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityStatus {
    Reached,
    StepLimit,
    /// Even the unpenalised fit is sparser than the target.
    Unreachable,
}

#[derive(Debug, Clone)]
pub struct DensitySelection {
    pub lambdas: Vec<f64>,
    pub fit: FitResult,
    pub densities: Vec<f64>,
    pub steps: usize,
    pub status: DensityStatus,
}

const DENSITY_REL_TOL: f64 = 0.10;
const DENSITY_MAX_STEPS: usize = 30;

fn density_ok(d: f64, target: f64) -> bool {
    (d - target).abs() <= DENSITY_REL_TOL * target
}

/// Penalty on the bound's scale giving the target density for a fixed
/// covariance, from the graphical lasso alone.
fn glasso_density_guess(cov: &DMatrix<f64>, weight: f64, target: f64, config: &FitConfig) -> Result<f64> {
    glasso::fit_density(cov, target, &config.zero_edges, config.glasso).map(|(lambda, _)| lambda * weight)
}

/// Searches penalties so the fitted networks have the target fraction of
/// nonzero off-diagonal pairs (within ±10% relative), with one penalty per
/// component or a shared one judged on the mean density.
pub fn select_lambda_density(data: &CountDataset, config: &FitConfig, target: f64, per_component: bool) -> Result<DensitySelection> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::InvalidInput(format!("target density {target} must lie in (0, 1]")));
    }
    if data.p() < 2 {
        return Err(Error::InvalidInput("density selection needs p >= 2".into()));
    }
    let big_g = config.components;
    let slots = if per_component { big_g } else { 1 };

    // starting penalties from the graphical lasso on the initial covariances
    let (params0, state0) = initialize(data, &config.with_lambda(0.0))?;
    let y_t = normalized_counts(data);
    let labels = argmax_rows(&state0.responsibilities);
    let guesses = (0..big_g)
        .map(|g| {
            let rows: Vec<usize> = (0..data.n()).filter(|&i| labels[i] == g).collect();
            let (_, cov) = sample_moments(&y_t, &rows);
            glasso_density_guess(&cov, rows.len() as f64, target, config)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut lam: Vec<f64> = if per_component {
        guesses
    } else {
        vec![(guesses.iter().map(|g| g.max(1e-300).ln()).sum::<f64>() / big_g as f64).exp()]
    };
    let expand = |l: &[f64]| -> Vec<f64> { if per_component { l.to_vec() } else { vec![l[0]; big_g] } };

    let mut lo: Vec<Option<f64>> = vec![None; slots];
    let mut hi: Vec<Option<f64>> = vec![None; slots];
    let mut frozen = vec![false; slots];
    let mut unreachable = false;
    let mut start = {
        let cfg = config.with_lambdas(expand(&lam));
        let mut params = params0;
        params.precisions = initial_precisions(&state0, &y_t, &cfg)?;
        (params, state0)
    };
    let mut steps = 0;
    loop {
        steps += 1;
        let cfg = config.with_lambdas(expand(&lam));
        let fit = fit_from(data, &cfg, start.0.clone(), start.1.clone())?;
        if let FitStatus::Degenerate { component, weight, .. } = fit.status {
            return Err(Error::Degenerate { component, weight });
        }
        let dens = fit.densities();
        let measured: Vec<f64> = if per_component {
            dens.clone()
        } else {
            vec![dens.iter().sum::<f64>() / big_g as f64]
        };
        for k in 0..slots {
            if frozen[k] || density_ok(measured[k], target) {
                continue;
            }
            if measured[k] > target {
                lo[k] = Some(lam[k]);
                lam[k] = match hi[k] {
                    Some(h) => (lam[k] * h).sqrt(),
                    None => (lam[k] * 4.0).max(1e-8),
                };
            } else if lam[k] == 0.0 {
                frozen[k] = true;
                unreachable = true;
            } else {
                hi[k] = Some(lam[k]);
                lam[k] = match lo[k] {
                    Some(l) if l > 0.0 => (lam[k] * l).sqrt(),
                    Some(_) => 0.0,
                    None if lam[k] < 1e-8 => 0.0,
                    None => lam[k] / 4.0,
                };
            }
        }
        let all_ok = (0..slots).all(|k| frozen[k] || density_ok(measured[k], target));
        if all_ok || steps >= DENSITY_MAX_STEPS {
            let status = if unreachable {
                log::warn!("target density {target} not reachable even without penalty");
                DensityStatus::Unreachable
            } else if all_ok {
                DensityStatus::Reached
            } else {
                DensityStatus::StepLimit
            };
            let fit = sort_components(fit);
            return Ok(DensitySelection {
                lambdas: fit.lambdas.clone(),
                densities: fit.densities(),
                fit,
                steps,
                status,
            });
        }
        start = (fit.params, fit.state);
    }
}

fn initial_precisions(state: &VariationalState, y_t: &DMatrix<f64>, config: &FitConfig) -> Result<Vec<DMatrix<f64>>> {
    let labels = argmax_rows(&state.responsibilities);
    let lambdas = config.lambdas();
    (0..config.components)
        .into_par_iter()
        .map(|g| {
            let rows: Vec<usize> = (0..y_t.nrows()).filter(|&i| labels[i] == g).collect();
            let (_, cov) = sample_moments(y_t, &rows);
            glasso::glasso_fit_warm(&cov, lambdas[g] / rows.len() as f64, &config.zero_edges, config.glasso, None)
                .map(|s| s.precision)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use crate::pln::sample_mpln;

    fn two_cluster_data(seed: u64, n: usize, p: usize, sep: f64) -> CountDataset {
        let mut mu2 = DVector::from_element(p, 1.0);
        mu2[0] += sep;
        let params = MixtureParams::new(
            vec![0.5, 0.5],
            vec![DVector::from_element(p, 1.0), mu2],
            vec![DMatrix::identity(p, p) * 2.0, DMatrix::identity(p, p) * 2.0],
        )
        .unwrap();
        sample_mpln(&params, &vec![1.0; n], seed).unwrap()
    }

    #[test]
    fn sign_change_definition() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 1.0, -0.1, 0.0, -0.1, 1.0]);
        assert_eq!(sign_change(std::slice::from_ref(&a), std::slice::from_ref(&a)), 0.0);
        let mut b = a.clone();
        b[(0, 1)] = -0.2;
        b[(1, 0)] = -0.2;
        b[(0, 2)] = 0.3;
        b[(2, 0)] = 0.3;
        // |−1 − 1| + |1 − 0| over 3 pairs
        assert!((sign_change(&[a], &[b]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalization_with_unit_scaling() {
        let counts = DMatrix::from_row_slice(2, 2, &[5000.0, 5000.0, 2500.0, 7500.0]);
        let data = CountDataset::new(counts.clone(), vec![1.0, 1.0], vec!["a".into(), "b".into()]).unwrap();
        let est = data.estimated_scaling();
        assert_eq!(est, vec![1.0, 1.0]);
        let y_t = normalized_counts(&data);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(y_t[(i, j)], (counts[(i, j)] + 1.0).ln());
            }
        }
    }

    #[test]
    fn one_point_per_cluster_init() {
        let counts = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 10.0, 3.0, 50.0, 60.0]);
        let data = CountDataset::new(counts, vec![1.0; 3], vec!["a".into(), "b".into()]).unwrap();
        let (_, state) = initialize(&data, &FitConfig::new(3, 0.0)).unwrap();
        let p = &state.responsibilities;
        for i in 0..3 {
            let big: Vec<usize> = (0..3).filter(|&g| p[(i, g)] > 0.5).collect();
            assert_eq!(big.len(), 1);
            let sum: f64 = p.row(i).sum();
            assert!((sum - 1.0).abs() < 1e-15);
        }
        let assigned: Vec<usize> = (0..3).map(|i| (0..3).find(|&g| p[(i, g)] > 0.5).unwrap()).collect();
        let mut sorted = assigned.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn identical_rows_fail_to_initialize() {
        let counts = DMatrix::from_element(6, 3, 4.0);
        let data = CountDataset::new(counts, vec![1.0; 6], vec!["a".into(), "b".into(), "c".into()]).unwrap();
        assert!(matches!(initialize(&data, &FitConfig::new(2, 0.1)), Err(Error::EmptyCluster)));
    }

    #[test]
    fn single_component_is_self_consistent() {
        let params = MixtureParams::new(
            vec![1.0],
            vec![DVector::from_vec(vec![1.0, 0.5])],
            vec![DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.5])],
        )
        .unwrap();
        let data = sample_mpln(&params, &vec![1.0; 300], 11).unwrap();
        let mut config = FitConfig::new(1, 2.0);
        config.p_step_mode = PStepMode::Exact;
        let fit = fit(&data, &config).unwrap();
        assert!(fit.state.responsibilities.iter().all(|&v| v == 1.0));
        let cov = variational::weighted_covariance(&fit.state, &fit.params.means, 0).unwrap();
        let direct = glasso::glasso_fit(&cov, 2.0 / 300.0, &ZeroEdgeSet::new(), 1e-9).unwrap();
        assert!((direct.precision - &fit.params.precisions[0]).amax() < 1e-5);
    }

    #[test]
    fn exact_mode_trace_is_monotone() {
        for seed in 0..4 {
            let data = two_cluster_data(seed, 60, 3, 2.0);
            let mut config = FitConfig::new(2, 1.0);
            config.p_step_mode = PStepMode::Exact;
            config.max_outer = 15;
            let fit = fit(&data, &config).unwrap();
            for w in fit.trace.windows(2) {
                let (a, b) = (w[0].penalized_objective, w[1].penalized_objective);
                assert!(b <= a + 1e-8 * a.abs(), "seed {seed}: {a} -> {b}");
            }
            for r in &fit.trace {
                assert_eq!(r.factorizations, 2);
                assert!((0.0..=2.0).contains(&r.delta_sign));
            }
        }
    }

    #[test]
    fn output_sorted_by_proportion() {
        let data = two_cluster_data(3, 80, 3, 3.0);
        let mut config = FitConfig::new(2, 1.0);
        config.max_outer = 5;
        let fit = fit(&data, &config).unwrap();
        assert!(fit.params.proportions[0] >= fit.params.proportions[1]);
        fit.params.validate().unwrap();
        for t in &fit.params.precisions {
            assert!(linalg::is_positive_definite(t));
        }
    }

    #[test]
    fn icl_arithmetic() {
        let data = two_cluster_data(5, 50, 3, 3.0);
        let mut config = FitConfig::new(2, 1.0);
        config.max_outer = 3;
        let fit = fit(&data, &config).unwrap();
        for g in 0..2 {
            let w = fit.state.component_weight(g);
            let nz = fit.params.precisions[g].iter().filter(|v| **v != 0.0).count();
            let expected = -2.0 * fit.elbo.per_component[g] + w.ln() * nz as f64;
            assert!((icl_score(&fit, g, IclCount::AllEntries).unwrap() - expected).abs() < 1e-9);
        }
        let mut other = fit.clone();
        let t = &mut other.params.precisions[0];
        let before = t.iter().filter(|v| **v != 0.0).count();
        let target = if t[(0, 1)] == 0.0 { (0, 1) } else { (0, 2) };
        t[target] = if t[target] == 0.0 { 0.01 } else { 0.0 };
        t[(target.1, target.0)] = t[target];
        let after = t.iter().filter(|v| **v != 0.0).count();
        let diff = icl_score(&other, 0, IclCount::AllEntries).unwrap() - icl_score(&fit, 0, IclCount::AllEntries).unwrap();
        let w = fit.state.component_weight(0);
        assert!((diff - (after as f64 - before as f64) * w.ln()).abs() < 1e-9);
        assert_eq!((after as i64 - before as i64).abs(), 2);
    }

    #[test]
    fn diagonal_count() {
        let data = two_cluster_data(6, 40, 4, 3.0);
        let mut config = FitConfig::new(1, 1e9);
        config.max_outer = 2;
        let fit = fit(&data, &config).unwrap();
        let w = fit.state.component_weight(0);
        let icl = icl_score(&fit, 0, IclCount::AllEntries).unwrap();
        assert!((icl - (-2.0 * fit.elbo.per_component[0] + 4.0 * w.ln())).abs() < 1e-9);
    }

    #[test]
    fn icl_grid_single_and_duplicates() {
        let data = two_cluster_data(7, 60, 3, 3.0);
        let mut config = FitConfig::new(2, 0.0);
        config.max_outer = 5;
        let single = select_lambda_icl(&data, &config, &[2.0], IclCount::AllEntries).unwrap();
        assert_eq!(single.lambdas, vec![2.0, 2.0]);
        let a = select_lambda_icl(&data, &config, &[0.5, 2.0, 8.0], IclCount::AllEntries).unwrap();
        let b = select_lambda_icl(&data, &config, &[0.5, 2.0, 2.0, 8.0, 0.5], IclCount::AllEntries).unwrap();
        assert_eq!(a.lambdas, b.lambdas);
        assert_eq!(a.fit.params.precisions, b.fit.params.precisions);
    }

    #[test]
    fn density_target_full() {
        let data = two_cluster_data(8, 80, 4, 3.0);
        let mut config = FitConfig::new(2, 0.0);
        config.max_outer = 10;
        let sel = select_lambda_density(&data, &config, 1.0, true).unwrap();
        assert_eq!(sel.status, DensityStatus::Reached);
        assert!(sel.densities.iter().all(|&d| d == 1.0));
    }

    #[test]
    fn degenerate_and_bad_configs() {
        let data = two_cluster_data(9, 20, 2, 1.0);
        assert!(fit(&data, &FitConfig::new(0, 1.0)).is_err());
        assert!(fit(&data, &FitConfig::new(2, -1.0)).is_err());
        let mut c = FitConfig::new(2, 1.0);
        c.min_outer = 0;
        assert!(fit(&data, &c).is_err());
    }
}
