//! Poisson log-normal (PLN) and mixture PLN generative model.
//!
//! ```text
//! Z_i            ~ Multinomial(1, π)
//! X_i | Z_i = g  ~ N(μ_g, Θ_g⁻¹)
//! Y_ij | X_i     ~ Poisson(l_i · exp(X_ij))
//! ```
//!
//! Besides the sampler this module carries two exact references used to
//! validate the variational machinery: the closed-form factorial moments of a
//! PLN vector, and a quadrature evaluation of the marginal log-likelihood for
//! p ≤ 2.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{derive_seed, row_rng, TAG_SAMPLE};

/// Poisson rates above this are treated as parameter misuse.
pub const MAX_POISSON_RATE: f64 = 1e9;

/// Observed counts plus per-sample scaling factors.
#[derive(Debug, Clone, PartialEq)]
pub struct CountDataset {
    counts: DMatrix<f64>,
    scaling: Vec<f64>,
    feature_names: Vec<String>,
    sample_names: Vec<String>,
    true_labels: Option<Vec<usize>>,
    latent: Option<DMatrix<f64>>,
    row_log_factorial: Vec<f64>,
}

impl CountDataset {
    /// Builds a dataset, checking that counts are non-negative integers and
    /// scaling factors are positive and finite.
    pub fn new(counts: DMatrix<f64>, scaling: Vec<f64>, feature_names: Vec<String>) -> Result<Self> {
        let (n, p) = counts.shape();
        if scaling.len() != n {
            return Err(Error::InvalidInput(format!(
                "scaling has length {} but counts have {} rows",
                scaling.len(),
                n
            )));
        }
        if feature_names.len() != p {
            return Err(Error::InvalidInput(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                p
            )));
        }
        for j in 0..p {
            for i in 0..n {
                let y = counts[(i, j)];
                if !(y.is_finite() && y >= 0.0 && y.fract() == 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "count at ({i}, {j}) is {y}, expected a non-negative integer"
                    )));
                }
            }
        }
        if let Some((i, l)) = scaling.iter().enumerate().find(|(_, l)| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::InvalidInput(format!("scaling factor {i} is {l}, expected > 0")));
        }
        let row_log_factorial = (0..n)
            .map(|i| counts.row(i).iter().map(|&y| ln_factorial(y)).sum())
            .collect();
        Ok(Self {
            counts,
            scaling,
            feature_names,
            sample_names: (1..=n).map(|i| format!("s{i}")).collect(),
            true_labels: None,
            latent: None,
            row_log_factorial,
        })
    }

    pub fn with_sample_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n() {
            return Err(Error::InvalidInput(format!(
                "{} sample names for {} rows",
                names.len(),
                self.n()
            )));
        }
        self.sample_names = names;
        Ok(self)
    }

    pub fn with_true_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.n() {
            return Err(Error::InvalidInput("true labels length mismatch".into()));
        }
        self.true_labels = Some(labels);
        Ok(self)
    }

    pub fn with_latent(mut self, latent: DMatrix<f64>) -> Result<Self> {
        if latent.shape() != self.counts.shape() {
            return Err(Error::InvalidInput("latent matrix shape mismatch".into()));
        }
        self.latent = Some(latent);
        Ok(self)
    }

    pub fn with_scaling(mut self, scaling: Vec<f64>) -> Result<Self> {
        let rebuilt = CountDataset::new(self.counts.clone(), scaling, self.feature_names.clone())?;
        self.scaling = rebuilt.scaling;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.counts.nrows()
    }

    pub fn p(&self) -> usize {
        self.counts.ncols()
    }

    pub fn counts(&self) -> &DMatrix<f64> {
        &self.counts
    }

    pub fn scaling(&self) -> &[f64] {
        &self.scaling
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn sample_names(&self) -> &[String] {
        &self.sample_names
    }

    pub fn true_labels(&self) -> Option<&[usize]> {
        self.true_labels.as_deref()
    }

    pub fn latent(&self) -> Option<&DMatrix<f64>> {
        self.latent.as_ref()
    }

    /// `Σ_j log(Y_ij!)` for row `i`, computed once at construction.
    pub fn row_log_factorial(&self, i: usize) -> f64 {
        self.row_log_factorial[i]
    }

    pub fn row_total(&self, i: usize) -> f64 {
        self.counts.row(i).sum()
    }

    /// Library-size estimate `l̂_i = Σ_j Y_ij / 10⁴`.
    pub fn estimated_scaling(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.row_total(i) / 1e4).collect()
    }

    /// Row subset, keeping names, labels and latent values aligned.
    pub fn subset_rows(&self, rows: &[usize]) -> Result<Self> {
        let p = self.p();
        let counts = DMatrix::from_fn(rows.len(), p, |r, j| self.counts[(rows[r], j)]);
        let scaling = rows.iter().map(|&i| self.scaling[i]).collect();
        let mut out = CountDataset::new(counts, scaling, self.feature_names.clone())?
            .with_sample_names(rows.iter().map(|&i| self.sample_names[i].clone()).collect())?;
        if let Some(labels) = &self.true_labels {
            out.true_labels = Some(rows.iter().map(|&i| labels[i]).collect());
        }
        if let Some(latent) = &self.latent {
            out.latent = Some(DMatrix::from_fn(rows.len(), p, |r, j| latent[(rows[r], j)]));
        }
        Ok(out)
    }
}

pub(crate) fn ln_factorial(y: f64) -> f64 {
    libm::lgamma(y + 1.0)
}

/// Mixture parameters θ = (π, {μ_g}, {Θ_g}).
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub proportions: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub precisions: Vec<DMatrix<f64>>,
}

impl MixtureParams {
    pub fn new(proportions: Vec<f64>, means: Vec<DVector<f64>>, precisions: Vec<DMatrix<f64>>) -> Result<Self> {
        let params = Self {
            proportions,
            means,
            precisions,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn components(&self) -> usize {
        self.proportions.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.proportions.len();
        if g == 0 {
            return Err(Error::Parameter("at least one component is required".into()));
        }
        if self.means.len() != g || self.precisions.len() != g {
            return Err(Error::Parameter(format!(
                "{} proportions, {} means, {} precisions",
                g,
                self.means.len(),
                self.precisions.len()
            )));
        }
        if self.proportions.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Parameter("proportions must be positive".into()));
        }
        let total: f64 = self.proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("proportions sum to {total}, expected 1")));
        }
        let p = self.dim();
        for (k, (mu, theta)) in self.means.iter().zip(&self.precisions).enumerate() {
            if mu.len() != p || theta.shape() != (p, p) {
                return Err(Error::Parameter(format!("component {k} has inconsistent dimensions")));
            }
            if linalg::max_asymmetry(theta) > 1e-10 * (1.0 + theta.amax()) {
                return Err(Error::Parameter(format!("precision {k} is not symmetric")));
            }
            if !linalg::is_positive_definite(theta) {
                return Err(Error::Parameter(format!("precision {k} is not positive definite")));
            }
        }
        Ok(())
    }
}

/// Draws `n = scaling.len()` samples from the mixture. Row `i` uses its own
/// random stream derived from `(seed, i)`, so the result does not depend on
/// the thread schedule.
pub fn sample_mpln(params: &MixtureParams, scaling: &[f64], seed: u64) -> Result<CountDataset> {
    params.validate()?;
    if let Some((i, l)) = scaling.iter().enumerate().find(|(_, l)| !(l.is_finite() && **l > 0.0)) {
        return Err(Error::InvalidInput(format!("scaling factor {i} is {l}, expected > 0")));
    }
    let p = params.dim();
    let n = scaling.len();
    let factors = params
        .precisions
        .iter()
        .map(|theta| {
            linalg::cholesky(theta)
                .map(|c| c.l())
                .ok_or_else(|| Error::Parameter("precision is not positive definite".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let cumulative: Vec<f64> = params
        .proportions
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let stream = derive_seed(seed, &[TAG_SAMPLE]);

    let rows: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = row_rng(stream, i);
            let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
            let g = cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1);
            let z: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
            // X = μ + L⁻ᵀ z, Θ = L Lᵀ
            let l = &factors[g];
            let mut x = z;
            for j in (0..p).rev() {
                let mut s = x[j];
                for k in (j + 1)..p {
                    s -= l[(k, j)] * x[k];
                }
                x[j] = s / l[(j, j)];
            }
            let mu = &params.means[g];
            x.iter_mut().zip(mu.iter()).for_each(|(xj, m)| *xj += m);
            let mut y = vec![0.0; p];
            for j in 0..p {
                let rate = scaling[i] * x[j].exp();
                if !rate.is_finite() || rate > MAX_POISSON_RATE {
                    return Err(Error::Sampling { row: i, col: j, rate });
                }
                if rate > 0.0 {
                    let dist = Poisson::new(rate).map_err(|_| Error::Sampling { row: i, col: j, rate })?;
                    y[j] = dist.sample(&mut rng);
                }
            }
            Ok((g, x, y))
        })
        .collect::<Result<Vec<_>>>()?;

    let counts = DMatrix::from_fn(n, p, |i, j| rows[i].2[j]);
    let latent = DMatrix::from_fn(n, p, |i, j| rows[i].1[j]);
    let labels = rows.iter().map(|r| r.0).collect();
    CountDataset::new(counts, scaling.to_vec(), (1..=p).map(|j| format!("f{j}")).collect())?
        .with_true_labels(labels)?
        .with_latent(latent)
}

/// Orders `N = (n_1, …, n_p)` of a factorial moment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MomentIndex {
    pub orders: Vec<u32>,
}

impl MomentIndex {
    pub fn new(orders: Vec<u32>) -> Self {
        Self { orders }
    }

    pub fn is_trivial(&self) -> bool {
        self.orders.iter().all(|&o| o == 0)
    }
}

/// Falling factorial φ(y, n) = y (y−1) ⋯ (y−n+1), φ(y, 0) = 1.
pub fn falling_factorial(y: u64, n: u32) -> f64 {
    (0..n as u64).map(|k| y as f64 - k as f64).product()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorialMoment {
    pub value: f64,
    pub log_value: f64,
}

/// Closed form `E ∏_j φ(y_j, n_j) = exp(Nᵀμ + NᵀΘ⁻¹N / 2)` for y ~ PLN(μ, Θ)
/// with unit scaling. The log value is exact even when the value overflows.
pub fn pln_factorial_moment(index: &MomentIndex, mean: &DVector<f64>, precision: &DMatrix<f64>) -> Result<FactorialMoment> {
    let p = mean.len();
    if index.orders.len() != p || precision.shape() != (p, p) {
        return Err(Error::InvalidInput("moment index dimension mismatch".into()));
    }
    let chol = linalg::cholesky(precision)
        .ok_or_else(|| Error::Parameter("precision is singular or not positive definite".into()))?;
    let orders = DVector::from_iterator(p, index.orders.iter().map(|&o| o as f64));
    let solved = chol.solve(&orders);
    let log_value = orders.dot(mean) + 0.5 * orders.dot(&solved);
    Ok(FactorialMoment {
        value: log_value.exp(),
        log_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// Sample mean and standard error of `∏_j φ(Y_ij, n_j)` over rows.
pub fn empirical_factorial_moment(data: &CountDataset, index: &MomentIndex) -> Result<MomentEstimate> {
    if index.orders.len() != data.p() {
        return Err(Error::InvalidInput(format!(
            "moment index has {} entries, data has {} features",
            index.orders.len(),
            data.p()
        )));
    }
    let n = data.n();
    if n == 0 {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let stats: Vec<f64> = (0..n)
        .map(|i| {
            index
                .orders
                .iter()
                .enumerate()
                .map(|(j, &o)| falling_factorial(data.counts[(i, j)] as u64, o))
                .product()
        })
        .collect();
    let mean = stats.iter().sum::<f64>() / n as f64;
    let std_error = if n > 1 {
        let var = stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(MomentEstimate {
        estimate: mean,
        std_error,
    })
}

/// Gauss–Hermite nodes and log-weights for the weight `exp(−x²)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let mut x = vec![0.0; n];
    let mut log_w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0_f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * (1.0 + z.abs()) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        log_w[i] = (2.0 / (pp * pp)).ln();
        log_w[n - 1 - i] = log_w[i];
    }
    (x, log_w)
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// log ∫ p(y | x) N(x; μ, Θ⁻¹) dx by Gauss–Hermite quadrature centred at the
/// Laplace mode of the integrand.
fn log_component_integral(
    y: &[f64],
    l: f64,
    mu: &DVector<f64>,
    theta: &DMatrix<f64>,
    log_det_theta: f64,
    nodes: &(Vec<f64>, Vec<f64>),
) -> Result<f64> {
    let p = y.len();
    let log_l = l.ln();
    let constant: f64 = y.iter().map(|&v| v * log_l - ln_factorial(v)).sum::<f64>()
        - 0.5 * p as f64 * (2.0 * std::f64::consts::PI).ln()
        + 0.5 * log_det_theta;
    let log_integrand = |x: &[f64]| -> f64 {
        let d: Vec<f64> = x.iter().zip(mu.iter()).map(|(a, b)| a - b).collect();
        let pois: f64 = x.iter().zip(y).map(|(&xj, &yj)| yj * xj - l * xj.exp()).sum();
        constant + pois - 0.5 * linalg::quad_form(theta, &d)
    };

    // Newton ascent on the strictly concave log-integrand.
    let mut x: Vec<f64> = mu.iter().copied().collect();
    let mut converged = false;
    for _ in 0..200 {
        let d: Vec<f64> = x.iter().zip(mu.iter()).map(|(a, b)| a - b).collect();
        let mut theta_d = vec![0.0; p];
        linalg::mat_vec(theta, &d, &mut theta_d);
        let grad = DVector::from_iterator(p, (0..p).map(|j| y[j] - l * x[j].exp() - theta_d[j]));
        let mut hess = theta.clone();
        for j in 0..p {
            hess[(j, j)] += l * x[j].exp();
        }
        let chol = linalg::cholesky(&hess).ok_or_else(|| Error::Numerical("quadrature Hessian is not PD".into()))?;
        let step = chol.solve(&grad);
        let current = log_integrand(&x);
        let mut t = 1.0;
        let mut next;
        loop {
            next = x.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect::<Vec<_>>();
            if log_integrand(&next) >= current - 1e-12 * current.abs() || t < 1e-10 {
                break;
            }
            t *= 0.5;
        }
        let moved = step.amax() * t;
        x = next;
        if moved < 1e-12 * (1.0 + x.iter().fold(0.0_f64, |a, v| a.max(v.abs()))) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!("Laplace mode search did not converge near x = {x:?}")));
    }
    let mut hess = theta.clone();
    for j in 0..p {
        hess[(j, j)] += l * x[j].exp();
    }
    let chol = linalg::cholesky(&hess).ok_or_else(|| Error::Numerical("quadrature Hessian is not PD".into()))?;
    let lower = chol.l();
    let log_det_l: f64 = lower.diagonal().iter().map(|d| d.ln()).sum();

    let (t, log_w) = nodes;
    let m = t.len();
    let total = m.pow(p as u32);
    let mut terms = Vec::with_capacity(total);
    let mut idx = vec![0usize; p];
    for _ in 0..total {
        // x = x̂ + √2 L⁻ᵀ t
        let mut u: Vec<f64> = idx.iter().map(|&k| std::f64::consts::SQRT_2 * t[k]).collect();
        for j in (0..p).rev() {
            let mut s = u[j];
            for k in (j + 1)..p {
                s -= lower[(k, j)] * u[k];
            }
            u[j] = s / lower[(j, j)];
        }
        let point: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + b).collect();
        let weight: f64 = idx.iter().map(|&k| log_w[k] + t[k] * t[k]).sum();
        terms.push(weight + log_integrand(&point));
        for slot in idx.iter_mut() {
            *slot += 1;
            if *slot < m {
                break;
            }
            *slot = 0;
        }
    }
    Ok(0.5 * p as f64 * std::f64::consts::LN_2 - log_det_l + log_sum_exp(&terms))
}

/// Marginal log-likelihood `Σ_i log Σ_g π_g ∫ p(Y_i|x) N(x; μ_g, Θ_g⁻¹) dx`,
/// valid for `p ≤ 2`. Each per-sample integral is evaluated with
/// `quad_nodes` and with 1.5× as many nodes; a relative disagreement above
/// 10⁻⁶ is reported as a numerical error.
pub fn loglik_oracle(data: &CountDataset, params: &MixtureParams, quad_nodes: usize) -> Result<f64> {
    let p = data.p();
    if p > 2 {
        return Err(Error::UnsupportedDimension(p));
    }
    if quad_nodes < 50 {
        return Err(Error::InvalidInput("quadrature needs at least 50 nodes".into()));
    }
    params.validate()?;
    if params.dim() != p {
        return Err(Error::InvalidInput("parameter dimension does not match data".into()));
    }
    let coarse = gauss_hermite(quad_nodes);
    let fine = gauss_hermite(quad_nodes + quad_nodes / 2);
    let log_dets = params
        .precisions
        .iter()
        .map(linalg::log_det_spd)
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for i in 0..data.n() {
        let y: Vec<f64> = data.counts.row(i).iter().copied().collect();
        let l = data.scaling[i];
        let mut per_component = Vec::with_capacity(params.components());
        for g in 0..params.components() {
            let a = log_component_integral(&y, l, &params.means[g], &params.precisions[g], log_dets[g], &coarse)?;
            let b = log_component_integral(&y, l, &params.means[g], &params.precisions[g], log_dets[g], &fine)?;
            if (a - b).abs() > 1e-6 {
                return Err(Error::Numerical(format!(
                    "quadrature for sample {i}, component {g} did not converge: {a} with {} nodes vs {b} with {}",
                    quad_nodes,
                    quad_nodes + quad_nodes / 2
                )));
            }
            per_component.push(params.proportions[g].ln() + b);
        }
        total += log_sum_exp(&per_component);
    }
    Ok(total)
}
