//! Edge scores, partial precision-recall areas, stability and the two-step
//! baseline.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::assign::{match_components, min_cost_assignment};
use crate::engine::{normalized_counts, sample_moments};
use crate::error::{Error, Result};
use crate::glasso::{self, GlassoOptions, GlassoSolution, ZeroEdgeSet};
use crate::kmeans::kmeans;
use crate::pln::CountDataset;
use crate::rng::{derive_seed, rng_from, TAG_KMEANS, TAG_SUBSAMPLE};

/// `|−Θ_lm / √(Θ_ll Θ_mm)|` for every pair `l < m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScoreList {
    pub p: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl EdgeScoreList {
    /// Fraction of pairs with a nonzero score.
    pub fn density(&self) -> f64 {
        let pairs = self.p * self.p.saturating_sub(1) / 2;
        if pairs == 0 {
            return 0.0;
        }
        self.entries.iter().filter(|e| e.2 > 0.0).count() as f64 / pairs as f64
    }

    /// Pairs with the `k` largest positive scores (ties by index order).
    pub fn top(&self, k: usize) -> HashSet<(usize, usize)> {
        let mut ranked: Vec<&(usize, usize, f64)> = self.entries.iter().filter(|e| e.2 > 0.0).collect();
        ranked.sort_by(|a, b| b.2.total_cmp(&a.2));
        ranked.into_iter().take(k).map(|&(l, m, _)| (l, m)).collect()
    }
}

pub fn edge_scores(precision: &DMatrix<f64>) -> Result<EdgeScoreList> {
    let p = precision.nrows();
    if !precision.is_square() {
        return Err(Error::InvalidInput("precision must be square".into()));
    }
    if let Some(j) = (0..p).find(|&j| !(precision[(j, j)] > 0.0)) {
        return Err(Error::InvalidInput(format!("precision diagonal entry {j} is not positive")));
    }
    let mut entries = Vec::with_capacity(p * p.saturating_sub(1) / 2);
    for l in 0..p {
        for m in l + 1..p {
            let v = precision[(l, m)];
            let score = if v == 0.0 {
                0.0
            } else {
                (-v / (precision[(l, l)] * precision[(m, m)]).sqrt()).abs()
            };
            entries.push((l, m, score));
        }
    }
    Ok(EdgeScoreList { p, entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pauprc {
    pub pauprc: f64,
    pub ratio: f64,
    pub baseline: f64,
    pub recall_min: f64,
    pub recall_max: f64,
}

/// Area under the precision-recall curve over the recall span reached by
/// the positive scores, and its ratio to a random ranking's `d₀ · span`.
pub fn pauprc_ratio(scores: &EdgeScoreList, truth: &HashSet<(usize, usize)>) -> Result<Pauprc> {
    if truth.is_empty() {
        return Err(Error::InvalidInput("truth has no edges".into()));
    }
    let p = scores.p;
    let pairs = p * p.saturating_sub(1) / 2;
    if scores.entries.len() != pairs {
        return Err(Error::InvalidInput(format!("scores cover {} of {pairs} pairs", scores.entries.len())));
    }
    let norm = |l: usize, m: usize| (l.min(m), l.max(m));
    let mut positive: Vec<(f64, bool)> = scores
        .entries
        .iter()
        .filter(|e| e.2 > 0.0)
        .map(|&(l, m, s)| (s, truth.contains(&norm(l, m))))
        .collect();
    if positive.is_empty() {
        return Err(Error::InvalidInput("all edge scores are zero; check the estimated density".into()));
    }
    positive.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total_true = truth.len() as f64;
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut predicted) = (0usize, 0usize);
    let mut k = 0;
    while k < positive.len() {
        let t = positive[k].0;
        while k < positive.len() && positive[k].0 == t {
            predicted += 1;
            tp += usize::from(positive[k].1);
            k += 1;
        }
        points.push((tp as f64 / total_true, tp as f64 / predicted as f64));
    }
    let d0 = total_true / pairs as f64;
    let recall_min = points[0].0;
    let recall_max = points[points.len() - 1].0;
    let span = recall_max - recall_min;
    let area: f64 = points.windows(2).map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1)).sum();
    let (pauprc, baseline, ratio) = if span > 0.0 {
        (area, d0 * span, area / (d0 * span))
    } else {
        let precision = points[points.len() - 1].1;
        (0.0, 0.0, precision / d0)
    };
    Ok(Pauprc {
        pauprc,
        ratio,
        baseline,
        recall_min,
        recall_max,
    })
}

/// Networks and responsibilities from one fit, for stability scoring.
#[derive(Debug, Clone)]
pub struct StabilityFit {
    pub precisions: Vec<DMatrix<f64>>,
    /// Rows follow the subsample passed to the procedure.
    pub responsibilities: DMatrix<f64>,
}

fn jaccard(a: &HashSet<(usize, usize)>, b: &HashSet<(usize, usize)>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median pairwise Jaccard index of the top-density edge sets fitted on
/// `reps` row subsamples, averaged over components matched by
/// responsibility overlap on shared rows.
pub fn jaccard_stability<F>(data: &CountDataset, procedure: F, frac: f64, reps: usize, density_target: f64, seed: u64) -> Result<f64>
where
    F: Fn(&CountDataset, u64) -> Result<StabilityFit>,
{
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::InvalidInput(format!("subsample fraction {frac} must lie in (0, 1]")));
    }
    if reps < 2 {
        return Err(Error::InvalidInput("stability needs at least two replicates".into()));
    }
    if !(density_target > 0.0 && density_target <= 1.0) {
        return Err(Error::InvalidInput("density target must lie in (0, 1]".into()));
    }
    let n = data.n();
    let size = ((frac * n as f64).round() as usize).clamp(1, n);
    let mut runs: Vec<(Vec<usize>, Vec<HashSet<(usize, usize)>>, DMatrix<f64>)> = Vec::new();
    for r in 0..reps {
        let mut rng = rng_from(seed, &[TAG_SUBSAMPLE, r as u64]);
        let mut rows = sample(&mut rng, n, size).into_vec();
        rows.sort_unstable();
        let subset = data.subset_rows(&rows)?;
        match procedure(&subset, derive_seed(seed, &[r as u64])) {
            Ok(fit) => {
                let mut sets = Vec::with_capacity(fit.precisions.len());
                for theta in &fit.precisions {
                    let scores = edge_scores(theta)?;
                    let k = (density_target * (scores.p * (scores.p - 1) / 2) as f64).round() as usize;
                    sets.push(scores.top(k));
                }
                runs.push((rows, sets, fit.responsibilities));
            }
            Err(e) => log::warn!("stability replicate {r} failed and is excluded: {e}"),
        }
    }
    if runs.len() < 2 {
        return Err(Error::State("fewer than two stability replicates succeeded".into()));
    }
    let mut values = Vec::new();
    for a in 0..runs.len() {
        for b in a + 1..runs.len() {
            let (rows_a, sets_a, p_a) = &runs[a];
            let (rows_b, sets_b, p_b) = &runs[b];
            let perm = if sets_a.len() > 1 {
                let (ia, ib) = shared_rows(rows_a, rows_b);
                let sub_a = DMatrix::from_fn(ia.len(), p_a.ncols(), |i, g| p_a[(ia[i], g)]);
                let sub_b = DMatrix::from_fn(ib.len(), p_b.ncols(), |i, g| p_b[(ib[i], g)]);
                match_components(&sub_a, &sub_b)
            } else {
                vec![0]
            };
            let mean = (0..sets_a.len()).map(|g| jaccard(&sets_a[g], &sets_b[perm[g]])).sum::<f64>() / sets_a.len() as f64;
            values.push(mean);
        }
    }
    Ok(median(&mut values))
}

/// Positions of the rows present in both sorted index lists.
fn shared_rows(a: &[usize], b: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let (mut i, mut j) = (0, 0);
    let (mut ia, mut ib) = (Vec::new(), Vec::new());
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                ia.push(i);
                ib.push(j);
                i += 1;
                j += 1;
            }
        }
    }
    (ia, ib)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselinePenalty {
    /// Graphical lasso penalty applied to each cluster covariance.
    Fixed(f64),
    /// Per-cluster penalty chosen for this off-diagonal density.
    Density(f64),
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub labels: Vec<usize>,
    pub networks: Vec<GlassoSolution>,
    pub lambdas: Vec<f64>,
}

/// K-means on `Ỹ`, then a graphical lasso on each cluster's sample
/// covariance.
pub fn two_step_baseline(
    data: &CountDataset,
    components: usize,
    penalty: BaselinePenalty,
    zeros: &ZeroEdgeSet,
    seed: u64,
) -> Result<BaselineResult> {
    if components == 0 || components > data.n() {
        return Err(Error::InvalidInput(format!("cannot form {components} clusters from {} rows", data.n())));
    }
    let y_t = normalized_counts(data);
    let km = kmeans(&y_t, components, 10, derive_seed(seed, &[TAG_KMEANS]))?;
    let options = GlassoOptions::default();
    let mut networks = Vec::with_capacity(components);
    let mut lambdas = Vec::with_capacity(components);
    for g in 0..components {
        let rows: Vec<usize> = (0..data.n()).filter(|&i| km.labels[i] == g).collect();
        let (_, cov) = sample_moments(&y_t, &rows);
        let (lambda, sol) = match penalty {
            BaselinePenalty::Fixed(l) => (l, glasso::glasso_fit_warm(&cov, l, zeros, options, None)?),
            BaselinePenalty::Density(d) => glasso::fit_density(&cov, d, zeros, options)?,
        };
        lambdas.push(lambda);
        networks.push(sol);
    }
    Ok(BaselineResult {
        labels: km.labels,
        networks,
        lambdas,
    })
}

/// Matches estimated components to true populations by maximal overlap of
/// responsibilities with the true one-hot labels; `perm[true] = estimated`.
pub fn match_to_truth(responsibilities: &DMatrix<f64>, truth: &[usize], populations: usize) -> Vec<usize> {
    let g_est = responsibilities.ncols();
    let size = g_est.max(populations);
    let mut cost = DMatrix::zeros(size, size);
    for (i, &t) in truth.iter().enumerate() {
        for g in 0..g_est {
            cost[(t, g)] -= responsibilities[(i, g)];
        }
    }
    min_cost_assignment(&cost).into_iter().take(populations).collect()
}

/// One-hot responsibilities from hard labels.
pub fn one_hot(labels: &[usize], components: usize) -> DMatrix<f64> {
    DMatrix::from_fn(labels.len(), components, |i, g| if labels[i] == g { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub pauprc: Vec<f64>,
    pub pauprc_ratio: Vec<f64>,
    pub mean_ratio: f64,
    pub ari: f64,
    pub stability_jaccard: Option<f64>,
    pub density: Vec<f64>,
    pub seconds: f64,
}

/// Scores estimated networks against the true ones after matching
/// components to populations.
pub fn evaluate(
    method: &str,
    precisions: &[DMatrix<f64>],
    responsibilities: &DMatrix<f64>,
    truth_labels: &[usize],
    true_precisions: &[DMatrix<f64>],
    seconds: f64,
) -> Result<EvalReport> {
    let populations = true_precisions.len();
    let perm = match_to_truth(responsibilities, truth_labels, populations);
    let mut pauprc = Vec::with_capacity(populations);
    let mut ratios = Vec::with_capacity(populations);
    let mut density = Vec::with_capacity(populations);
    for (t, theta_true) in true_precisions.iter().enumerate() {
        let g = perm[t];
        if g >= precisions.len() {
            continue;
        }
        let truth: HashSet<(usize, usize)> = crate::simgen::true_edges(theta_true).into_iter().collect();
        let scores = edge_scores(&precisions[g])?;
        let r = pauprc_ratio(&scores, &truth)?;
        pauprc.push(r.pauprc);
        ratios.push(r.ratio);
        density.push(scores.density());
    }
    let labels = crate::engine::argmax_rows(responsibilities);
    let ari = crate::simgen::ari(truth_labels, &labels)?;
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    Ok(EvalReport {
        method: method.to_string(),
        pauprc,
        pauprc_ratio: ratios,
        mean_ratio,
        ari,
        stability_jaccard: None,
        density,
        seconds,
    })
}
