//! k-means with k-means++ seeding and Lloyd iterations.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centers: DMatrix<f64>,
    pub inertia: f64,
}

/// Row-major copy of the data for contiguous row access.
struct Rows<'a> {
    data: &'a [f64],
    p: usize,
}

impl Rows<'_> {
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    fn len(&self) -> usize {
        self.data.len() / self.p
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (g, c) in centers.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (g, d);
        }
    }
    best
}

fn seed_centers(x: &Rows, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut centers = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[0])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = x.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

fn lloyd(x: &Rows, mut centers: Vec<Vec<f64>>, max_iter: usize) -> (Vec<usize>, Vec<Vec<f64>>, f64) {
    let (n, p) = (x.len(), x.p);
    let k = centers.len();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let (g, _) = nearest(x.row(i), &centers);
            if *label != g {
                *label = g;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; p]; k];
        let mut counts = vec![0usize; k];
        for (i, &g) in labels.iter().enumerate() {
            counts[g] += 1;
            for (s, v) in sums[g].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for g in 0..k {
            if counts[g] > 0 {
                for (c, s) in centers[g].iter_mut().zip(&sums[g]) {
                    *c = s / counts[g] as f64;
                }
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(x.row(i), &centers[labels[i]])).sum();
    (labels, centers, inertia)
}

/// Best of `restarts` runs by inertia. Fails when fewer than `k` distinct
/// rows exist or a cluster ends up empty.
pub fn kmeans(x: &DMatrix<f64>, k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("cannot form {k} clusters from {n} rows")));
    }
    let p = x.ncols();
    let transposed = x.transpose();
    let rows = Rows {
        data: transposed.as_slice(),
        p,
    };
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let mut rng = rng::rng_from(seed, &[rng::TAG_KMEANS, r as u64]);
        let centers = seed_centers(&rows, k, &mut rng);
        let (labels, centers, inertia) = lloyd(&rows, centers, 300);
        let mut counts = vec![0usize; k];
        for &g in &labels {
            counts[g] += 1;
        }
        if counts.contains(&0) {
            continue;
        }
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeans {
                labels,
                centers: DMatrix::from_fn(k, p, |g, j| centers[g][j]),
                inertia,
            });
        }
    }
    best.ok_or(Error::EmptyCluster)
}
