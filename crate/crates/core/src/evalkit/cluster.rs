use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{sq_dist, Matrix};
use crate::rng::RngStream;

pub const KMEANS_TOL: f64 = 1e-6;
pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_RESTARTS: usize = 10;
const KMEANS_STREAM: u64 = 0x4B4D;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centers: Matrix,
    pub inertia: f64,
    /// Inertia after every assignment and every center update of the
    /// winning restart, in order.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn nearest(x: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centers.iter_rows().enumerate() {
        let d = sq_dist(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus<R: Rng>(x: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = x.rows();
    let mut centers = Matrix::zeros(k, x.cols());
    centers.row_mut(0).copy_from_slice(x.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = x.iter_rows().map(|r| sq_dist(r, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(x.row(pick));
        for (i, r) in x.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, centers.row(c)));
        }
    }
    centers
}

fn assign(x: &Matrix, centers: &Matrix, labels: &mut [usize], d2: &mut [f64]) -> f64 {
    for (i, r) in x.iter_rows().enumerate() {
        (labels[i], d2[i]) = nearest(r, centers);
    }
    d2.iter().sum()
}

fn inertia_of(x: &Matrix, centers: &Matrix, labels: &[usize]) -> f64 {
    x.iter_rows()
        .zip(labels)
        .map(|(r, &l)| sq_dist(r, centers.row(l)))
        .sum()
}

/// Moves the farthest member of a multi-member cluster into each empty
/// cluster. Returns whether anything moved.
fn reseed_empty(x: &Matrix, centers: &mut Matrix, labels: &mut [usize], d2: &mut [f64]) -> bool {
    let k = centers.rows();
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    let mut moved = false;
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let far = (0..labels.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| d2[a].total_cmp(&d2[b]).then(b.cmp(&a)));
        let Some(i) = far else { break };
        counts[labels[i]] -= 1;
        counts[c] = 1;
        labels[i] = c;
        d2[i] = 0.0;
        centers.row_mut(c).copy_from_slice(x.row(i));
        moved = true;
    }
    moved
}

fn update_centers(x: &Matrix, labels: &[usize], centers: &mut Matrix) -> f64 {
    let (k, d) = (centers.rows(), centers.cols());
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (r, &l) in x.iter_rows().zip(labels) {
        counts[l] += 1;
        sums.row_mut(l).iter_mut().zip(r).for_each(|(s, v)| *s += v);
    }
    let mut shift = 0.0f64;
    for (c, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let inv = 1.0 / count as f64;
        let mean: Vec<f64> = sums.row(c).iter().map(|s| s * inv).collect();
        shift = shift.max(sq_dist(&mean, centers.row(c)).sqrt());
        centers.row_mut(c).copy_from_slice(&mean);
    }
    shift
}

fn lloyd(x: &Matrix, k: usize, stream: &RngStream) -> ClusterAssignment {
    let mut rng = stream.rng();
    let mut centers = plus_plus(x, k, &mut rng);
    let n = x.rows();
    let mut labels = vec![0usize; n];
    let mut d2 = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut inertia = assign(x, &centers, &mut labels, &mut d2);
        if reseed_empty(x, &mut centers, &mut labels, &mut d2) {
            inertia = d2.iter().sum();
        }
        history.push(inertia);
        let shift = update_centers(x, &labels, &mut centers);
        history.push(inertia_of(x, &centers, &labels));
        if shift < KMEANS_TOL {
            break;
        }
    }
    let inertia = assign(x, &centers, &mut labels, &mut d2);
    history.push(inertia);
    ClusterAssignment {
        labels,
        centers,
        inertia,
        history,
        iterations,
    }
}

/// k-means++ seeding followed by Lloyd iterations, best inertia over
/// `restarts` independent runs (ties resolved by restart index).
pub fn kmeans(x: &Matrix, k: usize, seed: u64, restarts: usize) -> Result<ClusterAssignment> {
    if k == 0 || k > x.rows() {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={}", x.rows())));
    }
    if restarts == 0 {
        return Err(Error::invalid("at least one restart is required"));
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kmeans input"));
    }
    let stream = RngStream::new(seed, KMEANS_STREAM);
    let runs: Vec<ClusterAssignment> = (0..restarts)
        .into_par_iter()
        .map(|r| lloyd(x, k, &stream.derive(r as u64, 0)))
        .collect();
    let best = runs
        .into_iter()
        .reduce(|best, run| if run.inertia < best.inertia { run } else { best })
        .expect("restarts > 0");
    Ok(best)
}

/// Minimum-cost perfect assignment for a square cost matrix; element `r`
/// of the result is the column assigned to row `r`.
pub fn hungarian_min(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based potentials formulation; column 0 is a virtual start.
    let (mut u, mut v) = (vec![0i64; n + 1], vec![0i64; n + 1]);
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = i64::MAX;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let cur = cost[r0 - 1][col - 1] - u[r0] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for col in 1..=n {
        if owner[col] > 0 {
            assignment[owner[col] - 1] = col - 1;
        }
    }
    assignment
}

/// Fraction of items whose cluster maps to their class under the best
/// one-to-one cluster-to-class matching.
pub fn hungarian_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("no labels given"));
    }
    let dense = |v: &[usize]| {
        let mut keys = v.to_vec();
        keys.sort_unstable();
        keys.dedup();
        let idx: Vec<usize> = v.iter().map(|x| keys.binary_search(x).expect("present")).collect();
        (idx, keys.len())
    };
    let ((p_idx, kp), (t_idx, kt)) = (dense(pred), dense(truth));
    let size = kp.max(kt);
    let mut counts = vec![vec![0i64; size]; size];
    for (&p, &t) in p_idx.iter().zip(&t_idx) {
        counts[p][t] += 1;
    }
    let cost: Vec<Vec<i64>> = counts.iter().map(|row| row.iter().map(|&c| -c).collect()).collect();
    let matched: i64 = hungarian_min(&cost)
        .iter()
        .enumerate()
        .map(|(p, &t)| counts[p][t])
        .sum();
    Ok(matched as f64 / pred.len() as f64)
}
