//! Embedding activation, centroids, distance matrices, and the two batch
//! losses with analytic gradients.
//!
//! A batch holds `N` sources with `M` embeddings each, stored row-major by
//! `(source, augmentation)`. Centroids are plain means over each source's
//! rows (the row itself included), distances are non-squared Euclidean, and
//! losses are averaged over all `N · M` items. All arithmetic is `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Cross-entropy over `exp(-distance)` scores against all centroids.
    Softmax,
    /// Own-centroid distance minus the distance to the hardest other centroid.
    Contrast,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(LossKind::Softmax),
            "contrast" => Ok(LossKind::Contrast),
            other => Err(Error::invalid(format!("unknown loss kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Softmax => "softmax",
            LossKind::Contrast => "contrast",
        })
    }
}

/// `N × M × D` embeddings, optionally with the pre-tanh values they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub n_sources: usize,
    pub per_source: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    pub pre_activation: Option<Vec<f64>>,
}

impl EmbeddingBatch {
    pub fn new(values: Vec<f64>, n_sources: usize, per_source: usize, dim: usize) -> Result<Self> {
        check_shape(values.len(), n_sources, per_source, dim)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding values"));
        }
        Ok(Self {
            n_sources,
            per_source,
            dim,
            values,
            pre_activation: None,
        })
    }

    pub fn items(&self) -> usize {
        self.n_sources * self.per_source
    }

    /// Embedding row of item `(i, j)`.
    pub fn row(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.per_source + j) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// Chains an embedding gradient through the tanh: `g · (1 - e²)`.
    pub fn tanh_backward(&self, grad: &[f64]) -> Result<Vec<f64>> {
        if grad.len() != self.values.len() {
            return Err(Error::shape("gradient length differs from embedding batch"));
        }
        Ok(grad.iter().zip(&self.values).map(|(g, e)| g * (1.0 - e * e)).collect())
    }
}

fn check_shape(len: usize, n: usize, m: usize, d: usize) -> Result<()> {
    if n < 1 || m < 1 || d < 1 {
        return Err(Error::shape("batch dimensions must all be at least 1"));
    }
    if len != n * m * d {
        return Err(Error::shape(format!(
            "{n}×{m}×{d} batch needs {} values, got {len}",
            n * m * d
        )));
    }
    Ok(())
}

/// Elementwise `tanh`, keeping the pre-activation for gradient chaining.
pub fn tanh_embed(pre_activation: Vec<f64>, n_sources: usize, per_source: usize, dim: usize) -> Result<EmbeddingBatch> {
    check_shape(pre_activation.len(), n_sources, per_source, dim)?;
    if pre_activation.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pre-activation"));
    }
    let values = pre_activation.iter().map(|v| v.tanh()).collect();
    Ok(EmbeddingBatch {
        n_sources,
        per_source,
        dim,
        values,
        pre_activation: Some(pre_activation),
    })
}

/// `N × D` per-source means.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl Centroids {
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }
}

pub fn centroids(e: &EmbeddingBatch) -> Centroids {
    let (n, m, d) = (e.n_sources, e.per_source, e.dim);
    let mut values = vec![0.0; n * d];
    for i in 0..n {
        let c = &mut values[i * d..(i + 1) * d];
        for j in 0..m {
            for (acc, v) in c.iter_mut().zip(e.row(i, j)) {
                *acc += v;
            }
        }
        c.iter_mut().for_each(|v| *v /= m as f64);
    }
    Centroids { dim: d, values }
}

/// `(N·M) × N` matrix of item-to-centroid distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    #[inline]
    pub fn get(&self, item: usize, k: usize) -> f64 {
        self.values[item * self.cols + k]
    }
}

pub fn pairwise_l2(e: &EmbeddingBatch, c: &Centroids) -> Result<DistanceMatrix> {
    if e.dim != c.dim {
        return Err(Error::shape(format!(
            "embedding dim {} vs centroid dim {}",
            e.dim, c.dim
        )));
    }
    let d = e.dim;
    let cols = c.len();
    let rows = e.items();
    let mut values = Vec::with_capacity(rows * cols);
    for item in e.values.chunks_exact(d) {
        for k in 0..cols {
            values.push(l2(item, c.row(k)));
        }
    }
    Ok(DistanceMatrix { rows, cols, values })
}

#[inline]
fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    /// Mean of the per-item losses.
    pub value: f64,
    /// `∂value / ∂e`, same layout as the embedding batch.
    pub grad: Vec<f64>,
    pub per_item: Vec<f64>,
    /// Softmax only: `(N·M) × N` class probabilities.
    pub probabilities: Option<Vec<f64>>,
}

pub fn loss(kind: LossKind, e: &EmbeddingBatch) -> Result<LossResult> {
    match kind {
        LossKind::Softmax => softmax_loss(e),
        LossKind::Contrast => contrast_loss(e),
    }
}

/// `L_ij = d(e_ij, c_i) + log Σ_k exp(-d(e_ij, c_k))`, evaluated with a
/// max-shifted log-sum-exp.
pub fn softmax_loss(e: &EmbeddingBatch) -> Result<LossResult> {
    let (n, m) = (e.n_sources, e.per_source);
    require_negatives(n)?;
    let c = centroids(e);
    let dist = pairwise_l2(e, &c)?;
    let scale = 1.0 / (n * m) as f64;
    let mut per_item = Vec::with_capacity(n * m);
    let mut probs = vec![0.0; n * m * n];
    let mut dloss_ddist = vec![0.0; n * m * n];
    for item in 0..n * m {
        let own = item / m;
        let row = &dist.values[item * n..(item + 1) * n];
        let shift = row.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let sum: f64 = row.iter().map(|&dk| (shift - dk).exp()).sum();
        let lse = sum.ln() - shift;
        per_item.push(row[own] + lse);
        for k in 0..n {
            let p = (shift - row[k]).exp() / sum;
            probs[item * n + k] = p;
            let indicator = if k == own { 1.0 } else { 0.0 };
            dloss_ddist[item * n + k] = scale * (indicator - p);
        }
    }
    let grad = chain_distances(e, &c, &dist, &dloss_ddist);
    Ok(LossResult {
        value: per_item.iter().sum::<f64>() * scale,
        grad,
        per_item,
        probabilities: Some(probs),
    })
}

/// `L_ij = d(e_ij, c_i) - min_{k≠i} d(e_ij, c_k)`; ties choose the smallest `k`.
pub fn contrast_loss(e: &EmbeddingBatch) -> Result<LossResult> {
    let (n, m) = (e.n_sources, e.per_source);
    require_negatives(n)?;
    let c = centroids(e);
    let dist = pairwise_l2(e, &c)?;
    let scale = 1.0 / (n * m) as f64;
    let mut per_item = Vec::with_capacity(n * m);
    let mut dloss_ddist = vec![0.0; n * m * n];
    for item in 0..n * m {
        let own = item / m;
        let row = &dist.values[item * n..(item + 1) * n];
        let (hard, hard_d) =
            row.iter()
                .enumerate()
                .filter(|&(k, _)| k != own)
                .fold(
                    (usize::MAX, f64::INFINITY),
                    |best, (k, &dk)| if dk < best.1 { (k, dk) } else { best },
                );
        per_item.push(row[own] - hard_d);
        dloss_ddist[item * n + own] = scale;
        dloss_ddist[item * n + hard] = -scale;
    }
    let grad = chain_distances(e, &c, &dist, &dloss_ddist);
    Ok(LossResult {
        value: per_item.iter().sum::<f64>() * scale,
        grad,
        per_item,
        probabilities: None,
    })
}

fn require_negatives(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid(format!("loss needs at least 2 sources, got {n}")));
    }
    Ok(())
}

/// Back-propagates `∂L/∂d(item, k)` to the embeddings, through both the
/// direct item term and each centroid's dependence on its `M` members.
fn chain_distances(e: &EmbeddingBatch, c: &Centroids, dist: &DistanceMatrix, g: &[f64]) -> Vec<f64> {
    let (n, m, d) = (e.n_sources, e.per_source, e.dim);
    let mut grad = vec![0.0; n * m * d];
    let mut centroid_grad = vec![0.0; n * d];
    let mut unit = vec![0.0; d];
    for item in 0..n * m {
        let x = &e.values[item * d..(item + 1) * d];
        for k in 0..n {
            let gk = g[item * n + k];
            let dk = dist.get(item, k);
            // Subgradient of the distance at zero is taken as zero.
            if gk == 0.0 || dk == 0.0 {
                continue;
            }
            for ((u, a), b) in unit.iter_mut().zip(x).zip(c.row(k)) {
                *u = (a - b) / dk;
            }
            for t in 0..d {
                grad[item * d + t] += gk * unit[t];
                centroid_grad[k * d + t] -= gk * unit[t];
            }
        }
    }
    let inv_m = 1.0 / m as f64;
    for item in 0..n * m {
        let own = item / m;
        for t in 0..d {
            grad[item * d + t] += centroid_grad[own * d + t] * inv_m;
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, m: usize, d: usize) -> EmbeddingBatch {
        let v = (0..n * m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingBatch::new(v, n, m, d).unwrap()
    }

    fn fd_check(kind: LossKind, e: &EmbeddingBatch, tol: f64) {
        let r = loss(kind, e).unwrap();
        let eps = 1e-5;
        for t in 0..e.values.len() {
            let mut plus = e.clone();
            plus.values[t] += eps;
            let mut minus = e.clone();
            minus.values[t] -= eps;
            let fd = (loss(kind, &plus).unwrap().value - loss(kind, &minus).unwrap().value) / (2.0 * eps);
            let err = (fd - r.grad[t]).abs() / fd.abs().max(r.grad[t].abs()).max(1e-6);
            assert!(err < tol, "{kind} coord {t}: fd {fd} analytic {}", r.grad[t]);
        }
    }

    #[test]
    fn tanh_examples() {
        let e = tanh_embed(vec![0.0, 100.0, 0.5, -100.0], 2, 1, 2).unwrap();
        assert_eq!(e.values[0], 0.0);
        assert!(e.values[1] <= 1.0 && e.values[1] > 0.99);
        assert!((e.values[2] - 0.46211715726).abs() < 1e-11);
        assert!(tanh_embed(vec![f64::NAN, 0.0], 2, 1, 1).is_err());
    }

    #[test]
    fn centroid_examples() {
        let e = EmbeddingBatch::new(vec![1.0, 0.0, 0.0, 1.0, 3.0, 3.0, 5.0, 5.0], 2, 2, 2).unwrap();
        let c = centroids(&e);
        assert_eq!(c.row(0), &[0.5, 0.5]);
        assert_eq!(c.row(1), &[4.0, 4.0]);
        let single = EmbeddingBatch::new(vec![0.1, 0.2, 0.3], 3, 1, 1).unwrap();
        assert_eq!(centroids(&single).values, single.values);
    }

    #[test]
    fn distance_examples() {
        let e = EmbeddingBatch::new(vec![0.0, 2.0], 2, 1, 1).unwrap();
        let c = centroids(&e);
        let dm = pairwise_l2(&e, &c).unwrap();
        assert_eq!(dm.values, vec![0.0, 2.0, 2.0, 0.0]);
        let wrong = Centroids {
            dim: 2,
            values: vec![0.0; 4],
        };
        assert!(pairwise_l2(&e, &wrong).is_err());
    }

    #[test]
    fn softmax_two_point_closed_form() {
        let e = EmbeddingBatch::new(vec![0.0, 2.0], 2, 1, 1).unwrap();
        let r = softmax_loss(&e).unwrap();
        let p = r.probabilities.as_ref().unwrap();
        let p_own = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((p[0] - 0.880797077978).abs() < 1e-9);
        assert!((p[0] - p_own).abs() < 1e-15);
        assert!((r.per_item[0] - 0.126928011043).abs() < 1e-9);
        assert!((r.per_item[1] - r.per_item[0]).abs() < 1e-15);
        assert!((r.value - 0.126928011043).abs() < 1e-9);
    }

    #[test]
    fn softmax_equidistant_is_log_n() {
        // Identical embeddings put every centroid at the same point.
        let same = EmbeddingBatch::new(vec![0.3; 4 * 2 * 3], 4, 2, 3).unwrap();
        let r = softmax_loss(&same).unwrap();
        assert!(r.probabilities.unwrap().iter().all(|&q| (q - 0.25).abs() < 1e-15));
        assert!(r.per_item.iter().all(|&l| (l - 4f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = softmax_loss(&random_batch(&mut rng, 5, 3, 4)).unwrap();
        for row in r.probabilities.unwrap().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn contrast_symmetric_case() {
        let e = EmbeddingBatch::new(vec![-1.0, -1.0, 1.0, 1.0], 2, 2, 1).unwrap();
        let r = contrast_loss(&e).unwrap();
        assert_eq!(r.per_item, vec![-2.0; 4]);
        assert_eq!(r.value, -2.0);
    }

    #[test]
    fn contrast_equidistant_is_zero() {
        // Item (0,0) at 0; own centroid and source-1 centroid both at distance 1.
        let v = vec![0.0, 2.0, -1.0, -1.0, 5.0, 5.0];
        let e = EmbeddingBatch::new(v, 3, 2, 1).unwrap();
        let r = contrast_loss(&e).unwrap();
        assert!(r.per_item[0].abs() < 1e-15);
    }

    #[test]
    fn fewer_than_two_sources_rejected() {
        let e = EmbeddingBatch::new(vec![0.0; 6], 1, 3, 2).unwrap();
        assert!(softmax_loss(&e).is_err());
        assert!(contrast_loss(&e).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        fd_check(LossKind::Softmax, &random_batch(&mut rng, 3, 2, 4), 1e-4);
        fd_check(LossKind::Contrast, &random_batch(&mut rng, 4, 3, 6), 1e-4);
    }

    #[test]
    fn contrast_gradient_near_selection_boundary() {
        // Item (0,0) sits between the centroids of sources 1 and 2 with a
        // 1e-3 margin in favour of source 1.
        let v = vec![
            0.0, 0.0, 0.3, 0.1, // source 0
            1.0, 0.0, 1.0, 0.0, // source 1, centroid (1, 0)
            -1.001, 0.0, -1.001, 0.0, // source 2, centroid (-1.001, 0)
            0.0, 4.0, 0.0, 4.0, // source 3, far away
        ];
        let e = EmbeddingBatch::new(v, 4, 2, 2).unwrap();
        fd_check(LossKind::Contrast, &e, 1e-4);
    }
}
