use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITER: usize = 100_000;

fn covariance(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    x.iter_rows()
        .for_each(|r| r.iter().zip(&mut mean).for_each(|(v, m)| *m += v));
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for r in x.iter_rows() {
        for a in 0..d {
            let da = r[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / (n - 1) as f64;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    (mean, cov)
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let lead = v
        .iter()
        .enumerate()
        .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Dominant eigenpair of a symmetric positive semi-definite matrix.
fn power_iteration(cov: &[f64], d: usize) -> (f64, Vec<f64>) {
    // Deterministic start that is not orthogonal to any axis.
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * ((i * 7919 % 17) as f64)).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITER {
        let mut w: Vec<f64> = (0..d).map(|a| (0..d).map(|b| cov[a * d + b] * v[b]).sum()).collect();
        lambda = normalize(&mut w);
        if lambda == 0.0 {
            return (0.0, v);
        }
        fix_sign(&mut w);
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if delta < POWER_TOL {
            break;
        }
    }
    (lambda, v)
}

/// Principal directions and variances of the sample covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Matrix,
    pub components: [Vec<f64>; 2],
    pub variances: [f64; 2],
}

/// Mean-centered projection onto the two leading principal directions.
pub fn pca_project(x: &Matrix) -> Result<Projection> {
    let (n, d) = (x.rows(), x.cols());
    if n < 3 {
        return Err(Error::invalid(format!("projection needs at least 3 points, got {n}")));
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("projection input"));
    }
    let (mean, mut cov) = covariance(x);
    let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
    if trace <= 0.0 {
        return Err(Error::invalid("input has zero variance"));
    }
    let (l1, v1) = power_iteration(&cov, d);
    for a in 0..d {
        for b in 0..d {
            cov[a * d + b] -= l1 * v1[a] * v1[b];
        }
    }
    let (mut l2, mut v2) = power_iteration(&cov, d);
    if l2 <= trace * 1e-15 {
        l2 = 0.0;
        v2 = vec![0.0; d];
    }
    let mut coords = Matrix::zeros(n, 2);
    for (i, r) in x.iter_rows().enumerate() {
        let centered: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
        let out = coords.row_mut(i);
        out[0] = centered.iter().zip(&v1).map(|(a, b)| a * b).sum();
        out[1] = centered.iter().zip(&v2).map(|(a, b)| a * b).sum();
    }
    Ok(Projection {
        coords,
        components: [v1, v2],
        variances: [l1, l2],
    })
}

/// One `id<TAB>x<TAB>y` line per point.
pub fn projection_tsv(ids: &[String], coords: &Matrix) -> Result<String> {
    if ids.len() != coords.rows() || coords.cols() != 2 {
        return Err(Error::shape(format!(
            "{} ids for a {}×{} projection",
            ids.len(),
            coords.rows(),
            coords.cols()
        )));
    }
    let mut out = String::new();
    for (id, r) in ids.iter().zip(coords.iter_rows()) {
        out.push_str(&format!("{id}\t{}\t{}\n", r[0], r[1]));
    }
    Ok(out)
}
