use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderState, BETA1, BETA2, EPSILON};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::matrix::Matrix;
use crate::rng::RngStream;

pub const PROBE_HIDDEN: usize = 256;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const SPLIT_STREAM: u64 = 0x5B17;
const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5F0F;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    pub n_classes: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            kind: ProbeKind::Linear,
            n_classes: 10,
            hidden: PROBE_HIDDEN,
            epochs: 100,
            lr: 1e-2,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl ProbeSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| {
            Err(Error::Schema {
                path: path.into(),
                message,
            })
        };
        if self.n_classes < 2 {
            return bad(
                "n_classes",
                format!("a probe needs at least 2 classes, got {}", self.n_classes),
            );
        }
        if self.hidden == 0 {
            return bad("hidden", "must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", format!("must be a positive finite number, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return bad("batch_size", format!("must be at least 2, got {}", self.batch_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeOutcome {
    /// Accuracy on the held-out 20 %.
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// `out (m×n) = a (m×k) · b (k×n)`, either operand optionally transposed.
fn mm(a: &[f64], ta: bool, b: &[f64], tb: bool, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: both operands hold at least m·k and k·n values and the strides
    // stay inside them; `out` is freshly allocated with m·n values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

#[derive(Debug, Clone)]
struct Param {
    value: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    fn new(value: Vec<f64>) -> Self {
        let n = value.len();
        Self {
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn adam(&mut self, grad: &[f64], step: i32, lr: f64) {
        let (c1, c2) = (1.0 - BETA1.powi(step), 1.0 - BETA2.powi(step));
        for (((p, m), v), &g) in self.value.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grad) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
        }
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Dense {
        inp: usize,
        out: usize,
        w: Param,
        b: Param,
    },
    Norm {
        gamma: Param,
        beta: Param,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Relu,
}

enum Cache {
    Dense(Vec<f64>),
    Norm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu(Vec<bool>),
}

impl Layer {
    /// He-normal weights, or zeros when `stream` is `None`.
    fn dense(inp: usize, out: usize, stream: Option<RngStream>) -> Self {
        let w = match stream {
            Some(s) => {
                let normal = Normal::new(0.0, (2.0 / inp as f64).sqrt()).expect("positive std");
                let mut rng = s.rng();
                (0..inp * out).map(|_| normal.sample(&mut rng)).collect()
            }
            None => vec![0.0; inp * out],
        };
        Layer::Dense {
            inp,
            out,
            w: Param::new(w),
            b: Param::new(vec![0.0; out]),
        }
    }

    fn norm(width: usize) -> Self {
        Layer::Norm {
            gamma: Param::new(vec![1.0; width]),
            beta: Param::new(vec![0.0; width]),
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    fn forward(&mut self, x: Vec<f64>, rows: usize, train: bool) -> (Vec<f64>, Cache) {
        match self {
            Layer::Dense { inp, out, w, b } => {
                let mut y = mm(&x, false, &w.value, false, rows, *inp, *out);
                y.chunks_exact_mut(*out)
                    .for_each(|r| r.iter_mut().zip(&b.value).for_each(|(v, b)| *v += b));
                (y, Cache::Dense(x))
            }
            Layer::Norm { gamma, beta, mean, var } => {
                let width = gamma.value.len();
                let (mu, sigma2) = if train {
                    let mut mu = vec![0.0; width];
                    let mut s2 = vec![0.0; width];
                    x.chunks_exact(width)
                        .for_each(|r| r.iter().zip(&mut mu).for_each(|(v, m)| *m += v));
                    mu.iter_mut().for_each(|m| *m /= rows as f64);
                    x.chunks_exact(width).for_each(|r| {
                        r.iter()
                            .zip(&mu)
                            .zip(&mut s2)
                            .for_each(|((v, m), s)| *s += (v - m) * (v - m))
                    });
                    s2.iter_mut().for_each(|s| *s /= rows as f64);
                    let unbias = rows as f64 / (rows as f64 - 1.0);
                    for c in 0..width {
                        mean[c] = (1.0 - BN_MOMENTUM) * mean[c] + BN_MOMENTUM * mu[c];
                        var[c] = (1.0 - BN_MOMENTUM) * var[c] + BN_MOMENTUM * s2[c] * unbias;
                    }
                    (mu, s2)
                } else {
                    (mean.clone(), var.clone())
                };
                let inv_std: Vec<f64> = sigma2.iter().map(|s| 1.0 / (s + BN_EPS).sqrt()).collect();
                let mut xhat = x;
                xhat.chunks_exact_mut(width).for_each(|r| {
                    r.iter_mut()
                        .enumerate()
                        .for_each(|(c, v)| *v = (*v - mu[c]) * inv_std[c])
                });
                let mut y = xhat.clone();
                y.chunks_exact_mut(width).for_each(|r| {
                    r.iter_mut()
                        .enumerate()
                        .for_each(|(c, v)| *v = *v * gamma.value[c] + beta.value[c])
                });
                (y, Cache::Norm { xhat, inv_std })
            }
            Layer::Relu => {
                let mask: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
                let y = x.into_iter().map(|v| v.max(0.0)).collect();
                (y, Cache::Relu(mask))
            }
        }
    }

    /// Returns the input gradient and applies one Adam step.
    fn backward(&mut self, cache: Cache, g: Vec<f64>, rows: usize, step: i32, lr: f64) -> Vec<f64> {
        match (self, cache) {
            (Layer::Dense { inp, out, w, b }, Cache::Dense(x)) => {
                let gw = mm(&x, true, &g, false, *inp, rows, *out);
                let mut gb = vec![0.0; *out];
                g.chunks_exact(*out)
                    .for_each(|r| r.iter().zip(&mut gb).for_each(|(v, s)| *s += v));
                let gx = mm(&g, false, &w.value, true, rows, *out, *inp);
                w.adam(&gw, step, lr);
                b.adam(&gb, step, lr);
                gx
            }
            (Layer::Norm { gamma, beta, .. }, Cache::Norm { xhat, inv_std }) => {
                let width = gamma.value.len();
                let (mut gg, mut gbeta) = (vec![0.0; width], vec![0.0; width]);
                for (gr, xr) in g.chunks_exact(width).zip(xhat.chunks_exact(width)) {
                    for c in 0..width {
                        gg[c] += gr[c] * xr[c];
                        gbeta[c] += gr[c];
                    }
                }
                let inv_n = 1.0 / rows as f64;
                let mut gx = g;
                for (gr, xr) in gx.chunks_exact_mut(width).zip(xhat.chunks_exact(width)) {
                    for c in 0..width {
                        let dxhat = gr[c] * gamma.value[c];
                        gr[c] = inv_std[c] * (dxhat - gamma.value[c] * (gbeta[c] + xr[c] * gg[c]) * inv_n);
                    }
                }
                gamma.adam(&gg, step, lr);
                beta.adam(&gbeta, step, lr);
                gx
            }
            (Layer::Relu, Cache::Relu(mask)) => g.into_iter().zip(mask).map(|(v, m)| if m { v } else { 0.0 }).collect(),
            _ => unreachable!("cache kind always matches its layer"),
        }
    }
}

fn build(spec: &ProbeSpec, features: usize) -> Vec<Layer> {
    let init = RngStream::new(spec.seed, INIT_STREAM);
    match spec.kind {
        ProbeKind::Linear => vec![Layer::dense(features, spec.n_classes, None)],
        ProbeKind::Nonlinear => vec![
            Layer::dense(features, spec.hidden, Some(init.derive(0, 0))),
            Layer::norm(spec.hidden),
            Layer::Relu,
            Layer::dense(spec.hidden, spec.hidden, Some(init.derive(1, 0))),
            Layer::norm(spec.hidden),
            Layer::Relu,
            Layer::dense(spec.hidden, spec.n_classes, None),
        ],
    }
}

fn predict(layers: &mut [Layer], x: Vec<f64>, rows: usize, train: bool) -> (Vec<f64>, Vec<Cache>) {
    let mut caches = Vec::with_capacity(layers.len());
    let mut h = x;
    for layer in layers.iter_mut() {
        let (y, c) = layer.forward(h, rows, train);
        caches.push(c);
        h = y;
    }
    (h, caches)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

fn accuracy(layers: &mut [Layer], x: &[f64], labels: &[usize], classes: usize) -> f64 {
    let (logits, _) = predict(layers, x.to_vec(), labels.len(), false);
    let hits = logits
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(r, &l)| argmax(r) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Trains a classifier on frozen features with a seeded 80/20 split and
/// returns its held-out accuracy. Features are standardized with the
/// training split's per-column mean and deviation.
pub fn train_probe(features: &Matrix, labels: &[usize], spec: &ProbeSpec) -> Result<ProbeOutcome> {
    spec.validate()?;
    let (n, f) = (features.rows(), features.cols());
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} feature rows", labels.len())));
    }
    if n < 10 {
        return Err(Error::invalid(format!("a probe needs at least 10 samples, got {n}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= spec.n_classes) {
        return Err(Error::invalid(format!("label {bad} outside 0..{}", spec.n_classes)));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::invalid("a probe needs at least 2 distinct classes"));
    }
    if features.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe features"));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngStream::new(spec.seed, SPLIT_STREAM).rng());
    let n_test = ((n as f64 * 0.2).round() as usize).max(1);
    let (test_idx, train_idx) = order.split_at(n_test);

    let mut mean = vec![0.0; f];
    let mut std = vec![0.0; f];
    for &i in train_idx {
        features.row(i).iter().zip(&mut mean).for_each(|(v, m)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= train_idx.len() as f64);
    for &i in train_idx {
        features
            .row(i)
            .iter()
            .zip(&mean)
            .zip(&mut std)
            .for_each(|((v, m), s)| *s += (v - m) * (v - m));
    }
    std.iter_mut().for_each(|s| {
        let sd = (*s / train_idx.len() as f64).sqrt();
        *s = if sd > 1e-12 { sd } else { 1.0 };
    });
    let gather = |idx: &[usize]| -> (Vec<f64>, Vec<usize>) {
        let x = idx
            .iter()
            .flat_map(|&i| {
                features
                    .row(i)
                    .iter()
                    .zip(&mean)
                    .zip(&std)
                    .map(|((v, m), s)| (v - m) / s)
            })
            .collect();
        (x, idx.iter().map(|&i| labels[i]).collect())
    };
    let (x_train, y_train) = gather(train_idx);
    let (x_test, y_test) = gather(test_idx);

    let classes = spec.n_classes;
    let mut layers = build(spec, f);
    let mut shuffle = RngStream::new(spec.seed, SHUFFLE_STREAM).rng();
    let mut rows: Vec<usize> = (0..train_idx.len()).collect();
    let mut step = 0i32;
    for _ in 0..spec.epochs {
        rows.shuffle(&mut shuffle);
        for batch in rows.chunks(spec.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let b = batch.len();
            let x: Vec<f64> = batch
                .iter()
                .flat_map(|&r| x_train[r * f..(r + 1) * f].iter().copied())
                .collect();
            let (logits, caches) = predict(&mut layers, x, b, true);
            let mut grad = logits;
            for (row, &r) in grad.chunks_exact_mut(classes).zip(batch) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                row.iter_mut().for_each(|v| *v = (*v - max).exp() / z / b as f64);
                row[y_train[r]] -= 1.0 / b as f64;
            }
            step += 1;
            for (layer, cache) in layers.iter_mut().zip(caches).rev() {
                grad = layer.backward(cache, grad, b, step, spec.lr);
            }
        }
    }
    Ok(ProbeOutcome {
        accuracy: accuracy(&mut layers, &x_test, &y_test, classes),
        train_accuracy: accuracy(&mut layers, &x_train, &y_train, classes),
        n_train: train_idx.len(),
        n_test,
    })
}

/// Where probe features are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    /// Spatial mean of the post-pool activations of block `b` (1-based).
    Block(usize),
    /// The tanh embedding.
    Output,
}

impl std::str::FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "output" | "embedding" => Ok(Tap::Output),
            other => other
                .strip_prefix("block")
                .unwrap_or(other)
                .parse()
                .map(Tap::Block)
                .map_err(|_| Error::invalid(format!("tap `{s}` is neither `output` nor a block number"))),
        }
    }
}

impl std::fmt::Display for Tap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tap::Block(b) => write!(f, "block{b}"),
            Tap::Output => f.write_str("output"),
        }
    }
}

/// Frozen encoder features at `tap`, one row per image.
pub fn tap_features(state: &EncoderState, images: &[Image], tap: Tap) -> Result<Matrix> {
    match tap {
        Tap::Block(b) => state.extract_features(images, b),
        Tap::Output => state.embed(images, state.spec().in_side),
    }
}

/// [`tap_features`] followed by [`train_probe`].
pub fn probe_encoder(
    state: &EncoderState,
    images: &[Image],
    labels: &[usize],
    tap: Tap,
    spec: &ProbeSpec,
) -> Result<ProbeOutcome> {
    train_probe(&tap_features(state, images, tap)?, labels, spec)
}
