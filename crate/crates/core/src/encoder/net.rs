//! Convolutional encoder engine, generic over `f32` / `f64`.
//!
//! Activations are stored channel-major over the whole batch
//! (`C × B × S × S`), so each 3×3 convolution is one GEMM of the weight
//! matrix against an im2col buffer of width `B·S²` and batch-norm statistics
//! are row reductions.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const CONVS_PER_BLOCK: usize = 3;
const GROUP_COLUMNS: usize = 2048;

pub trait Real:
    Copy
    + Send
    + Sync
    + Default
    + PartialOrd
    + Debug
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `C ← alpha·A·B + beta·C` with arbitrary element strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing (for `c`)
    /// matrices of the given shapes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided view of a matrix operand.
#[derive(Clone, Copy)]
struct Operand<'a, T> {
    data: &'a [T],
    rs: usize,
    cs: usize,
}

impl<'a, T> Operand<'a, T> {
    /// Row-major `rows × cols` storage.
    fn normal(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transpose of row-major storage with `cols` columns.
    fn transposed(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    fn span(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `out (m×n, row-major) ← a (m×k) · b (k×n) + beta · out`.
fn matmul<T: Real>(m: usize, k: usize, n: usize, a: Operand<T>, b: Operand<T>, beta: T, out: &mut [T]) {
    gemm_into(m, k, n, a, b, beta, out, n)
}

/// As [`matmul`] with output row stride `rsc`.
#[allow(clippy::too_many_arguments)]
fn gemm_into<T: Real>(m: usize, k: usize, n: usize, a: Operand<T>, b: Operand<T>, beta: T, out: &mut [T], rsc: usize) {
    assert!(a.data.len() >= a.span(m, k));
    assert!(b.data.len() >= b.span(k, n));
    assert!(m == 0 || out.len() >= (m - 1) * rsc + n);
    // SAFETY: bounds asserted above; `out` is uniquely borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            rsc as isize,
            1,
        )
    }
}

/// Offsets of one convolution + batch-norm layer inside the flat parameter
/// and buffer vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayer {
    pub cin: usize,
    pub cout: usize,
    pub side: usize,
    pub weight: usize,
    pub bias: usize,
    pub gamma: usize,
    pub beta: usize,
    /// Running mean at `running`, running variance at `running + cout`.
    pub running: usize,
}

impl ConvLayer {
    pub fn fan_in(&self) -> usize {
        self.cin * 9
    }
}

/// Parameter layout of the whole encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetLayout {
    pub in_channels: usize,
    pub in_side: usize,
    pub blocks: Vec<Vec<ConvLayer>>,
    pub head_in: usize,
    pub embed_dim: usize,
    pub head_weight: usize,
    pub head_bias: usize,
    pub param_count: usize,
    pub buffer_count: usize,
}

/// A named slice of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl NetLayout {
    pub fn new(in_channels: usize, in_side: usize, block_channels: &[usize], embed_dim: usize) -> Self {
        let mut offset = 0;
        let mut running = 0;
        let mut cin = in_channels;
        let mut side = in_side;
        let mut blocks = Vec::with_capacity(block_channels.len());
        for &cout in block_channels {
            let mut layers = Vec::with_capacity(CONVS_PER_BLOCK);
            for _ in 0..CONVS_PER_BLOCK {
                let weight = offset;
                offset += cout * cin * 9;
                let layer = ConvLayer {
                    cin,
                    cout,
                    side,
                    weight,
                    bias: offset,
                    gamma: offset + cout,
                    beta: offset + 2 * cout,
                    running,
                };
                offset += 3 * cout;
                running += 2 * cout;
                layers.push(layer);
                cin = cout;
            }
            blocks.push(layers);
            side /= 2;
        }
        let head_weight = offset;
        let head_bias = offset + embed_dim * cin;
        Self {
            in_channels,
            in_side,
            blocks,
            head_in: cin,
            embed_dim,
            head_weight,
            head_bias,
            param_count: head_bias + embed_dim,
            buffer_count: running,
        }
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.blocks.iter().flatten()
    }

    /// Tensors in storage order.
    pub fn tensors(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for (l, layer) in block.iter().enumerate() {
                let p = format!("block{}.conv{}", b + 1, l + 1);
                out.push(TensorInfo {
                    name: format!("{p}.weight"),
                    offset: layer.weight,
                    len: layer.cout * layer.fan_in(),
                });
                out.push(TensorInfo {
                    name: format!("{p}.bias"),
                    offset: layer.bias,
                    len: layer.cout,
                });
                out.push(TensorInfo {
                    name: format!("{p}.bn.scale"),
                    offset: layer.gamma,
                    len: layer.cout,
                });
                out.push(TensorInfo {
                    name: format!("{p}.bn.shift"),
                    offset: layer.beta,
                    len: layer.cout,
                });
            }
        }
        out.push(TensorInfo {
            name: "head.weight".into(),
            offset: self.head_weight,
            len: self.embed_dim * self.head_in,
        });
        out.push(TensorInfo {
            name: "head.bias".into(),
            offset: self.head_bias,
            len: self.embed_dim,
        });
        out
    }

    /// Spatial side of the map produced by block `b` (1-based).
    pub fn tap_side(&self, b: usize) -> usize {
        self.in_side >> b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm; records a tape for backward.
    Train,
    /// Running statistics in batch-norm.
    Infer,
}

/// Post-pool activation map of one block, `channels × batch × side × side`.
#[derive(Debug, Clone, PartialEq)]
pub struct TapMap<T> {
    pub channels: usize,
    pub batch: usize,
    pub side: usize,
    pub data: Vec<T>,
}

impl<T: Real> TapMap<T> {
    /// Spatial mean per `(image, channel)`, returned row-major `batch × channels`.
    pub fn spatial_mean(&self) -> Vec<f64> {
        let area = self.side * self.side;
        let mut out = vec![0.0; self.batch * self.channels];
        for c in 0..self.channels {
            for b in 0..self.batch {
                let start = (c * self.batch + b) * area;
                let s: f64 = self.data[start..start + area].iter().map(|v| v.to_f64()).sum();
                out[b * self.channels + c] = s / area as f64;
            }
        }
        out
    }
}

pub type FeatureTaps<T> = Vec<TapMap<T>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// `batch × embed_dim`, row-major.
    pub pre_activation: Vec<T>,
    pub batch: usize,
    pub dim: usize,
    pub taps: FeatureTaps<T>,
}

#[derive(Debug)]
struct LayerTape<T> {
    input: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

#[derive(Debug)]
struct PoolTape {
    argmax: Vec<u8>,
}

/// Everything backward needs from a training-mode forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    batch: usize,
    layers: Vec<LayerTape<T>>,
    pools: Vec<PoolTape>,
    features: Vec<T>,
}

pub struct Forward<T> {
    pub output: ForwardOutput<T>,
    pub tape: Option<Tape<T>>,
    /// Training mode: per batch-norm layer batch mean and unbiased variance,
    /// laid out like the running buffers.
    pub batch_stats: Option<Vec<T>>,
}

/// Columns for images `b0..b0 + g` of a `c × batch × s × s` activation;
/// `cols` is `(c·9) × (g·s²)`.
fn im2col<T: Real>(x: &[T], c: usize, batch: usize, b0: usize, g: usize, s: usize, cols: &mut [T]) {
    let area = s * s;
    let n = g * area;
    for ci in 0..c {
        let src = &x[(ci * batch + b0) * area..][..n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * n..][..n];
                for (img, dst) in src.chunks_exact(area).zip(row.chunks_exact_mut(area)) {
                    for y in 0..s {
                        let drow = &mut dst[y * s..(y + 1) * s];
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= s as isize {
                            drow.fill(T::ZERO);
                            continue;
                        }
                        let srow = &img[yy as usize * s..][..s];
                        match kx {
                            0 => {
                                drow[0] = T::ZERO;
                                drow[1..].copy_from_slice(&srow[..s - 1]);
                            }
                            1 => drow.copy_from_slice(srow),
                            _ => {
                                drow[..s - 1].copy_from_slice(&srow[1..]);
                                drow[s - 1] = T::ZERO;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` into images `b0..b0 + g` of `x`.
fn col2im<T: Real>(cols: &[T], c: usize, batch: usize, b0: usize, g: usize, s: usize, x: &mut [T]) {
    let area = s * s;
    let n = g * area;
    for ci in 0..c {
        let dst = &mut x[(ci * batch + b0) * area..][..n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * n..][..n];
                for (src, img) in row.chunks_exact(area).zip(dst.chunks_exact_mut(area)) {
                    for y in 0..s {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= s as isize {
                            continue;
                        }
                        let srow = &src[y * s..(y + 1) * s];
                        let drow = &mut img[yy as usize * s..][..s];
                        match kx {
                            0 => {
                                for (d, &v) in drow[..s - 1].iter_mut().zip(&srow[1..]) {
                                    *d += v;
                                }
                            }
                            1 => {
                                for (d, &v) in drow.iter_mut().zip(srow) {
                                    *d += v;
                                }
                            }
                            _ => {
                                for (d, &v) in drow[1..].iter_mut().zip(&srow[..s - 1]) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Images per im2col group, keeping the column buffer cache-sized.
fn group_size(batch: usize, area: usize) -> usize {
    (GROUP_COLUMNS / area).clamp(1, batch)
}

/// `z (cout × batch·s²) ← W · im2col(x)`, computed group by group.
fn conv_forward<T: Real>(layer: &ConvLayer, w: &[T], x: &[T], batch: usize, z: &mut [T], cols: &mut Vec<T>) {
    let s = layer.side;
    let area = s * s;
    let n = batch * area;
    let k = layer.fan_in();
    let g = group_size(batch, area);
    cols.resize(k * g * area, T::ZERO);
    let mut b0 = 0;
    while b0 < batch {
        let gb = g.min(batch - b0);
        let gn = gb * area;
        im2col(x, layer.cin, batch, b0, gb, s, &mut cols[..k * gn]);
        gemm_into(
            layer.cout,
            k,
            gn,
            Operand::normal(w, k),
            Operand::normal(&cols[..k * gn], gn),
            T::ZERO,
            &mut z[b0 * area..],
            n,
        );
        b0 += gb;
    }
}

/// Accumulates `dW` and, when `dx` is given, the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    layer: &ConvLayer,
    w: &[T],
    x: &[T],
    dz: &[T],
    batch: usize,
    dw: &mut [T],
    mut dx: Option<&mut [T]>,
    cols: &mut Vec<T>,
) {
    let s = layer.side;
    let area = s * s;
    let n = batch * area;
    let k = layer.fan_in();
    let g = group_size(batch, area);
    cols.resize(k * g * area, T::ZERO);
    dw.fill(T::ZERO);
    if let Some(dx) = dx.as_deref_mut() {
        dx.fill(T::ZERO);
    }
    let mut b0 = 0;
    while b0 < batch {
        let gb = g.min(batch - b0);
        let gn = gb * area;
        let dz_g = Operand {
            data: &dz[b0 * area..],
            rs: n,
            cs: 1,
        };
        im2col(x, layer.cin, batch, b0, gb, s, &mut cols[..k * gn]);
        gemm_into(
            layer.cout,
            gn,
            k,
            dz_g,
            Operand::transposed(&cols[..k * gn], gn),
            T::ONE,
            dw,
            k,
        );
        if let Some(dx) = dx.as_deref_mut() {
            gemm_into(
                k,
                layer.cout,
                gn,
                Operand::transposed(w, k),
                dz_g,
                T::ZERO,
                &mut cols[..k * gn],
                gn,
            );
            col2im(&cols[..k * gn], layer.cin, batch, b0, gb, s, dx);
        }
        b0 += gb;
    }
}

fn max_pool<T: Real>(x: &[T], c: usize, b: usize, s: usize) -> (Vec<T>, Vec<u8>) {
    let h = s / 2;
    let mut out = Vec::with_capacity(c * b * h * h);
    let mut arg = Vec::with_capacity(c * b * h * h);
    for plane in x.chunks_exact(s * s).take(c * b) {
        for y in 0..h {
            for xo in 0..h {
                let base = 2 * y * s + 2 * xo;
                let cand = [plane[base], plane[base + 1], plane[base + s], plane[base + s + 1]];
                let mut best = 0;
                for k in 1..4 {
                    if cand[k] > cand[best] {
                        best = k;
                    }
                }
                out.push(cand[best]);
                arg.push(best as u8);
            }
        }
    }
    (out, arg)
}

fn max_pool_backward<T: Real>(grad: &[T], arg: &[u8], c: usize, b: usize, s: usize) -> Vec<T> {
    let h = s / 2;
    let mut dx = vec![T::ZERO; c * b * s * s];
    for (p, plane) in dx.chunks_exact_mut(s * s).enumerate() {
        for y in 0..h {
            for xo in 0..h {
                let o = p * h * h + y * h + xo;
                let k = arg[o] as usize;
                plane[(2 * y + k / 2) * s + 2 * xo + k % 2] = grad[o];
            }
        }
    }
    dx
}

fn nchw_to_cbhw<T: Real>(input: &[T], b: usize, c: usize, area: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; input.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(ci * b + bi) * area..][..area].copy_from_slice(&input[(bi * c + ci) * area..][..area]);
        }
    }
    out
}

/// Runs the encoder on `batch` images given NCHW (`batch × C × S × S`).
pub fn forward<T: Real>(
    layout: &NetLayout,
    params: &[T],
    buffers: &[T],
    input: &[T],
    batch: usize,
    mode: Mode,
) -> Result<Forward<T>> {
    let area = layout.in_side * layout.in_side;
    if params.len() != layout.param_count || buffers.len() != layout.buffer_count {
        return Err(Error::shape("parameter or buffer vector does not match the layout"));
    }
    if batch == 0 || input.len() != batch * layout.in_channels * area {
        return Err(Error::shape(format!(
            "expected {batch}×{}×{}×{} inputs, got {} values",
            layout.in_channels,
            layout.in_side,
            layout.in_side,
            input.len()
        )));
    }
    let train = mode == Mode::Train;
    let mut x = nchw_to_cbhw(input, batch, layout.in_channels, area);
    let mut layer_tapes = Vec::new();
    let mut pool_tapes = Vec::new();
    let mut taps = Vec::with_capacity(layout.blocks.len());
    let mut stats = train.then(|| vec![T::ZERO; layout.buffer_count]);
    let mut cols = Vec::new();

    for block in &layout.blocks {
        for layer in block {
            let s = layer.side;
            let n = batch * s * s;
            let k = layer.fan_in();
            let mut z = vec![T::ZERO; layer.cout * n];
            let w = &params[layer.weight..layer.weight + layer.cout * k];
            conv_forward(layer, w, &x, batch, &mut z, &mut cols);

            let mut inv_std = vec![T::ZERO; layer.cout];
            for (co, row) in z.chunks_exact_mut(n).enumerate() {
                let bias = params[layer.bias + co];
                let (mean, var) = if train {
                    let sum: f64 = row.iter().map(|v| (*v + bias).to_f64()).sum();
                    let mean = sum / n as f64;
                    let var = row.iter().map(|v| ((*v + bias).to_f64() - mean).powi(2)).sum::<f64>() / n as f64;
                    if let Some(st) = stats.as_mut() {
                        st[layer.running + co] = T::from_f64(mean);
                        let unbiased = if n > 1 { var * n as f64 / (n - 1) as f64 } else { var };
                        st[layer.running + layer.cout + co] = T::from_f64(unbiased);
                    }
                    (mean, var)
                } else {
                    (
                        buffers[layer.running + co].to_f64(),
                        buffers[layer.running + layer.cout + co].to_f64(),
                    )
                };
                let istd = 1.0 / (var + BN_EPS).sqrt();
                inv_std[co] = T::from_f64(istd);
                let shift = T::from_f64(mean) - bias;
                let istd = T::from_f64(istd);
                for v in row.iter_mut() {
                    *v = (*v - shift) * istd;
                }
            }
            // z now holds x̂; produce the post-ReLU activation.
            let mut out = z.clone();
            for (co, row) in out.chunks_exact_mut(n).enumerate() {
                let g = params[layer.gamma + co];
                let bt = params[layer.beta + co];
                for v in row.iter_mut() {
                    let y = g * *v + bt;
                    *v = if y > T::ZERO { y } else { T::ZERO };
                }
            }
            let input_act = std::mem::replace(&mut x, out);
            if train {
                layer_tapes.push(LayerTape {
                    input: input_act,
                    xhat: z,
                    inv_std,
                });
            }
        }
        let last = block.last().expect("blocks hold three layers");
        let (pooled, argmax) = max_pool(&x, last.cout, batch, last.side);
        x = pooled;
        taps.push(TapMap {
            channels: last.cout,
            batch,
            side: last.side / 2,
            data: x.clone(),
        });
        if train {
            pool_tapes.push(PoolTape { argmax });
        }
    }

    let c = layout.head_in;
    let side = taps.last().map_or(layout.in_side, |t| t.side);
    let tap_area = side * side;
    let mut features = vec![T::ZERO; c * batch];
    for (f, plane) in features.iter_mut().zip(x.chunks_exact(tap_area)) {
        let s: f64 = plane.iter().map(|v| v.to_f64()).sum();
        *f = T::from_f64(s / tap_area as f64);
    }
    let d = layout.embed_dim;
    let mut pre = vec![T::ZERO; batch * d];
    for row in pre.chunks_exact_mut(d) {
        row.copy_from_slice(&params[layout.head_bias..layout.head_bias + d]);
    }
    let hw = &params[layout.head_weight..layout.head_weight + d * c];
    matmul(
        batch,
        c,
        d,
        Operand::transposed(&features, batch),
        Operand::transposed(hw, c),
        T::ONE,
        &mut pre,
    );

    let tape = train.then_some(Tape {
        batch,
        layers: layer_tapes,
        pools: pool_tapes,
        features,
    });
    Ok(Forward {
        output: ForwardOutput {
            pre_activation: pre,
            batch,
            dim: d,
            taps,
        },
        tape,
        batch_stats: stats,
    })
}

/// Gradient of `Σ grad_out · pre_activation` with respect to every parameter.
pub fn backward<T: Real>(layout: &NetLayout, params: &[T], tape: &Tape<T>, grad_out: &[T]) -> Result<Vec<T>> {
    let batch = tape.batch;
    let d = layout.embed_dim;
    let c = layout.head_in;
    if grad_out.len() != batch * d {
        return Err(Error::shape(format!(
            "expected {}×{d} output gradient, got {}",
            batch,
            grad_out.len()
        )));
    }
    let mut grad = vec![T::ZERO; layout.param_count];

    // Head.
    {
        let (gw, rest) = grad[layout.head_weight..].split_at_mut(d * c);
        matmul(
            d,
            batch,
            c,
            Operand::transposed(grad_out, d),
            Operand::transposed(&tape.features, batch),
            T::ZERO,
            gw,
        );
        let gb = &mut rest[..d];
        for row in grad_out.chunks_exact(d) {
            for (g, &v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
    let mut dfeat = vec![T::ZERO; c * batch];
    let hw = &params[layout.head_weight..layout.head_weight + d * c];
    matmul(
        c,
        d,
        batch,
        Operand::transposed(hw, c),
        Operand::transposed(grad_out, d),
        T::ZERO,
        &mut dfeat,
    );

    let last_side = layout.tap_side(layout.blocks.len());
    let area = last_side * last_side;
    let inv_area = T::from_f64(1.0 / area as f64);
    let mut dx: Vec<T> = dfeat
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv_area, area))
        .collect();

    let mut layer_idx = tape.layers.len();
    let mut cols = Vec::new();
    for (bi, block) in layout.blocks.iter().enumerate().rev() {
        let last = block.last().expect("blocks hold three layers");
        dx = max_pool_backward(&dx, &tape.pools[bi].argmax, last.cout, batch, last.side);
        for (li, layer) in block.iter().enumerate().rev() {
            layer_idx -= 1;
            let lt = &tape.layers[layer_idx];
            let s = layer.side;
            let n = batch * s * s;
            let k = layer.fan_in();
            let mut dz = dx;
            for co in 0..layer.cout {
                let g = params[layer.gamma + co];
                let bt = params[layer.beta + co];
                let xh = &lt.xhat[co * n..(co + 1) * n];
                let row = &mut dz[co * n..(co + 1) * n];
                let mut sum_dy = 0.0f64;
                let mut sum_dy_xhat = 0.0f64;
                for (v, &xv) in row.iter_mut().zip(xh) {
                    if g * xv + bt <= T::ZERO {
                        *v = T::ZERO;
                    }
                    sum_dy += v.to_f64();
                    sum_dy_xhat += (*v * xv).to_f64();
                }
                grad[layer.gamma + co] += T::from_f64(sum_dy_xhat);
                grad[layer.beta + co] += T::from_f64(sum_dy);
                let scale = g * lt.inv_std[co];
                let mean_dy = T::from_f64(sum_dy / n as f64);
                let mean_dyx = T::from_f64(sum_dy_xhat / n as f64);
                let mut sum_dz = 0.0f64;
                for (v, &xv) in row.iter_mut().zip(xh) {
                    *v = scale * (*v - mean_dy - xv * mean_dyx);
                    sum_dz += v.to_f64();
                }
                grad[layer.bias + co] += T::from_f64(sum_dz);
            }
            let w = &params[layer.weight..layer.weight + layer.cout * k];
            let first_layer = bi == 0 && li == 0;
            let mut dinput = if first_layer {
                Vec::new()
            } else {
                vec![T::ZERO; layer.cin * n]
            };
            conv_backward(
                layer,
                w,
                &lt.input,
                &dz,
                batch,
                &mut grad[layer.weight..layer.weight + layer.cout * k],
                (!first_layer).then_some(dinput.as_mut_slice()),
                &mut cols,
            );
            dx = dinput;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts() {
        let l = NetLayout::new(3, 32, &[96, 96, 96], 192);
        let conv = |cin: usize, cout: usize| cout * cin * 9 + 3 * cout;
        let expected = conv(3, 96) + 8 * conv(96, 96) + 192 * 96 + 192;
        assert_eq!(l.param_count, expected);
        assert_eq!(l.buffer_count, 9 * 2 * 96);
        let total: usize = l.tensors().iter().map(|t| t.len).sum();
        assert_eq!(total, l.param_count);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let (c, b, s) = (2, 3, 5);
        let x: Vec<f64> = (0..c * b * s * s)
            .map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5)
            .collect();
        let y: Vec<f64> = (0..c * 9 * b * s * s)
            .map(|i| ((i * 104729) % 89) as f64 / 89.0 - 0.5)
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, b, 0, b, s, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, b, 0, b, s, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let (c, b, s) = (2, 2, 4);
        let x: Vec<f64> = (0..c * b * s * s).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..c * 9).map(|i| (i as f64 * 0.11).cos()).collect();
        let n = b * s * s;
        let mut cols = vec![0.0; c * 9 * n];
        im2col(&x, c, b, 0, b, s, &mut cols);
        let mut out = vec![0.0; n];
        matmul(
            1,
            c * 9,
            n,
            Operand::normal(&w, c * 9),
            Operand::normal(&cols, n),
            0.0,
            &mut out,
        );
        for bi in 0..b {
            for y in 0..s as isize {
                for xx in 0..s as isize {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in -1..=1isize {
                            for kx in -1..=1isize {
                                let (sy, sx) = (y + ky, xx + kx);
                                if sy < 0 || sx < 0 || sy >= s as isize || sx >= s as isize {
                                    continue;
                                }
                                let v = x[((ci * b + bi) * s + sy as usize) * s + sx as usize];
                                acc += v * w[ci * 9 + ((ky + 1) * 3 + kx + 1) as usize];
                            }
                        }
                    }
                    let got = out[bi * s * s + y as usize * s + xx as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn max_pool_round_trip() {
        let x = vec![
            1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 8.0, -1.0, -2.0, 0.5, 0.25, 7.0, 6.0, 1.5, 2.5,
        ];
        let (out, arg) = max_pool(&x, 1, 1, 4);
        assert_eq!(out, vec![5.0, 9.0, 7.0, 2.5]);
        let dx = max_pool_backward(&[1.0, 2.0, 3.0, 4.0], &arg, 1, 1, 4);
        assert_eq!(dx[1], 1.0);
        assert_eq!(dx[6], 2.0);
        assert_eq!(dx[12], 3.0);
        assert_eq!(dx[15], 4.0);
        assert_eq!(dx.iter().sum::<f64>(), 10.0);
    }
}
