//! NIN-style convolutional encoder: blocks of three 3×3 conv + batch-norm +
//! ReLU layers followed by 2×2 max-pooling, then global average pooling and
//! an affine head to the embedding width.

mod adam;
pub mod net;
mod train;

pub use adam::{adam_update, BETA1, BETA2, EPSILON};
pub use net::{FeatureTaps, ForwardOutput, Mode, NetLayout, TapMap, TensorInfo};
pub use train::{continue_training, format_loss, train, train_with, LossLog, TrainConfig, TrainObserver};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{center_square, resize_bilinear, resize_short_side, Image};
use crate::matrix::Matrix;
use net::Tape;

pub const MAX_BLOCKS: usize = 5;
/// Upper bound on channel counts and embedding width.
pub const MAX_WIDTH: usize = 4096;
pub const MAX_SIDE: usize = 4096;
const INFER_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub n_blocks: usize,
    pub in_side: usize,
    pub in_channels: usize,
    /// One entry per block, or a single entry shared by all blocks.
    pub block_channels: Vec<usize>,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            n_blocks: 3,
            in_side: 32,
            in_channels: 3,
            block_channels: vec![96],
            embed_dim: 192,
            seed: 0,
        }
    }
}

fn spec_err(path: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_string(),
        message: message.into(),
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_BLOCKS).contains(&self.n_blocks) {
            return Err(spec_err("n_blocks", format!("must lie in 1..={MAX_BLOCKS}")));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(spec_err("in_channels", "must be 1 or 3"));
        }
        if !(1..=MAX_WIDTH).contains(&self.embed_dim) {
            return Err(spec_err("embed_dim", format!("must lie in 1..={MAX_WIDTH}")));
        }
        if self.in_side > MAX_SIDE {
            return Err(spec_err("in_side", format!("must be at most {MAX_SIDE}")));
        }
        let scale = 1usize << self.n_blocks;
        if self.in_side < scale || !self.in_side.is_multiple_of(scale) {
            return Err(spec_err(
                "in_side",
                format!(
                    "{} is not a positive multiple of 2^{} = {scale}",
                    self.in_side, self.n_blocks
                ),
            ));
        }
        if !(self.block_channels.len() == 1 || self.block_channels.len() == self.n_blocks) {
            return Err(spec_err("block_channels", "needs one entry or one per block"));
        }
        if self.block_channels.iter().any(|c| !(1..=MAX_WIDTH).contains(c)) {
            return Err(spec_err(
                "block_channels",
                format!("channel counts must lie in 1..={MAX_WIDTH}"),
            ));
        }
        Ok(())
    }

    /// Channel count of every block.
    pub fn channels(&self) -> Vec<usize> {
        if self.block_channels.len() == 1 {
            vec![self.block_channels[0]; self.n_blocks]
        } else {
            self.block_channels.clone()
        }
    }

    pub fn layout(&self) -> NetLayout {
        NetLayout::new(self.in_channels, self.in_side, &self.channels(), self.embed_dim)
    }
}

/// Encoder parameters, batch-norm running statistics and Adam moments.
pub struct EncoderState {
    spec: EncoderSpec,
    layout: NetLayout,
    params: Vec<f32>,
    buffers: Vec<f32>,
    adam_m: Vec<f32>,
    adam_v: Vec<f32>,
    step: u64,
    tape: Option<Box<Tape<f32>>>,
}

impl Clone for EncoderState {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            params: self.params.clone(),
            buffers: self.buffers.clone(),
            adam_m: self.adam_m.clone(),
            adam_v: self.adam_v.clone(),
            step: self.step,
            tape: None,
        }
    }
}

impl PartialEq for EncoderState {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.step == other.step
            && bits_eq(&self.params, &other.params)
            && bits_eq(&self.buffers, &other.buffers)
            && bits_eq(&self.adam_m, &other.adam_m)
            && bits_eq(&self.adam_v, &other.adam_v)
    }
}

fn bits_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

impl std::fmt::Debug for EncoderState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderState")
            .field("spec", &self.spec)
            .field("param_count", &self.params.len())
            .field("step", &self.step)
            .finish_non_exhaustive()
    }
}

/// He-normal conv weights, unit-variance-preserving head, zero biases,
/// batch-norm scale 1 / shift 0; deterministic in `spec.seed`.
pub fn init_params(spec: &EncoderSpec) -> Result<EncoderState> {
    spec.validate()?;
    let layout = spec.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params = vec![0.0f32; layout.param_count];
    for layer in layout.conv_layers() {
        let std = (2.0 / layer.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in &mut params[layer.weight..layer.weight + layer.cout * layer.fan_in()] {
            *w = normal.sample(&mut rng) as f32;
        }
        params[layer.gamma..layer.gamma + layer.cout].fill(1.0);
    }
    let head_std = (1.0 / layout.head_in as f64).sqrt();
    let normal = Normal::new(0.0, head_std).expect("positive std");
    for w in &mut params[layout.head_weight..layout.head_bias] {
        *w = normal.sample(&mut rng) as f32;
    }
    let mut buffers = vec![0.0f32; layout.buffer_count];
    for layer in layout.conv_layers() {
        buffers[layer.running + layer.cout..layer.running + 2 * layer.cout].fill(1.0);
    }
    let n = params.len();
    Ok(EncoderState {
        spec: spec.clone(),
        layout,
        params,
        buffers,
        adam_m: vec![0.0; n],
        adam_v: vec![0.0; n],
        step: 0,
        tape: None,
    })
}

impl EncoderState {
    /// Reassembles a state from stored parts; moments default to zero.
    pub fn from_parts(
        spec: EncoderSpec,
        params: Vec<f32>,
        buffers: Vec<f32>,
        moments: Option<(Vec<f32>, Vec<f32>)>,
        step: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        if params.len() != layout.param_count {
            return Err(Error::shape(format!(
                "spec needs {} parameters, got {}",
                layout.param_count,
                params.len()
            )));
        }
        if buffers.len() != layout.buffer_count {
            return Err(Error::shape(format!(
                "spec needs {} buffer values, got {}",
                layout.buffer_count,
                buffers.len()
            )));
        }
        let (adam_m, adam_v) = moments.unwrap_or_else(|| (vec![0.0; params.len()], vec![0.0; params.len()]));
        if adam_m.len() != params.len() || adam_v.len() != params.len() {
            return Err(Error::shape("Adam moments do not match the parameter count"));
        }
        let all = params.iter().chain(&buffers).chain(&adam_m).chain(&adam_v);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder state"));
        }
        Ok(Self {
            spec,
            layout,
            params,
            buffers,
            adam_m,
            adam_v,
            step,
            tape: None,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn layout(&self) -> &NetLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    /// Batch-norm running means and variances.
    pub fn buffers(&self) -> &[f32] {
        &self.buffers
    }

    pub fn adam_moments(&self) -> (&[f32], &[f32]) {
        (&self.adam_m, &self.adam_v)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Forward pass over NCHW inputs in `[-1, 1]`. Training mode caches a
    /// tape for [`EncoderState::backward`] and updates running statistics.
    pub fn forward(&mut self, input: &[f32], batch: usize, mode: Mode) -> Result<ForwardOutput<f32>> {
        let fwd = net::forward(&self.layout, &self.params, &self.buffers, input, batch, mode)?;
        if let Some(stats) = fwd.batch_stats {
            let mom = net::BN_MOMENTUM as f32;
            for (b, s) in self.buffers.iter_mut().zip(stats) {
                *b = (1.0 - mom) * *b + mom * s;
            }
        }
        self.tape = fwd.tape.map(Box::new);
        Ok(fwd.output)
    }

    /// Inference-mode forward; never touches the state.
    pub fn infer(&self, input: &[f32], batch: usize) -> Result<ForwardOutput<f32>> {
        Ok(net::forward(&self.layout, &self.params, &self.buffers, input, batch, Mode::Infer)?.output)
    }

    /// Parameter gradient for `loss_grad = ∂loss / ∂pre_activation` of the
    /// most recent training-mode forward. Consumes the cached tape.
    pub fn backward(&mut self, loss_grad: &[f32]) -> Result<Vec<f32>> {
        let tape = self.tape.take().ok_or(Error::NoForwardCache)?;
        net::backward(&self.layout, &self.params, &tape, loss_grad)
    }

    pub fn adam_step(&mut self, grad: &[f32], lr: f64) -> Result<()> {
        adam_update(
            &mut self.params,
            &mut self.adam_m,
            &mut self.adam_v,
            grad,
            self.step + 1,
            lr,
        )?;
        self.step += 1;
        Ok(())
    }

    /// Shorter side resized to `short_side`, centered square, scaled to the
    /// encoder input side.
    pub fn prepare(&self, img: &Image, short_side: usize) -> Result<Image> {
        let img = match_channels(img, self.spec.in_channels)?;
        let sq = center_square(&resize_short_side(&img, short_side)?);
        resize_bilinear(&sq, self.spec.in_side, self.spec.in_side)
    }

    fn run_inference<F>(&self, images: &[Image], short_side: usize, mut take: F) -> Result<()>
    where
        F: FnMut(ForwardOutput<f32>),
    {
        if images.is_empty() {
            return Err(Error::invalid("no images to encode"));
        }
        for chunk in images.chunks(INFER_CHUNK) {
            let prepared = chunk
                .iter()
                .map(|img| self.prepare(img, short_side))
                .collect::<Result<Vec<_>>>()?;
            let input = images_to_input(&prepared, self.spec.in_side, self.spec.in_channels)?;
            take(self.infer(&input, prepared.len())?);
        }
        Ok(())
    }

    /// `tanh` embeddings, one row per image, each value in `(-1, 1)`.
    pub fn embed(&self, images: &[Image], short_side: usize) -> Result<Matrix> {
        let d = self.spec.embed_dim;
        let mut data = Vec::with_capacity(images.len() * d);
        self.run_inference(images, short_side, |out| {
            data.extend(out.pre_activation.iter().map(|&v| (v as f64).tanh()));
        })?;
        Matrix::new(images.len(), d, data)
    }

    /// Spatially averaged post-pool activations of block `tap` (1-based);
    /// one row of `block_channels` values per image.
    pub fn extract_features(&self, images: &[Image], tap: usize) -> Result<Matrix> {
        if tap == 0 || tap > self.spec.n_blocks {
            return Err(Error::invalid(format!("tap {tap} outside 1..={}", self.spec.n_blocks)));
        }
        let width = self.spec.channels()[tap - 1];
        let mut data = Vec::with_capacity(images.len() * width);
        self.run_inference(images, self.spec.in_side, |out| {
            data.extend(out.taps[tap - 1].spatial_mean());
        })?;
        Matrix::new(images.len(), width, data)
    }
}

fn match_channels(img: &Image, channels: usize) -> Result<Image> {
    if img.channels() == channels {
        return Ok(img.clone());
    }
    let data: Vec<u8> = if channels == 1 {
        img.data()
            .chunks_exact(3)
            .map(|p| ((p[0] as u32 + p[1] as u32 + p[2] as u32 + 1) / 3) as u8)
            .collect()
    } else {
        img.data().iter().flat_map(|&v| [v, v, v]).collect()
    };
    Image::new(img.height(), img.width(), channels, data)
}

/// NCHW tensor with samples mapped from `[0, 255]` to `[-1, 1]`.
pub fn images_to_input(images: &[Image], side: usize, channels: usize) -> Result<Vec<f32>> {
    let area = side * side;
    let mut out = vec![0.0f32; images.len() * channels * area];
    for (b, img) in images.iter().enumerate() {
        if img.height() != side || img.width() != side || img.channels() != channels {
            return Err(Error::shape(format!(
                "image is {}×{}×{}, encoder expects {side}×{side}×{channels}",
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        let dst = &mut out[b * channels * area..(b + 1) * channels * area];
        for (p, px) in img.data().chunks_exact(channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                dst[c * area + p] = v as f32 / 127.5 - 1.0;
            }
        }
    }
    Ok(out)
}
