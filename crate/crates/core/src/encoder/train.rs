use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{images_to_input, init_params, EncoderSpec, EncoderState, Mode};
use crate::error::{Error, Result};
use crate::imaging::{build_batch_from, AugmentConfig, Image};
use crate::losses::{loss, tanh_embed, LossKind};
use crate::rng::RngStream;

const SAMPLE_STREAM: u64 = 0x5A;
const AUGMENT_STREAM: u64 = 0xA5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Sources per batch (`N`).
    pub n_sources_per_batch: usize,
    /// Augmented copies per source (`M`).
    pub augments_per_source: usize,
    pub steps: u64,
    pub lr: f64,
    pub loss_kind: LossKind,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Checkpoint period in steps; `0` disables checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_sources_per_batch: 1024,
            augments_per_source: 8,
            steps: 1000,
            lr: 5e-4,
            loss_kind: LossKind::Contrast,
            augment: AugmentConfig {
                crop_rate_min: 0.5,
                ..AugmentConfig::default()
            },
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, message: &str| Error::Schema {
            path: path.to_string(),
            message: message.to_string(),
        };
        if self.n_sources_per_batch < 2 {
            return Err(err("n_sources_per_batch", "must be at least 2"));
        }
        if self.augments_per_source < 1 {
            return Err(err("augments_per_source", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(err("lr", "must be a positive finite number"));
        }
        self.augment.validate().map_err(|e| match e {
            Error::Schema { path, message } => Error::Schema {
                path: format!("augment.{path}"),
                message,
            },
            other => other,
        })
    }
}

/// Callbacks invoked by [`train_with`].
pub trait TrainObserver {
    fn on_step(&mut self, _step: u64, _loss: f64) {}

    fn on_checkpoint(&mut self, _state: &EncoderState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects the loss curve.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct LossLog {
    pub losses: Vec<(u64, f64)>,
}

impl LossLog {
    /// `step<TAB>loss` lines.
    pub fn to_tsv(&self) -> String {
        self.losses
            .iter()
            .map(|&(s, l)| format!("{s}\t{}\n", format_loss(l)))
            .collect()
    }

    /// Mean loss over the steps in `range` (indices into the log).
    pub fn mean(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.losses[range];
        slice.iter().map(|&(_, l)| l).sum::<f64>() / slice.len() as f64
    }
}

impl TrainObserver for LossLog {
    fn on_step(&mut self, step: u64, loss: f64) {
        self.losses.push((step, loss));
    }
}

/// Fixed-point decimal with at least nine significant digits.
pub fn format_loss(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v:.9}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(1) as usize;
    format!("{v:.decimals$}")
}

pub fn train(dataset: &[Image], cfg: &TrainConfig, spec: &EncoderSpec) -> Result<EncoderState> {
    train_with(dataset, cfg, spec, &mut ())
}

/// Training loop: per step sample `N` distinct sources, augment each `M`
/// times, embed, evaluate the configured loss, back-propagate, Adam update.
pub fn train_with(
    dataset: &[Image],
    cfg: &TrainConfig,
    spec: &EncoderSpec,
    observer: &mut dyn TrainObserver,
) -> Result<EncoderState> {
    cfg.validate()?;
    let state = init_params(spec)?;
    continue_training(state, dataset, cfg, observer)
}

/// Runs `cfg.steps` further steps starting from `state`.
pub fn continue_training(
    mut state: EncoderState,
    dataset: &[Image],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<EncoderState> {
    let n = cfg.n_sources_per_batch;
    let m = cfg.augments_per_source;
    if dataset.len() < n {
        return Err(Error::invalid(format!(
            "dataset has {} images but a batch needs {n} distinct sources",
            dataset.len()
        )));
    }
    let mut augment = cfg.augment.clone();
    augment.out_side = state.spec().in_side;
    let (side, channels) = (state.spec().in_side, state.spec().in_channels);
    let d = state.spec().embed_dim;
    let sampler = RngStream::new(cfg.seed, SAMPLE_STREAM);
    let augmenter = RngStream::new(cfg.seed, AUGMENT_STREAM);

    for _ in 0..cfg.steps {
        let step = state.step();
        let ids = sample(&mut sampler.derive(step, 0).rng(), dataset.len(), n).into_vec();
        let batch = build_batch_from(dataset, &ids, m, &augment, &augmenter.derive(step, 0))?;
        let items: Vec<Image> = batch
            .items
            .into_iter()
            .map(|img| super::match_channels(&img, channels))
            .collect::<Result<_>>()?;
        let input = images_to_input(&items, side, channels)?;
        let out = state.forward(&input, n * m, Mode::Train)?;
        let pre: Vec<f64> = out.pre_activation.iter().map(|&v| v as f64).collect();
        let emb = tanh_embed(pre, n, m, d)?;
        let result = loss(cfg.loss_kind, &emb)?;
        let grad_pre: Vec<f32> = emb.tanh_backward(&result.grad)?.into_iter().map(|g| g as f32).collect();
        let grad = state.backward(&grad_pre)?;
        state.adam_step(&grad, cfg.lr)?;
        observer.on_step(state.step(), result.value);
        if cfg.checkpoint_every > 0 && state.step().is_multiple_of(cfg.checkpoint_every) {
            observer.on_checkpoint(&state)?;
        }
    }
    Ok(state)
}
