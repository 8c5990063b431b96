//! Trains a small encoder with the contrast loss on synthetic scenes and
//! saves a checkpoint.
//!
//! `cargo run --release --example train -- [steps] [model.augc]`

use std::path::PathBuf;

use augnet::encoder::{train_with, EncoderSpec, LossLog, TrainConfig};
use augnet::losses::LossKind;
use augnet::store::{save_checkpoint, Checkpoint};
use augnet::synth::textured_sources;

fn main() -> augnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(200, |s| s.parse().expect("steps"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "model.augc".into()));

    let sources = textured_sources(128, 64, 0);
    let spec = EncoderSpec {
        block_channels: vec![8, 16, 32],
        embed_dim: 64,
        ..EncoderSpec::default()
    };
    let cfg = TrainConfig {
        n_sources_per_batch: 16,
        augments_per_source: 4,
        steps,
        lr: 2e-3,
        loss_kind: LossKind::Contrast,
        ..TrainConfig::default()
    };
    let mut log = LossLog::default();
    let state = train_with(&sources, &cfg, &spec, &mut log)?;
    let window = (steps as usize / 10).max(1);
    let n = log.losses.len();
    println!("mean loss, first {window} steps: {:.4}", log.mean(0..window));
    println!("mean loss, last {window} steps:  {:.4}", log.mean(n - window..n));
    let ckpt = Checkpoint {
        state,
        loss_kind: cfg.loss_kind,
        seed: cfg.seed,
    };
    save_checkpoint(&ckpt, &out)?;
    println!("saved {} ({} parameters)", out.display(), ckpt.state.param_count());
    Ok(())
}
