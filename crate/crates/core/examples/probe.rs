//! Linear and nonlinear probes over frozen encoder features at every tap,
//! on pattern-family labels.
//!
//! `cargo run --release --example probe -- [steps]`

use augnet::encoder::{init_params, train, EncoderSpec, TrainConfig};
use augnet::evalkit::{probe_encoder, ProbeKind, ProbeSpec, Tap};
use augnet::synth::labeled_textures;

fn main() -> augnet::Result<()> {
    let steps: u64 = std::env::args().nth(1).map_or(200, |s| s.parse().expect("steps"));
    let spec = EncoderSpec {
        block_channels: vec![16],
        embed_dim: 32,
        ..EncoderSpec::default()
    };
    let cfg = TrainConfig {
        n_sources_per_batch: 32,
        augments_per_source: 4,
        steps,
        lr: 2e-3,
        ..TrainConfig::default()
    };
    let (unlabeled, _) = labeled_textures(32, 32, 10);
    let trained = train(&unlabeled, &cfg, &spec)?;
    let random = init_params(&spec)?;
    let (images, labels) = labeled_textures(40, 32, 11);
    let taps = [Tap::Block(1), Tap::Block(2), Tap::Block(3), Tap::Output];
    for kind in [ProbeKind::Linear, ProbeKind::Nonlinear] {
        let probe = ProbeSpec {
            kind,
            n_classes: 5,
            epochs: 60,
            ..ProbeSpec::default()
        };
        for tap in taps {
            let t = probe_encoder(&trained, &images, &labels, tap, &probe)?.accuracy;
            let r = probe_encoder(&random, &images, &labels, tap, &probe)?.accuracy;
            println!("{kind:?} probe at {tap:>6}: trained {t:.3}, random init {r:.3}");
        }
    }
    Ok(())
}
