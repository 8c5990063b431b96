//! Pair-retrieval accuracy of a briefly trained encoder against a random
//! encoder and the random-embedding chance level.
//!
//! `cargo run --release --example pair_retrieval -- [steps]`

use augnet::encoder::{init_params, train, EncoderSpec, TrainConfig};
use augnet::evalkit::{pair_retrieval_eval, Embedder, EncoderEmbedder, RandomEmbedder};
use augnet::synth::textured_sources;
use augnet::AugmentConfig;

fn main() -> augnet::Result<()> {
    let steps: u64 = std::env::args().nth(1).map_or(300, |s| s.parse().expect("steps"));
    let sources = textured_sources(128, 64, 0);
    let spec = EncoderSpec {
        block_channels: vec![8, 16, 32],
        ..EncoderSpec::default()
    };
    let cfg = TrainConfig {
        n_sources_per_batch: 32,
        augments_per_source: 4,
        steps,
        lr: 2e-3,
        ..TrainConfig::default()
    };
    let trained = train(&sources, &cfg, &spec)?;
    let untrained = init_params(&spec)?;
    let eval_cfg = AugmentConfig::default();
    let ks = [1, 5, 10];
    let embedders: [(&str, &dyn Embedder); 3] = [
        (
            "trained",
            &EncoderEmbedder {
                state: &trained,
                short_side: 64,
            },
        ),
        (
            "random init",
            &EncoderEmbedder {
                state: &untrained,
                short_side: 64,
            },
        ),
        ("random vectors", &RandomEmbedder { dim: 192, seed: 1 }),
    ];
    println!(
        "{} pairs, chance top1 = {:.4}",
        sources.len(),
        1.0 / (2 * sources.len() - 1) as f64
    );
    for (name, embedder) in embedders {
        let r = pair_retrieval_eval(embedder, &sources, &eval_cfg, &ks, 9)?;
        let cells: Vec<String> = ks.iter().map(|&k| format!("top{k} {:.3}", r.top(k).unwrap())).collect();
        println!("{name:>15}: {}", cells.join("  "));
    }
    Ok(())
}
