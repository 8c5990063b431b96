//! Exact k-nearest-neighbor search and mean average precision over stored
//! embeddings, with relevance given by the source each view came from.
//!
//! `cargo run --release --example retrieval`

use std::collections::{HashMap, HashSet};

use augnet::encoder::{train, EncoderSpec, TrainConfig};
use augnet::evalkit::{knn_by_id, mean_average_precision, RetrievalIndex};
use augnet::imaging::augment_once;
use augnet::synth::textured_sources;
use augnet::RngStream;

fn main() -> augnet::Result<()> {
    let sources = textured_sources(64, 64, 3);
    let spec = EncoderSpec {
        block_channels: vec![8, 16, 32],
        embed_dim: 64,
        ..EncoderSpec::default()
    };
    let cfg = TrainConfig {
        n_sources_per_batch: 32,
        augments_per_source: 4,
        steps: 150,
        lr: 2e-3,
        ..TrainConfig::default()
    };
    let state = train(&sources, &cfg, &spec)?;

    // Three augmented views per source, named `s{source}v{view}`.
    let stream = RngStream::new(5, 0);
    let mut ids = Vec::new();
    let mut views = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        for v in 0..3 {
            ids.push(format!("s{i:02}v{v}"));
            views.push(augment_once(src, &cfg.augment, &stream.derive(i as u64, v))?);
        }
    }
    let index = RetrievalIndex::new(ids.clone(), state.embed(&views, spec.in_side)?)?;

    let hits = knn_by_id(&index, "s00v0", 5)?;
    for (id, d) in hits.neighbors.iter().zip(&hits.distances) {
        println!("s00v0 neighbor {id} at {d:.4}");
    }
    let relevance: HashMap<String, HashSet<String>> = ids
        .iter()
        .map(|q| {
            let source = &q[..3];
            let rel = ids
                .iter()
                .filter(|o| *o != q && o.starts_with(source))
                .cloned()
                .collect();
            (q.clone(), rel)
        })
        .collect();
    let map = mean_average_precision(&index, &ids, &relevance)?;
    println!(
        "mAP over {} queries: {map:.4} (chance ≈ {:.4})",
        ids.len(),
        2.0 / (ids.len() - 1) as f64
    );
    Ok(())
}
