//! Evaluation protocols for learned embeddings: pair retrieval, mAP
//! retrieval, k-means clustering accuracy, feature probes and a 2-D
//! projection.

mod cluster;
mod probe;
mod project;
mod retrieval;

pub use cluster::{
    hungarian_accuracy, hungarian_min, kmeans, ClusterAssignment, KMEANS_MAX_ITER, KMEANS_RESTARTS, KMEANS_TOL,
};
pub use probe::{probe_encoder, tap_features, train_probe, ProbeKind, ProbeOutcome, ProbeSpec, Tap, PROBE_HIDDEN};
pub use project::{pca_project, projection_tsv, Projection, POWER_TOL};
pub use retrieval::{
    knn, knn_by_id, mean_average_precision, pair_retrieval_eval, pair_retrieval_from_embeddings, Embedder,
    EncoderEmbedder, PairRetrieval, PixelEmbedder, RandomEmbedder, RankedResult, RetrievalIndex,
};

use serde::Serialize;

/// Evaluation report written as `{protocol, settings, metrics, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub protocol: String,
    pub settings: serde_json::Value,
    pub metrics: serde_json::Value,
    pub seed: u64,
}

impl Report {
    pub fn new(protocol: &str, settings: impl Serialize, metrics: impl Serialize, seed: u64) -> crate::Result<Self> {
        Ok(Self {
            protocol: protocol.to_string(),
            settings: to_value(settings)?,
            metrics: to_value(metrics)?,
            seed,
        })
    }

    /// Pretty-printed JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report values are plain JSON");
        s.push('\n');
        s
    }
}

fn to_value(v: impl Serialize) -> crate::Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| crate::Error::invalid(format!("unserializable report field: {e}")))
}
