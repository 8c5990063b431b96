//! Self-supervised visual representation learning from augmentation groups.
//!
//! Unlabeled source images are augmented `M` times each; a small
//! convolutional encoder maps every augmented copy to a tanh-bounded
//! embedding, and the training loss pulls copies of the same source toward
//! their centroid while pushing them away from the other centroids.
//!
//! The crate is organized by stage:
//!
//! - [`imaging`]: augmentation primitives and the `N × M` batch builder.
//! - [`losses`]: centroids, distance matrices, softmax and contrast losses
//!   with analytic gradients.
//! - [`encoder`]: the convolutional encoder, Adam, and the training loop.
//! - [`evalkit`]: pair retrieval, mAP, k-means with Hungarian matching,
//!   feature probes and a PCA projection.
//! - [`store`]: binary checkpoint / embedding / dataset formats and the JSON
//!   run configuration.
//! - [`cli`]: the `augnet` command line front end.
//! - [`synth`]: procedural texture datasets for experiments and tests.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod imaging;
pub mod losses;
pub mod matrix;
pub mod rng;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
pub use imaging::{AugmentConfig, Batch, Image};
pub use matrix::Matrix;
pub use rng::RngStream;
