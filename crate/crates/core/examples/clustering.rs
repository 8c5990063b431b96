//! k-means with k-means++ seeding on Gaussian blobs, scored against the
//! generating labels with the Hungarian matching.
//!
//! `cargo run --release --example clustering`

use augnet::evalkit::{hungarian_accuracy, kmeans, KMEANS_RESTARTS};
use augnet::synth::gaussian_blobs;

fn main() -> augnet::Result<()> {
    for separation in [10.0, 4.0, 2.0] {
        let (x, truth) = gaussian_blobs(4, 200, 16, separation, 0);
        let fit = kmeans(&x, 4, 0, KMEANS_RESTARTS)?;
        let acc = hungarian_accuracy(&fit.labels, &truth)?;
        println!(
            "separation {separation:>4}σ: accuracy {acc:.3}, inertia {:.1}, {} Lloyd iterations",
            fit.inertia, fit.iterations
        );
    }
    let (x, truth) = gaussian_blobs(4, 200, 16, 10.0, 0);
    // Relabeling the predictions does not change the matched accuracy.
    let fit = kmeans(&x, 4, 3, 1)?;
    let shifted: Vec<usize> = fit.labels.iter().map(|l| (l + 1) % 4).collect();
    println!(
        "relabeled predictions: {:.3} vs {:.3}",
        hungarian_accuracy(&fit.labels, &truth)?,
        hungarian_accuracy(&shifted, &truth)?
    );
    Ok(())
}
