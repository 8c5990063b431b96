//! Softmax and contrast losses on a hand-made batch of two sources with two
//! views each, showing how the hardest negative drives the contrast loss.
//!
//! `cargo run --example losses`

use augnet::losses::{centroids, contrast_loss, pairwise_l2, softmax_loss, tanh_embed, EmbeddingBatch};

fn report(label: &str, e: &EmbeddingBatch) -> augnet::Result<()> {
    let soft = softmax_loss(e)?;
    let contrast = contrast_loss(e)?;
    println!("{label}: softmax {:.4}, contrast {:.4}", soft.value, contrast.value);
    Ok(())
}

fn main() -> augnet::Result<()> {
    // Sources 0 and 1, two views each, in the plane.
    let tight = EmbeddingBatch::new(vec![0.9, 0.0, 1.1, 0.0, -1.0, 0.1, -1.0, -0.1], 2, 2, 2)?;
    let c = centroids(&tight);
    let d = pairwise_l2(&tight, &c)?;
    for item in 0..4 {
        println!(
            "item {item}: distance to c0 {:.3}, to c1 {:.3}",
            d.get(item, 0),
            d.get(item, 1)
        );
    }
    report("separated sources", &tight)?;

    let overlapping = EmbeddingBatch::new(vec![0.2, 0.0, -0.1, 0.0, 0.1, 0.2, 0.0, -0.1], 2, 2, 2)?;
    report("overlapping sources", &overlapping)?;

    // The encoder head feeds pre-activations through tanh.
    let e = tanh_embed(vec![3.0, 0.1, 2.0, -0.2, -2.5, 0.0, -3.0, 0.3], 2, 2, 2)?;
    let grad = contrast_loss(&e)?.grad;
    let pre_grad = e.tanh_backward(&grad)?;
    println!(
        "∂contrast/∂e     {:?}",
        grad.iter().map(|g| format!("{g:+.3}")).collect::<Vec<_>>()
    );
    println!(
        "∂contrast/∂pre   {:?}",
        pre_grad.iter().map(|g| format!("{g:+.3}")).collect::<Vec<_>>()
    );
    Ok(())
}
