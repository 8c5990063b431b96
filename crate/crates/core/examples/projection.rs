//! Two-dimensional PCA projection of embeddings, written as `id x y` TSV.
//!
//! `cargo run --release --example projection -- [out.tsv]`

use augnet::evalkit::{pca_project, projection_tsv};
use augnet::synth::gaussian_blobs;

fn main() -> augnet::Result<()> {
    let out = std::env::args().nth(1);
    let (x, labels) = gaussian_blobs(3, 50, 8, 8.0, 1);
    let p = pca_project(&x)?;
    println!("explained variance: {:.2}, {:.2}", p.variances[0], p.variances[1]);
    let ids: Vec<String> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("blob{l}_{i:03}"))
        .collect();
    let tsv = projection_tsv(&ids, &p.coords)?;
    match out {
        Some(path) => std::fs::write(&path, &tsv).map_err(|e| augnet::Error::io(&path, e))?,
        None => print!("{}", tsv.lines().take(6).map(|l| format!("{l}\n")).collect::<String>()),
    }
    Ok(())
}
