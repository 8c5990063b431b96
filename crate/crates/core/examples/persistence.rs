//! Checkpoint, embedding-store and packed-dataset round trips, plus the
//! typed errors raised by damaged files.
//!
//! `cargo run --example persistence`

use augnet::encoder::{init_params, EncoderSpec};
use augnet::losses::LossKind;
use augnet::store::{
    checkpoint_from_bytes, load_checkpoint, load_dataset, load_embeddings, pack_dataset, save_checkpoint,
    save_embeddings, Checkpoint,
};
use augnet::synth::textured_sources;

fn main() -> augnet::Result<()> {
    let dir = std::env::temp_dir().join(format!("augnet-persistence-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| augnet::Error::io(&dir, e))?;

    let spec = EncoderSpec {
        block_channels: vec![8],
        embed_dim: 16,
        ..EncoderSpec::default()
    };
    let ckpt = Checkpoint {
        state: init_params(&spec)?,
        loss_kind: LossKind::Contrast,
        seed: 0,
    };
    let ckpt_path = dir.join("model.augc");
    save_checkpoint(&ckpt, &ckpt_path)?;
    println!("checkpoint round trip exact: {}", load_checkpoint(&ckpt_path)? == ckpt);

    let images = textured_sources(16, 32, 0);
    let data_path = dir.join("scenes.augt");
    std::fs::write(&data_path, pack_dataset(&images)?).map_err(|e| augnet::Error::io(&data_path, e))?;
    println!(
        "packed dataset round trip exact: {}",
        load_dataset(&data_path)? == images
    );

    let emb = ckpt.state.embed(&images, 32)?;
    let ids: Vec<String> = (0..images.len()).map(|i| format!("scene{i:02}")).collect();
    let store_path = dir.join("scenes.auge");
    save_embeddings(&ids, &emb, &store_path)?;
    let index = load_embeddings(&store_path)?;
    let exact = index
        .vectors()
        .data()
        .iter()
        .zip(emb.data())
        .all(|(a, b)| *a == (*b as f32) as f64);
    println!(
        "embedding store keeps ids {} and f32 values {exact}",
        index.ids() == &ids[..]
    );

    let bytes = std::fs::read(&ckpt_path).map_err(|e| augnet::Error::io(&ckpt_path, e))?;
    let damaged = [
        ("truncated", bytes[..bytes.len() / 2].to_vec()),
        ("wrong file type", [b"XXXX", &bytes[4..]].concat()),
        (
            "future version",
            [&bytes[..4], &9u32.to_le_bytes(), &bytes[8..]].concat(),
        ),
        ("trailing bytes", [&bytes[..], b"!"].concat()),
    ];
    for (label, b) in damaged {
        println!("{label}: {}", checkpoint_from_bytes(&b).unwrap_err());
    }
    std::fs::remove_dir_all(&dir).map_err(|e| augnet::Error::io(&dir, e))?;
    Ok(())
}
