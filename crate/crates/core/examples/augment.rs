//! Augments one synthetic scene several times and writes a contact sheet.
//!
//! `cargo run --release --example augment -- [out.png]`

use augnet::imaging::{augment_once, sample_params, AugmentConfig, Image};
use augnet::store::encode_png;
use augnet::synth::textured_sources;
use augnet::RngStream;

fn main() -> augnet::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "augment_sheet.png".into());
    let source = textured_sources(1, 96, 0).remove(0);
    let cfg = AugmentConfig {
        out_side: 96,
        ..AugmentConfig::default()
    };
    let base = RngStream::new(42, 0);
    let mut tiles = vec![source.clone()];
    for j in 0..7 {
        let stream = base.derive(0, j);
        let p = sample_params(&cfg, &mut stream.rng());
        println!(
            "copy {j}: rotate {:+.1}°, crop {:.2}, resolution {:.2}, hue {:+.1}, saturation {:+.1}, flip {}",
            p.rotation_deg, p.crop_rate, p.resolution_rate, p.hue_delta, p.saturation_delta, p.flip
        );
        tiles.push(augment_once(&source, &cfg, &stream)?);
    }
    let side = cfg.out_side;
    let sheet = Image::from_fn(side, side * tiles.len(), 3, |y, x, c| {
        tiles[x / side].get(y, x % side, c)
    })?;
    encode_png(&sheet, std::path::Path::new(&out))?;
    println!("wrote {out} (original first)");
    Ok(())
}
