//! 8-bit style HSV: hue in `[0, 180)`, saturation and value in `[0, 255]`.
//!
//! Conversions are done in `f64` and only the final RGB is quantized, so a
//! zero adjustment round-trips each sample to within one level.

use super::{quantize, Image};
use crate::error::{Error, Result};

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let v = max;
    let s = if max > 0.0 { 255.0 * chroma / max } else { 0.0 };
    if chroma <= 0.0 {
        return (0.0, s, v);
    }
    let sector = if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    ((sector * 30.0).rem_euclid(180.0), s, v)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let chroma = v * s / 255.0;
    let sector = h.rem_euclid(180.0) / 30.0;
    let x = chroma * (1.0 - ((sector % 2.0) - 1.0).abs());
    let (r, g, b) = match sector as u32 {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = v - chroma;
    (r + m, g + m, b + m)
}

fn map_hsv(img: &Image, op: &str, f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) -> Result<Image> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!("{op} requires a 3-channel image")));
    }
    let mut data = Vec::with_capacity(img.data().len());
    for px in img.data().chunks_exact(3) {
        let (h, s, v) = rgb_to_hsv(px[0] as f64, px[1] as f64, px[2] as f64);
        let (h, s, v) = f(h, s, v);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        data.extend_from_slice(&[quantize(r), quantize(g), quantize(b)]);
    }
    Image::new(img.height(), img.width(), 3, data)
}

/// Shift hue by `delta` on the `[0, 180)` circle.
pub fn adjust_hue(img: &Image, delta: f64) -> Result<Image> {
    map_hsv(img, "hue adjustment", |h, s, v| ((h + delta).rem_euclid(180.0), s, v))
}

/// Add `delta` to saturation, clamped to `[0, 255]`.
pub fn adjust_saturation(img: &Image, delta: f64) -> Result<Image> {
    map_hsv(img, "saturation adjustment", |h, s, v| {
        (h, (s + delta).clamp(0.0, 255.0), v)
    })
}

/// `v ← clamp(round(scale·v + bias))` on every sample.
pub fn adjust_brightness(img: &Image, scale: f64, bias: f64) -> Result<Image> {
    if scale.is_nan() || scale < 0.0 {
        return Err(Error::invalid(format!(
            "brightness scale must be non-negative, got {scale}"
        )));
    }
    Ok(img.map_samples(|v| quantize(scale * v as f64 + bias)))
}
