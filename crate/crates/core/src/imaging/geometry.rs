use rand::Rng;

use super::{ceil_frac, quantize, Image};
use crate::error::{Error, Result};

/// Fill value for rotation borders and cutout patches.
pub const FILL_GRAY: u8 = 128;

const EDGE_TOL: f64 = 1e-6;

/// Rotates about the image center by `degrees` using inverse-mapped bilinear
/// sampling. Samples that fall outside the source become [`FILL_GRAY`].
pub fn rotate(img: &Image, degrees: f64) -> Image {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            match snap_inside(sx, w).zip(snap_inside(sy, h)) {
                Some((sx, sy)) => {
                    for c in 0..ch {
                        out.set(y, x, c, quantize(bilinear_u8(img, sy, sx, c)));
                    }
                }
                None => {
                    for c in 0..ch {
                        out.set(y, x, c, FILL_GRAY);
                    }
                }
            }
        }
    }
    out
}

fn snap_inside(v: f64, n: usize) -> Option<f64> {
    let hi = n as f64 - 1.0;
    if v < -EDGE_TOL || v > hi + EDGE_TOL {
        None
    } else {
        Some(v.clamp(0.0, hi))
    }
}

fn bilinear_u8(img: &Image, sy: f64, sx: f64, c: usize) -> f64 {
    let (x0, x1, tx) = taps(sx, img.width());
    let (y0, y1, ty) = taps(sy, img.height());
    let p = |y, x| img.get(y, x, c) as f64;
    let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
    let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
    top * (1.0 - ty) + bot * ty
}

#[inline]
fn taps(s: f64, n: usize) -> (usize, usize, f64) {
    let s = s.clamp(0.0, n as f64 - 1.0);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}

/// Half-pixel-centered bilinear resize of an `f64` plane stack
/// (`h × w × ch`, row-major interleaved).
pub(crate) fn resize_plane(src: &[f64], h: usize, w: usize, ch: usize, oh: usize, ow: usize) -> Vec<f64> {
    if oh == h && ow == w {
        return src.to_vec();
    }
    let map = |o: usize, n_out: usize, n_in: usize| {
        let s = (o as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5;
        taps(s, n_in)
    };
    let xs: Vec<_> = (0..ow).map(|x| map(x, ow, w)).collect();
    let mut out = Vec::with_capacity(oh * ow * ch);
    for y in 0..oh {
        let (y0, y1, ty) = map(y, oh, h);
        for &(x0, x1, tx) in &xs {
            for c in 0..ch {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * ch + c];
                let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

fn to_plane(img: &Image) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

fn from_plane(plane: &[f64], h: usize, w: usize, ch: usize) -> Image {
    Image::new(h, w, ch, plane.iter().map(|&v| quantize(v)).collect()).expect("plane dimensions are consistent")
}

/// Bilinear resize to `out_h × out_w`.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be at least 1×1"));
    }
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    if out_h == h && out_w == w {
        return Ok(img.clone());
    }
    let plane = resize_plane(&to_plane(img), h, w, ch, out_h, out_w);
    Ok(from_plane(&plane, out_h, out_w, ch))
}

/// Copies the `side × side` window with top-left corner `(y0, x0)`.
fn window(img: &Image, y0: usize, x0: usize, side: usize) -> Image {
    let ch = img.channels();
    let mut data = Vec::with_capacity(side * side * ch);
    for y in y0..y0 + side {
        let start = (y * img.width() + x0) * ch;
        data.extend_from_slice(&img.data()[start..start + side * ch]);
    }
    Image::new(side, side, ch, data).expect("window lies inside the image")
}

/// Centered square with side equal to the shorter image side.
pub fn center_square(img: &Image) -> Image {
    let side = img.height().min(img.width());
    if img.height() == img.width() {
        return img.clone();
    }
    window(img, (img.height() - side) / 2, (img.width() - side) / 2, side)
}

/// Resize so that the shorter side equals `short_side`, keeping aspect ratio.
pub fn resize_short_side(img: &Image, short_side: usize) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    let (oh, ow) = if h <= w {
        (
            short_side,
            ((w as f64 * short_side as f64 / h as f64).round() as usize).max(1),
        )
    } else {
        (
            ((h as f64 * short_side as f64 / w as f64).round() as usize).max(1),
            short_side,
        )
    };
    resize_bilinear(img, oh, ow)
}

/// Random square crop with side `r · min(H, W)`, `r ~ U(cr_min, 1)`, placed
/// uniformly over all valid positions and resized to `out_side × out_side`.
pub fn crop_resize<R: Rng + ?Sized>(img: &Image, rng: &mut R, cr_min: f64, out_side: usize) -> Result<Image> {
    if !(cr_min > 0.0 && cr_min <= 1.0) {
        return Err(Error::invalid(format!(
            "crop rate minimum must lie in (0, 1], got {cr_min}"
        )));
    }
    let rate = if cr_min < 1.0 {
        rng.random_range(cr_min..=1.0)
    } else {
        1.0
    };
    crop_at_rate(img, rng, rate, out_side)
}

pub(crate) fn crop_at_rate<R: Rng + ?Sized>(img: &Image, rng: &mut R, rate: f64, out_side: usize) -> Result<Image> {
    let short = img.height().min(img.width());
    let side = ((rate * short as f64).round() as usize).clamp(1, short);
    let y0 = rng.random_range(0..=img.height() - side);
    let x0 = rng.random_range(0..=img.width() - side);
    resize_bilinear(&window(img, y0, x0, side), out_side, out_side)
}

/// Downscale to `⌈rate·H⌉ × ⌈rate·W⌉` and back, both passes bilinear. The
/// intermediate raster stays in `f64`.
pub fn reduce_resolution(img: &Image, rate: f64) -> Result<Image> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::invalid(format!(
            "resolution rate must lie in (0, 1], got {rate}"
        )));
    }
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let sh = ceil_frac(rate, h).max(1);
    let sw = ceil_frac(rate, w).max(1);
    if sh == h && sw == w {
        return Ok(img.clone());
    }
    let small = resize_plane(&to_plane(img), h, w, ch, sh, sw);
    let back = resize_plane(&small, sh, sw, ch, h, w);
    Ok(from_plane(&back, h, w, ch))
}

/// Fills `k ~ U{lo..=hi}` gray rectangles of `⌈frac·H⌉ × ⌈frac·W⌉` placed
/// uniformly inside the image.
pub fn cutout<R: Rng + ?Sized>(img: &Image, rng: &mut R, count: (u32, u32), frac: f64) -> Result<Image> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::invalid(format!(
            "cutout fraction must lie in (0, 1), got {frac}"
        )));
    }
    if count.0 > count.1 {
        return Err(Error::invalid("cutout count range is empty"));
    }
    let k = rng.random_range(count.0..=count.1);
    cutout_n(img, rng, k, frac)
}

pub(crate) fn cutout_n<R: Rng + ?Sized>(img: &Image, rng: &mut R, k: u32, frac: f64) -> Result<Image> {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let rh = ceil_frac(frac, h).clamp(1, h);
    let rw = ceil_frac(frac, w).clamp(1, w);
    let mut out = img.clone();
    for _ in 0..k {
        let y0 = rng.random_range(0..=h - rh);
        let x0 = rng.random_range(0..=w - rw);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                for c in 0..ch {
                    out.set(y, x, c, FILL_GRAY);
                }
            }
        }
    }
    Ok(out)
}

/// Mirror left-right.
pub fn hflip(img: &Image) -> Image {
    let (w, ch) = (img.width(), img.channels());
    let mut data = Vec::with_capacity(img.data().len());
    for row in img.data().chunks_exact(w * ch) {
        for px in row.chunks_exact(ch).rev() {
            data.extend_from_slice(px);
        }
    }
    Image::new(img.height(), w, ch, data).expect("same shape")
}
