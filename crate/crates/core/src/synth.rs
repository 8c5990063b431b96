//! Procedural datasets: textured color images and Gaussian blobs.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::imaging::{quantize, Image};
use crate::matrix::Matrix;
use crate::rng::RngStream;

/// Texture families used by [`labeled_textures`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Stripes,
    Checker,
    Rings,
    Blobs,
    Waves,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [
        Pattern::Stripes,
        Pattern::Checker,
        Pattern::Rings,
        Pattern::Blobs,
        Pattern::Waves,
    ];
}

type Color = [f64; 3];

fn random_color<R: Rng>(rng: &mut R) -> Color {
    [
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
    ]
}

fn mix(a: Color, b: Color, t: f64) -> Color {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Pattern intensity field in `[0, 1]` over unit coordinates.
fn pattern_field<R: Rng>(pattern: Pattern, rng: &mut R) -> Box<dyn Fn(f64, f64) -> f64> {
    match pattern {
        Pattern::Stripes => {
            let angle = rng.random_range(0.0..PI);
            let freq = rng.random_range(2.0..9.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            let (s, c) = angle.sin_cos();
            Box::new(move |x, y| 0.5 + 0.5 * (2.0 * PI * freq * (c * x + s * y) + phase).sin())
        }
        Pattern::Checker => {
            let angle = rng.random_range(0.0..PI / 2.0);
            let cells = rng.random_range(2.0..7.0);
            let (s, c) = angle.sin_cos();
            Box::new(move |x, y| {
                let u = ((c * x + s * y) * cells).floor() as i64;
                let v = ((-s * x + c * y) * cells).floor() as i64;
                ((u + v).rem_euclid(2)) as f64
            })
        }
        Pattern::Rings => {
            let cx = rng.random_range(0.1..0.9);
            let cy = rng.random_range(0.1..0.9);
            let freq = rng.random_range(3.0..10.0);
            Box::new(move |x, y| {
                let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                0.5 + 0.5 * (2.0 * PI * freq * r).cos()
            })
        }
        Pattern::Blobs => {
            let count = rng.random_range(3..9);
            let blobs: Vec<(f64, f64, f64)> = (0..count)
                .map(|_| {
                    (
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.06..0.22),
                    )
                })
                .collect();
            Box::new(move |x, y| {
                blobs
                    .iter()
                    .map(|&(bx, by, r)| {
                        let d2 = (x - bx).powi(2) + (y - by).powi(2);
                        (-d2 / (r * r)).exp()
                    })
                    .fold(0.0, f64::max)
            })
        }
        Pattern::Waves => {
            let terms: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(-6.0..6.0),
                        rng.random_range(-6.0..6.0),
                        rng.random_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            Box::new(move |x, y| {
                let s: f64 = terms
                    .iter()
                    .map(|&(fx, fy, p)| (2.0 * PI * (fx * x + fy * y) + p).sin())
                    .sum();
                0.5 + s / 6.0
            })
        }
    }
}

/// Color in the dark (`light = false`) or light half of the cube.
fn toned_color<R: Rng>(rng: &mut R, light: bool) -> Color {
    let range = if light { 150.0..255.0 } else { 0.0..105.0 };
    [
        rng.random_range(range.clone()),
        rng.random_range(range.clone()),
        rng.random_range(range),
    ]
}

/// One textured image: a two-color gradient background overlaid with a
/// pattern drawn in a third color.
pub fn texture(pattern: Pattern, side: usize, stream: &RngStream) -> Image {
    let mut rng = stream.rng();
    let colors = [random_color(&mut rng), random_color(&mut rng), random_color(&mut rng)];
    paint(pattern, side, colors, &mut rng)
}

/// Like [`texture`], but the pattern ink and the background sit on opposite
/// halves of the intensity range, so the pattern always reads clearly.
pub fn contrast_texture(pattern: Pattern, side: usize, stream: &RngStream) -> Image {
    let mut rng = stream.rng();
    let light = rng.random_bool(0.5);
    let colors = [
        toned_color(&mut rng, light),
        toned_color(&mut rng, light),
        toned_color(&mut rng, !light),
    ];
    paint(pattern, side, colors, &mut rng)
}

fn paint<R: Rng>(pattern: Pattern, side: usize, [bg_a, bg_b, ink]: [Color; 3], rng: &mut R) -> Image {
    let angle = rng.random_range(0.0..2.0 * PI);
    let (gs, gc) = angle.sin_cos();
    let strength = rng.random_range(0.6..1.0);
    let field = pattern_field(pattern, rng);
    let inv = 1.0 / side as f64;
    Image::from_fn(side, side, 3, |y, x, c| {
        // Channel loop is innermost; recomputing the field per channel keeps
        // this a plain closure.
        let (u, v) = ((x as f64 + 0.5) * inv, (y as f64 + 0.5) * inv);
        let t = (0.5 + 0.5 * (gc * (u - 0.5) + gs * (v - 0.5)) * 1.4).clamp(0.0, 1.0);
        let bg = mix(bg_a, bg_b, t);
        let a = field(u, v).clamp(0.0, 1.0) * strength;
        quantize(bg[c] * (1.0 - a) + ink[c] * a)
    })
    .expect("valid dimensions")
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Rect {
        cx: f64,
        cy: f64,
        hw: f64,
        hh: f64,
        sin: f64,
        cos: f64,
    },
    Triangle {
        pts: [(f64, f64); 3],
    },
}

impl Shape {
    fn random<R: Rng>(rng: &mut R) -> Self {
        let (cx, cy) = (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85));
        let size = rng.random_range(0.12..0.3);
        match rng.random_range(0..3) {
            0 => Shape::Disc { cx, cy, r: size },
            1 => {
                let (sin, cos) = rng.random_range(0.0..PI).sin_cos();
                let hh = size * rng.random_range(0.4..1.0);
                Shape::Rect {
                    cx,
                    cy,
                    hw: size,
                    hh,
                    sin,
                    cos,
                }
            }
            _ => {
                let start = rng.random_range(0.0..2.0 * PI);
                let pts = [0.0, 2.1, 4.2].map(|o: f64| {
                    let a = start + o + rng.random_range(-0.4..0.4);
                    (cx + 1.3 * size * a.cos(), cy + 1.3 * size * a.sin())
                });
                Shape::Triangle { pts }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect {
                cx,
                cy,
                hw,
                hh,
                sin,
                cos,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                (cos * dx + sin * dy).abs() <= hw && (-sin * dx + cos * dy).abs() <= hh
            }
            Shape::Triangle { pts } => {
                let side = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let s = [side(pts[0], pts[1]), side(pts[1], pts[2]), side(pts[2], pts[0])];
                s.iter().all(|&v| v >= 0.0) || s.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

/// A pattern background from a random family with two to four solid
/// shapes (discs, rotated rectangles, triangles) painted over it.
pub fn scene(side: usize, stream: &RngStream) -> Image {
    let mut rng = stream.rng();
    let pattern = Pattern::ALL[rng.random_range(0..Pattern::ALL.len())];
    let background = texture(pattern, side, &stream.derive(0, 0));
    let shapes: Vec<(Shape, Color)> = (0..rng.random_range(2..=4))
        .map(|_| (Shape::random(&mut rng), random_color(&mut rng)))
        .collect();
    let inv = 1.0 / side as f64;
    Image::from_fn(side, side, 3, |y, x, c| {
        let (u, v) = ((x as f64 + 0.5) * inv, (y as f64 + 0.5) * inv);
        match shapes.iter().rev().find(|(s, _)| s.contains(u, v)) {
            Some((_, color)) => quantize(color[c]),
            None => background.get(y, x, c),
        }
    })
    .expect("valid dimensions")
}

/// `n` unlabeled scene images; see [`scene`].
pub fn textured_sources(n: usize, side: usize, seed: u64) -> Vec<Image> {
    let base = RngStream::new(seed, 0x7E57);
    (0..n).map(|i| scene(side, &base.derive(i as u64, 0))).collect()
}

/// `per_class` images of each pattern family, labeled by family index.
pub fn labeled_textures(per_class: usize, side: usize, seed: u64) -> (Vec<Image>, Vec<usize>) {
    let base = RngStream::new(seed, 0x1AB);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per_class {
        for (label, &p) in Pattern::ALL.iter().enumerate() {
            images.push(contrast_texture(p, side, &base.derive(i as u64, label as u64)));
            labels.push(label);
        }
    }
    (images, labels)
}

/// `k` isotropic Gaussian blobs in `dim` dimensions with unit variance and
/// centers at mutual distance `separation`.
pub fn gaussian_blobs(k: usize, per_blob: usize, dim: usize, separation: f64, seed: u64) -> (Matrix, Vec<usize>) {
    assert!(k <= dim, "blob centers are placed on coordinate axes");
    let mut rng = RngStream::new(seed, 0xB10B).rng();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // Scaled basis vectors are pairwise separation apart.
    let scale = separation / std::f64::consts::SQRT_2;
    let mut data = Vec::with_capacity(k * per_blob * dim);
    let mut labels = Vec::with_capacity(k * per_blob);
    for i in 0..k * per_blob {
        let blob = i % k;
        for t in 0..dim {
            let center = if t == blob { scale } else { 0.0 };
            data.push(center + normal.sample(&mut rng));
        }
        labels.push(blob);
    }
    (Matrix::new(k * per_blob, dim, data).expect("consistent shape"), labels)
}
