use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::color::{adjust_brightness, adjust_hue, adjust_saturation};
use super::geometry::{center_square, crop_at_rate, cutout_n, hflip, reduce_resolution, resize_bilinear, rotate};
use super::{quantize, Image};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Closed real interval, serialized as `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval(pub f64, pub f64);

impl Interval {
    pub fn lo(&self) -> f64 {
        self.0
    }

    pub fn hi(&self) -> f64 {
        self.1
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.0 + self.1)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.0 && v <= self.1
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.0 < self.1 {
            rng.random_range(self.0..=self.1)
        } else {
            self.0
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.0.is_finite() && self.1.is_finite()) || self.0 > self.1 {
            return Err(Error::Schema {
                path: name.to_string(),
                message: format!("interval [{}, {}] is empty or non-finite", self.0, self.1),
            });
        }
        Ok(())
    }
}

/// Closed integer interval, serialized as `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntInterval(pub u32, pub u32);

/// Per-operation switches, used for augmentation ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnabledOps {
    pub rotation: bool,
    pub crop: bool,
    pub resolution: bool,
    pub hue: bool,
    pub saturation: bool,
    pub brightness: bool,
    pub noise: bool,
    pub cutout: bool,
    pub hflip: bool,
}

impl Default for EnabledOps {
    fn default() -> Self {
        Self::all()
    }
}

impl EnabledOps {
    pub fn all() -> Self {
        Self {
            rotation: true,
            crop: true,
            resolution: true,
            hue: true,
            saturation: true,
            brightness: true,
            noise: true,
            cutout: true,
            hflip: true,
        }
    }

    pub fn none() -> Self {
        Self {
            rotation: false,
            crop: false,
            resolution: false,
            hue: false,
            saturation: false,
            brightness: false,
            noise: false,
            cutout: false,
            hflip: false,
        }
    }
}

/// Sampling distributions for every augmentation primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotation_deg: Interval,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    pub crop_rate_min: f64,
    pub resolution_rate: Interval,
    pub hue_delta: Interval,
    pub saturation_delta: Interval,
    pub brightness_scale: Interval,
    pub brightness_bias: Interval,
    pub cutout_count: IntInterval,
    pub cutout_frac: f64,
    pub hflip_prob: f64,
    pub out_side: usize,
    pub enabled: EnabledOps,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: Interval(-35.0, 35.0),
            noise_sigma: 20.0,
            crop_rate_min: 0.2,
            resolution_rate: Interval(0.1, 1.0),
            hue_delta: Interval(-25.0, 25.0),
            saturation_delta: Interval(-150.0, 50.0),
            brightness_scale: Interval(0.75, 1.25),
            brightness_bias: Interval(-25.0, 25.0),
            cutout_count: IntInterval(0, 2),
            cutout_frac: 0.15,
            hflip_prob: 0.5,
            out_side: 32,
            enabled: EnabledOps::all(),
        }
    }
}

fn schema(path: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_string(),
        message: message.into(),
    }
}

impl AugmentConfig {
    /// Checks every field invariant; error paths are relative to this object.
    pub fn validate(&self) -> Result<()> {
        self.rotation_deg.check("rotation_deg")?;
        self.resolution_rate.check("resolution_rate")?;
        self.hue_delta.check("hue_delta")?;
        self.saturation_delta.check("saturation_delta")?;
        self.brightness_scale.check("brightness_scale")?;
        self.brightness_bias.check("brightness_bias")?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(schema("noise_sigma", "must be a finite non-negative number"));
        }
        if !(self.crop_rate_min > 0.0 && self.crop_rate_min <= 1.0) {
            return Err(schema("crop_rate_min", "must lie in (0, 1]"));
        }
        if !(self.resolution_rate.lo() > 0.0 && self.resolution_rate.hi() <= 1.0) {
            return Err(schema("resolution_rate", "must lie within (0, 1]"));
        }
        if self.brightness_scale.lo() < 0.0 {
            return Err(schema("brightness_scale", "must be non-negative"));
        }
        if self.cutout_count.0 > self.cutout_count.1 {
            return Err(schema("cutout_count", "interval is empty"));
        }
        if !(self.cutout_frac > 0.0 && self.cutout_frac < 1.0) {
            return Err(schema("cutout_frac", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(schema("hflip_prob", "must lie in [0, 1]"));
        }
        if self.out_side == 0 {
            return Err(schema("out_side", "must be at least 1"));
        }
        Ok(())
    }
}

/// One concrete draw of every scalar augmentation parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub crop_rate: f64,
    pub resolution_rate: f64,
    pub hue_delta: f64,
    pub saturation_delta: f64,
    pub brightness_scale: f64,
    pub brightness_bias: f64,
    pub cutout_count: u32,
    pub flip: bool,
}

/// Draws every scalar parameter, whether or not its op is enabled, so the
/// stream layout does not depend on the ablation switches.
pub fn sample_params<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> AugmentParams {
    AugmentParams {
        rotation_deg: cfg.rotation_deg.sample(rng),
        crop_rate: Interval(cfg.crop_rate_min, 1.0).sample(rng),
        resolution_rate: cfg.resolution_rate.sample(rng),
        hue_delta: cfg.hue_delta.sample(rng),
        saturation_delta: cfg.saturation_delta.sample(rng),
        brightness_scale: cfg.brightness_scale.sample(rng),
        brightness_bias: cfg.brightness_bias.sample(rng),
        cutout_count: rng.random_range(cfg.cutout_count.0..=cfg.cutout_count.1),
        flip: rng.random_bool(cfg.hflip_prob),
    }
}

/// Adds independent `N(0, sigma²)` noise to every sample.
pub fn gaussian_noise<R: Rng + ?Sized>(img: &Image, sigma: f64, rng: &mut R) -> Result<Image> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let data = img
        .data()
        .iter()
        .map(|&v| quantize(v as f64 + normal.sample(rng)))
        .collect();
    Image::new(img.height(), img.width(), img.channels(), data)
}

enum Geometry {
    CropResize,
    Keep,
}

fn run_pipeline(img: &Image, cfg: &AugmentConfig, stream: &RngStream, geometry: Geometry) -> Result<Image> {
    cfg.validate()?;
    let mut rng = stream.rng();
    let p = sample_params(cfg, &mut rng);
    let on = cfg.enabled;

    let mut out = if on.rotation {
        rotate(img, p.rotation_deg)
    } else {
        img.clone()
    };
    out = match geometry {
        Geometry::CropResize if on.crop => crop_at_rate(&out, &mut rng, p.crop_rate, cfg.out_side)?,
        Geometry::CropResize => resize_bilinear(&center_square(&out), cfg.out_side, cfg.out_side)?,
        Geometry::Keep => out,
    };
    if on.resolution {
        out = reduce_resolution(&out, p.resolution_rate)?;
    }
    // Hue and saturation are undefined on grayscale; those ops are skipped.
    if out.channels() == 3 {
        if on.hue {
            out = adjust_hue(&out, p.hue_delta)?;
        }
        if on.saturation {
            out = adjust_saturation(&out, p.saturation_delta)?;
        }
    }
    if on.brightness {
        out = adjust_brightness(&out, p.brightness_scale, p.brightness_bias)?;
    }
    if on.noise {
        out = gaussian_noise(&out, cfg.noise_sigma, &mut rng)?;
    }
    if on.cutout {
        out = cutout_n(&out, &mut rng, p.cutout_count, cfg.cutout_frac)?;
    }
    if on.hflip && p.flip {
        out = hflip(&out);
    }
    Ok(out)
}

/// Applies the enabled ops in the fixed order rotate → crop/resize →
/// resolution → hue → saturation → brightness → noise → cutout → flip.
/// The result is `out_side × out_side`; with cropping disabled the centered
/// short-side square is resized instead.
pub fn augment_once(img: &Image, cfg: &AugmentConfig, stream: &RngStream) -> Result<Image> {
    run_pipeline(img, cfg, stream, Geometry::CropResize)
}

/// The same pipeline without the crop/resize step; dimensions are preserved.
pub fn augment_uncropped(img: &Image, cfg: &AugmentConfig, stream: &RngStream) -> Result<Image> {
    run_pipeline(img, cfg, stream, Geometry::Keep)
}

/// `N` sources × `M` augmentations, items stored row-major by source.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub sources: Vec<usize>,
    pub items: Vec<Image>,
    pub n_sources: usize,
    pub per_source: usize,
}

impl Batch {
    pub fn item(&self, i: usize, j: usize) -> &Image {
        &self.items[i * self.per_source + j]
    }
}

/// Builds a batch from every image in `sources`; item `(i, j)` uses the
/// stream `rng.derive(i, j)`.
pub fn build_batch(sources: &[Image], m: usize, cfg: &AugmentConfig, rng: &RngStream) -> Result<Batch> {
    let ids: Vec<usize> = (0..sources.len()).collect();
    build_batch_from(sources, &ids, m, cfg, rng)
}

/// Builds a batch from the pool entries named by `ids`.
pub fn build_batch_from(
    pool: &[Image],
    ids: &[usize],
    m: usize,
    cfg: &AugmentConfig,
    rng: &RngStream,
) -> Result<Batch> {
    if ids.len() < 2 {
        return Err(Error::invalid(format!(
            "a batch needs at least 2 sources, got {}",
            ids.len()
        )));
    }
    if m == 0 {
        return Err(Error::invalid("augmentations per source must be at least 1"));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= pool.len()) {
        return Err(Error::invalid(format!(
            "source id {bad} outside pool of {}",
            pool.len()
        )));
    }
    cfg.validate()?;
    let items = (0..ids.len() * m)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / m, k % m);
            augment_once(&pool[ids[i]], cfg, &rng.derive(i as u64, j as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        sources: ids.to_vec(),
        items,
        n_sources: ids.len(),
        per_source: m,
    })
}
