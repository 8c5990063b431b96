//! Image rasters, augmentation primitives and the `N × M` batch builder.
//!
//! All pixelwise arithmetic is done in `f64`, rounded half away from zero and
//! clamped to `[0, 255]`.

mod color;
mod geometry;
mod pipeline;

pub use color::{adjust_brightness, adjust_hue, adjust_saturation, hsv_to_rgb, rgb_to_hsv};
pub use geometry::{
    center_square, crop_resize, cutout, hflip, reduce_resolution, resize_bilinear, resize_short_side, rotate, FILL_GRAY,
};
pub use pipeline::{
    augment_once, augment_uncropped, build_batch, build_batch_from, gaussian_noise, sample_params, AugmentConfig,
    AugmentParams, Batch, EnabledOps, IntInterval, Interval,
};

use crate::error::{Error, Result};

/// Row-major 8-bit raster, `height × width × channels`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be at least 1×1"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("image channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{height}×{width}×{channels} image needs {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Image with every sample set to `value`.
    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image by evaluating `f(y, x, c)` for every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub(crate) fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        let idx = (y * self.width + x) * self.channels + c;
        self.data[idx] = v;
    }

    pub(crate) fn map_samples(&self, f: impl Fn(u8) -> u8) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

/// Round half away from zero, then clamp to the 8-bit range.
#[inline]
pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// `ceil(frac · n)` that ignores floating-point noise just above an integer.
#[inline]
pub(crate) fn ceil_frac(frac: f64, n: usize) -> usize {
    let v = frac * n as f64;
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r as usize
    } else {
        v.ceil() as usize
    }
}
