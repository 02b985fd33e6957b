//! Image tensors, PNG/JPEG I/O and the geometric augmentation pipeline.
//!
//! Pixels are stored row-major, channel-interleaved (`HWC`), as `f32` in
//! `[0, 1]`. Conversion to and from 8-bit uses `v / 255` on load and
//! round-half-up `round(v * 255)` on save, so values on the 1/255 grid survive
//! a save/load cycle unchanged.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};

pub const CHANNELS: usize = 3;
pub const CANONICAL_SIZE: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure_shape!(
            data.len() == height * width * CHANNELS,
            "expected {}x{}x3 = {} values, got {}",
            height,
            width,
            height * width * CHANNELS,
            data.len()
        );
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Domain(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds a tensor from raw data, clamping every value into `[0, 1]`.
    /// Non-finite values become 0.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!((0.0..=1.0).contains(&value), "fill value outside [0, 1]");
        Self {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..CHANNELS {
                    data.push(f(r, c, ch).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * CHANNELS + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        debug_assert!((0.0..=1.0).contains(&value));
        self.data[(row * self.width + col) * CHANNELS + ch] = value;
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Rec. 601 luma plane in `f64`.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(CHANNELS)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.dims() == other.dims()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageTensor> {
        ensure_shape!(
            top + height <= self.height && left + width <= self.width,
            "crop {}x{} at ({}, {}) exceeds {}x{} image",
            height,
            width,
            top,
            left,
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for r in top..top + height {
            let start = (r * self.width + left) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + width * CHANNELS]);
        }
        Ok(ImageTensor {
            height,
            width,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub(crate) fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| quantize(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }
}

/// `round(v * 255)` with halves rounded up.
#[inline]
pub fn quantize(v: f32) -> u8 {
    ((v.clamp(0.0, 1.0) as f64) * 255.0 + 0.5).floor() as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor> {
    let decoded = image::load_from_memory(bytes).map_err(|e| Error::Format(e.to_string()))?;
    let rgb = match decoded {
        DynamicImage::ImageRgb8(rgb) => rgb,
        DynamicImage::ImageRgba8(rgba) => DynamicImage::ImageRgba8(rgba).to_rgb8(),
        other => {
            return Err(Error::Format(format!(
                "expected 8-bit RGB image, got {:?}",
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, data)
}

pub fn encode_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.to_rgb8()
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip: bool,
    /// Maximum translation per axis, in pixels.
    pub max_shift: u32,
    /// Maximum absolute rotation, in degrees.
    pub max_rotation: f32,
    pub scale_min: f32,
    pub scale_max: f32,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::canonical()
    }
}

impl AugmentConfig {
    pub fn canonical() -> Self {
        Self {
            flip: true,
            max_shift: 8,
            max_rotation: 15.0,
            scale_min: 0.9,
            scale_max: 1.1,
            seed: 0,
        }
    }

    pub fn disabled() -> Self {
        Self {
            flip: false,
            max_shift: 0,
            max_rotation: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= 1.0 && self.scale_max >= 1.0) {
            return Err(Error::Config(format!(
                "scale range [{}, {}] must be positive and contain 1.0",
                self.scale_min, self.scale_max
            )));
        }
        if !(self.max_rotation >= 0.0 && self.max_rotation.is_finite()) {
            return Err(Error::Config("max_rotation must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineParams {
        let flip = self.flip && rng.random_bool(0.5);
        let shift = self.max_shift as i32;
        let (shift_x, shift_y) = if shift > 0 {
            (rng.random_range(-shift..=shift), rng.random_range(-shift..=shift))
        } else {
            (0, 0)
        };
        let angle = if self.max_rotation > 0.0 {
            rng.random_range(-self.max_rotation..=self.max_rotation)
        } else {
            0.0
        };
        let scale = if self.scale_max > self.scale_min {
            rng.random_range(self.scale_min..=self.scale_max)
        } else {
            1.0
        };
        AffineParams {
            flip,
            shift_x,
            shift_y,
            angle,
            scale,
        }
    }
}

/// One concrete draw of the augmentation transform.
///
/// The forward map takes a source point, mirrors it horizontally if `flip`,
/// scales and rotates it about the image centre (counter-clockwise as
/// displayed, rows growing downward), then translates by the shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub flip: bool,
    pub shift_x: i32,
    pub shift_y: i32,
    /// Degrees.
    pub angle: f32,
    pub scale: f32,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            flip: false,
            shift_x: 0,
            shift_y: 0,
            angle: 0.0,
            scale: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.shift_x == 0 && self.shift_y == 0 && self.angle == 0.0 && self.scale == 1.0
    }

    fn is_pure_flip(&self) -> bool {
        self.flip && self.shift_x == 0 && self.shift_y == 0 && self.angle == 0.0 && self.scale == 1.0
    }

    /// Source coordinate `(row, col)` sampled for output pixel `(row, col)`.
    pub fn source_coord(&self, row: usize, col: usize, height: usize, width: usize) -> (f64, f64) {
        let cy = (height as f64 - 1.0) / 2.0;
        let cx = (width as f64 - 1.0) / 2.0;
        let theta = (self.angle as f64).to_radians();
        let (sin, cos) = theta.sin_cos();
        let y = row as f64 - self.shift_y as f64 - cy;
        let x = col as f64 - self.shift_x as f64 - cx;
        // inverse rotation
        let xr = cos * x - sin * y;
        let yr = sin * x + cos * y;
        let s = self.scale as f64;
        let mut sx = xr / s + cx;
        let sy = yr / s + cy;
        if self.flip {
            sx = width as f64 - 1.0 - sx;
        }
        (sy, sx)
    }
}

/// Warps `img` with bilinear sampling; out-of-frame samples replicate the edge.
pub fn apply_affine(img: &ImageTensor, params: &AffineParams) -> ImageTensor {
    let (h, w) = img.dims();
    if params.is_identity() {
        return img.clone();
    }
    if params.is_pure_flip() {
        return ImageTensor::from_fn(h, w, |r, c, ch| img.get(r, w - 1 - c, ch));
    }
    let mut data = Vec::with_capacity(h * w * CHANNELS);
    for r in 0..h {
        for c in 0..w {
            let (sy, sx) = params.source_coord(r, c, h, w);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            for ch in 0..CHANNELS {
                let top = img.get(y0, x0, ch) as f64 * (1.0 - fx) + img.get(y0, x1, ch) as f64 * fx;
                let bot = img.get(y1, x0, ch) as f64 * (1.0 - fx) + img.get(y1, x1, ch) as f64 * fx;
                data.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0) as f32);
            }
        }
    }
    ImageTensor { height: h, width: w, data }
}

/// Nearest-neighbour warp of a single-channel plane under the same transform
/// as [`apply_affine`]; used for label maps.
pub fn warp_nearest<T: Copy>(plane: &[T], height: usize, width: usize, params: &AffineParams) -> Vec<T> {
    if params.is_identity() {
        return plane.to_vec();
    }
    let mut out = Vec::with_capacity(plane.len());
    for r in 0..height {
        for c in 0..width {
            let (sy, sx) = params.source_coord(r, c, height, width);
            let y = sy.round().clamp(0.0, (height - 1) as f64) as usize;
            let x = sx.round().clamp(0.0, (width - 1) as f64) as usize;
            out.push(plane[y * width + x]);
        }
    }
    out
}

pub fn augment<R: Rng + ?Sized>(img: &ImageTensor, cfg: &AugmentConfig, rng: &mut R) -> ImageTensor {
    let params = cfg.sample(rng);
    apply_affine(img, &params)
}
