//! Missing-pixel masks: random training squares, the six standard occlusion
//! masks, sweep squares, user-drawn masks, and noise filling.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::imaging::{ImageTensor, CANONICAL_SIZE, CHANNELS};

/// Mask area above which completion quality is no longer expected to hold.
pub const SUGGESTED_MAX_AREA: usize = 64 * 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskSource {
    TrainingSquare,
    /// One of the standard occlusion masks, numbered 1..=6.
    Standard(u8),
    UserDrawn,
    SweepSquare,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    height: usize,
    width: usize,
    bitmap: Vec<bool>,
    bbox: Option<Rect>,
    source: MaskSource,
}

impl MaskSpec {
    pub fn from_bitmap(height: usize, width: usize, bitmap: Vec<bool>, source: MaskSource) -> Result<Self> {
        ensure_shape!(
            bitmap.len() == height * width,
            "bitmap has {} entries, expected {}x{}",
            bitmap.len(),
            height,
            width
        );
        let bbox = tight_bbox(height, width, &bitmap);
        Ok(Self {
            height,
            width,
            bitmap,
            bbox,
            source,
        })
    }

    pub fn from_rect(height: usize, width: usize, rect: Rect, source: MaskSource) -> Result<Self> {
        if rect.bottom() > height || rect.right() > width {
            return Err(Error::Argument(format!(
                "rectangle {rect:?} exceeds {height}x{width} image"
            )));
        }
        let mut bitmap = vec![false; height * width];
        for r in rect.top..rect.bottom() {
            bitmap[r * width + rect.left..r * width + rect.right()].fill(true);
        }
        Self::from_bitmap(height, width, bitmap, source)
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bitmap: vec![false; height * width],
            bbox: None,
            source: MaskSource::UserDrawn,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::from_rect(height, width, Rect::new(0, 0, height, width), MaskSource::UserDrawn)
            .expect("full rectangle fits")
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bitmap(&self) -> &[bool] {
        &self.bitmap
    }

    #[inline]
    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.bitmap[row * self.width + col]
    }

    /// Tight bounding box of the missing pixels; `None` for an empty mask.
    pub fn bbox(&self) -> Option<Rect> {
        self.bbox
    }

    pub fn source(&self) -> MaskSource {
        self.source
    }

    pub fn area(&self) -> usize {
        self.bitmap.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bbox.is_none()
    }

    pub fn is_subset_of(&self, other: &MaskSpec) -> bool {
        self.dims() == other.dims() && self.bitmap.iter().zip(&other.bitmap).all(|(&a, &b)| !a || b)
    }

    pub fn check_compatible(&self, img: &ImageTensor) -> Result<()> {
        ensure_shape!(
            self.dims() == img.dims(),
            "mask is {}x{} but image is {}x{}",
            self.height,
            self.width,
            img.height(),
            img.width()
        );
        Ok(())
    }

    /// Single-channel 8-bit encoding, 255 = missing.
    pub fn to_luma_bytes(&self) -> Vec<u8> {
        self.bitmap.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_luma_bytes())
            .expect("buffer length matches dimensions");
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode_png()?).map_err(|e| Error::io(path, e))
    }
}

fn tight_bbox(height: usize, width: usize, bitmap: &[bool]) -> Option<Rect> {
    let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..height {
        for c in 0..width {
            if bitmap[r * width + c] {
                top = top.min(r);
                left = left.min(c);
                bottom = bottom.max(r + 1);
                right = right.max(c + 1);
            }
        }
    }
    (top != usize::MAX).then(|| Rect::new(top, left, bottom - top, right - left))
}

/// Human-readable warnings for a mask about to be completed.
pub fn mask_warnings(mask: &MaskSpec) -> Vec<String> {
    let area = mask.area();
    let mut out = Vec::new();
    if area == 0 {
        out.push("empty mask: nothing to complete".to_string());
    } else if area > SUGGESTED_MAX_AREA {
        out.push(format!(
            "mask area {area} exceeds the suggested maximum of {SUGGESTED_MAX_AREA} pixels"
        ));
    }
    out
}

/// Square mask of side `mask_size` at a uniformly random position fully inside the image.
pub fn sample_training_mask<R: Rng + ?Sized>(rng: &mut R, image_size: usize, mask_size: usize) -> Result<MaskSpec> {
    sample_square(rng, image_size, mask_size, MaskSource::TrainingSquare)
}

pub(crate) fn sample_square<R: Rng + ?Sized>(
    rng: &mut R,
    image_size: usize,
    mask_size: usize,
    source: MaskSource,
) -> Result<MaskSpec> {
    if mask_size == 0 || mask_size > image_size {
        return Err(Error::Argument(format!(
            "mask size {mask_size} must be in 1..={image_size}"
        )));
    }
    let span = image_size - mask_size;
    let top = rng.random_range(0..=span);
    let left = rng.random_range(0..=span);
    MaskSpec::from_rect(image_size, image_size, Rect::new(top, left, mask_size, mask_size), source)
}

/// Replaces every missing pixel with i.i.d. `U[0, 1)` noise per channel.
pub fn fill_noise<R: Rng + ?Sized>(img: &ImageTensor, mask: &MaskSpec, rng: &mut R) -> Result<ImageTensor> {
    mask.check_compatible(img)?;
    let mut out = img.clone().into_vec();
    for (i, &missing) in mask.bitmap().iter().enumerate() {
        if missing {
            for v in &mut out[i * CHANNELS..(i + 1) * CHANNELS] {
                *v = rng.random::<f32>();
            }
        }
    }
    ImageTensor::new(img.height(), img.width(), out)
}

#[derive(Debug, Clone)]
pub struct MaskedSample {
    pub original: ImageTensor,
    pub mask: MaskSpec,
    pub network_input: ImageTensor,
}

impl MaskedSample {
    pub fn new<R: Rng + ?Sized>(original: ImageTensor, mask: MaskSpec, rng: &mut R) -> Result<Self> {
        let network_input = fill_noise(&original, &mask, rng)?;
        Ok(Self {
            original,
            mask,
            network_input,
        })
    }
}

/// Rectangles of the six standard occlusion masks on a 128x128 face, in order:
/// left half, right half, two eyes, left eye, right eye, lower half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMaskGeometry {
    pub image_size: usize,
    pub rects: [Rect; 6],
}

impl Default for EvalMaskGeometry {
    fn default() -> Self {
        Self {
            image_size: CANONICAL_SIZE,
            rects: [
                Rect::new(0, 0, 128, 64),
                Rect::new(0, 64, 128, 64),
                Rect::new(40, 24, 32, 80),
                Rect::new(40, 24, 32, 40),
                Rect::new(40, 64, 32, 40),
                Rect::new(64, 0, 64, 128),
            ],
        }
    }
}

pub const EVAL_MASK_NAMES: [&str; 6] = ["O1", "O2", "O3", "O4", "O5", "O6"];

impl EvalMaskGeometry {
    /// Builds the six masks for `image_size`, scaling the rectangles
    /// proportionally when it differs from the geometry's native size.
    pub fn masks(&self, image_size: usize) -> Result<Vec<MaskSpec>> {
        let scale = |v: usize| v * image_size / self.image_size;
        self.rects
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let top = scale(r.top);
                let left = scale(r.left);
                let rect = Rect::new(top, left, scale(r.bottom()) - top, scale(r.right()) - left);
                MaskSpec::from_rect(image_size, image_size, rect, MaskSource::Standard(i as u8 + 1))
            })
            .collect()
    }
}

pub fn standard_eval_masks(image_size: usize) -> Result<Vec<MaskSpec>> {
    EvalMaskGeometry::default().masks(image_size)
}

/// Square sizes for the mask-size generalisation sweep.
pub fn sweep_mask_sizes() -> Vec<usize> {
    (16..=80).step_by(8).collect()
}

pub fn sweep_mask<R: Rng + ?Sized>(rng: &mut R, image_size: usize, size: usize) -> Result<MaskSpec> {
    sample_square(rng, image_size, size, MaskSource::SweepSquare)
}

pub fn decode_user_mask(bytes: &[u8]) -> Result<MaskSpec> {
    let luma = image::load_from_memory(bytes)
        .map_err(|e| Error::Format(e.to_string()))?
        .to_luma8();
    let (w, h) = luma.dimensions();
    let bitmap = luma.into_raw().into_iter().map(|v| v >= 128).collect();
    let mask = MaskSpec::from_bitmap(h as usize, w as usize, bitmap, MaskSource::UserDrawn)?;
    if mask.is_empty() {
        tracing::warn!("user mask is empty: nothing to complete");
    }
    Ok(mask)
}

/// Reads a single-channel PNG; pixels `>= 128` are missing.
pub fn load_user_mask(path: impl AsRef<Path>) -> Result<MaskSpec> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_user_mask(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forced_position_when_mask_fills_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = sample_training_mask(&mut rng, 64, 64).unwrap();
        assert_eq!(m.bbox(), Some(Rect::new(0, 0, 64, 64)));
        assert_eq!(m.area(), 4096);
    }

    #[test]
    fn oversized_mask_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_training_mask(&mut rng, 32, 33), Err(Error::Argument(_))));
    }

    #[test]
    fn training_masks_are_deterministic_and_inside() {
        let a = sample_training_mask(&mut ChaCha8Rng::seed_from_u64(5), 128, 64).unwrap();
        let b = sample_training_mask(&mut ChaCha8Rng::seed_from_u64(5), 128, 64).unwrap();
        assert_eq!(a, b);
        let r = a.bbox().unwrap();
        assert_eq!((r.height, r.width), (64, 64));
        assert!(r.bottom() <= 128 && r.right() <= 128);
        assert_eq!(a.source(), MaskSource::TrainingSquare);
    }

    #[test]
    fn noise_fill_leaves_known_pixels_alone() {
        let img = ImageTensor::from_fn(16, 16, |r, c, ch| (r + c + ch) as f32 / 40.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let empty = MaskSpec::empty(16, 16);
        assert_eq!(fill_noise(&img, &empty, &mut rng).unwrap(), img);

        let m = MaskSpec::from_rect(16, 16, Rect::new(3, 4, 5, 6), MaskSource::UserDrawn).unwrap();
        let out = fill_noise(&img, &m, &mut rng).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                if !m.is_missing(r, c) {
                    assert_eq!(out.pixel(r, c), img.pixel(r, c));
                }
            }
        }
        let wrong = MaskSpec::empty(8, 16);
        assert!(matches!(fill_noise(&img, &wrong, &mut rng), Err(Error::Shape(_))));
    }

    #[test]
    fn noise_fill_matches_uniform_moments() {
        let img = ImageTensor::filled(128, 128, 0.0);
        let m = MaskSpec::full(128, 128);
        let out = fill_noise(&img, &m, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = out.as_slice().iter().skip(ch).step_by(3).map(|&v| v as f64).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((0.48..=0.52).contains(&mean), "mean {mean}");
            assert!((0.078..=0.088).contains(&var), "var {var}");
        }
        let again = fill_noise(&img, &m, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn standard_masks_geometry() {
        let masks = standard_eval_masks(128).unwrap();
        assert_eq!(masks.len(), 6);
        assert_eq!(masks[0].area(), 64 * 128);
        assert!(masks[3].is_subset_of(&masks[2]));
        assert!(masks[4].is_subset_of(&masks[2]));
        for r in 0..128 {
            for c in 0..128 {
                assert!(masks[0].is_missing(r, c) ^ masks[1].is_missing(r, c));
            }
        }
        assert_eq!(masks[5].bbox(), Some(Rect::new(64, 0, 64, 128)));
        assert_eq!(masks, standard_eval_masks(128).unwrap());
        for (i, m) in masks.iter().enumerate() {
            assert_eq!(m.source(), MaskSource::Standard(i as u8 + 1));
        }
    }

    #[test]
    fn standard_masks_scale_to_desk_size() {
        let masks = standard_eval_masks(64).unwrap();
        assert_eq!(masks[0].area(), 32 * 64);
        assert!(masks[3].is_subset_of(&masks[2]));
    }

    #[test]
    fn sweep_sizes() {
        let s = sweep_mask_sizes();
        assert_eq!(s.len(), 9);
        assert_eq!((s[0], s[8]), (16, 80));
        assert!(s.windows(2).all(|w| w[1] - w[0] == 8));
    }

    #[test]
    fn user_mask_thresholding() {
        let w = 10;
        let h = 6;
        let check: Vec<u8> = (0..h * w).map(|i| if (i / w + i % w) % 2 == 0 { 255 } else { 0 }).collect();
        let png = {
            let g = image::GrayImage::from_raw(w as u32, h as u32, check.clone()).unwrap();
            let mut out = std::io::Cursor::new(Vec::new());
            g.write_to(&mut out, image::ImageFormat::Png).unwrap();
            out.into_inner()
        };
        let m = decode_user_mask(&png).unwrap();
        let expected: Vec<bool> = check.iter().map(|&v| v >= 128).collect();
        assert_eq!(m.bitmap(), expected.as_slice());
        assert_eq!(m.bbox(), Some(Rect::new(0, 0, h, w)));
        assert_eq!(m.source(), MaskSource::UserDrawn);

        let full = decode_user_mask(&MaskSpec::full(4, 4).encode_png().unwrap()).unwrap();
        assert_eq!(full.area(), 16);
        let empty = decode_user_mask(&MaskSpec::empty(4, 4).encode_png().unwrap()).unwrap();
        assert!(empty.is_empty());
        assert_eq!(mask_warnings(&empty), vec!["empty mask: nothing to complete".to_string()]);
    }

    #[test]
    fn area_warning_threshold() {
        let at = MaskSpec::from_rect(128, 128, Rect::new(0, 0, 64, 64), MaskSource::UserDrawn).unwrap();
        assert!(mask_warnings(&at).is_empty());
        let over = MaskSpec::from_rect(128, 128, Rect::new(0, 0, 64, 65), MaskSource::UserDrawn).unwrap();
        assert_eq!(mask_warnings(&over).len(), 1);
    }
}
