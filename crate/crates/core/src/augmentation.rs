//! Down-then-up resampling of person patches to mimic distant, low
//! resolution subjects. Keypoints are unaffected since dimensions are kept.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Pixel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("invalid downscale range [{min}, {max}]: need 0 <= min <= max < 1")]
    InvalidRange { min: f64, max: f64 },
    #[error("cannot downscale an empty patch")]
    EmptyPatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownscaleSpec {
    pub min_factor: f64,
    pub max_factor: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DownscaleSpec {
    fn default() -> Self {
        Self {
            min_factor: 0.05,
            max_factor: 0.20,
            seed: 0,
        }
    }
}

impl DownscaleSpec {
    pub fn new(min_factor: f64, max_factor: f64, seed: u64) -> Result<Self, AugmentError> {
        let spec = Self {
            min_factor,
            max_factor,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let ok = self.min_factor >= 0.0 && self.min_factor <= self.max_factor && self.max_factor < 1.0;
        if ok {
            Ok(())
        } else {
            Err(AugmentError::InvalidRange {
                min: self.min_factor,
                max: self.max_factor,
            })
        }
    }

    /// Generator seeded from `self.seed`.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Uniform draw from `[min_factor, max_factor]`.
pub fn sample_factor(spec: &DownscaleSpec, rng: &mut impl Rng) -> f64 {
    if spec.min_factor == spec.max_factor {
        return spec.min_factor;
    }
    rng.random_range(spec.min_factor..=spec.max_factor)
}

/// Intermediate size: `round((1 - f) * dim)`, at least one pixel.
pub fn downscaled_dims(width: u32, height: u32, factor: f64) -> (u32, u32) {
    let shrink = |d: u32| (((1.0 - factor) * d as f64).round() as u32).max(1);
    (shrink(width), shrink(height))
}

/// Bilinear down/up cycle with an explicit factor.
pub fn downscale_with_factor<P>(
    patch: &ImageBuffer<P, Vec<P::Subpixel>>,
    factor: f64,
) -> Result<ImageBuffer<P, Vec<P::Subpixel>>, AugmentError>
where
    P: Pixel + 'static,
{
    let (w, h) = patch.dimensions();
    if w == 0 || h == 0 {
        return Err(AugmentError::EmptyPatch);
    }
    let (sw, sh) = downscaled_dims(w, h, factor);
    if (sw, sh) == (w, h) {
        return Ok(patch.clone());
    }
    let small = imageops::resize(patch, sw, sh, FilterType::Triangle);
    Ok(imageops::resize(&small, w, h, FilterType::Triangle))
}

/// Draws a factor from a generator seeded by `spec.seed` and applies it.
pub fn downscale_patch<P>(
    patch: &ImageBuffer<P, Vec<P::Subpixel>>,
    spec: &DownscaleSpec,
) -> Result<ImageBuffer<P, Vec<P::Subpixel>>, AugmentError>
where
    P: Pixel + 'static,
{
    downscale_patch_with(patch, spec, &mut spec.rng())
}

/// Same as [`downscale_patch`] but draws from a caller-owned stream.
pub fn downscale_patch_with<P>(
    patch: &ImageBuffer<P, Vec<P::Subpixel>>,
    spec: &DownscaleSpec,
    rng: &mut impl Rng,
) -> Result<ImageBuffer<P, Vec<P::Subpixel>>, AugmentError>
where
    P: Pixel + 'static,
{
    spec.validate()?;
    if patch.width() == 0 || patch.height() == 0 {
        return Err(AugmentError::EmptyPatch);
    }
    let f = sample_factor(spec, rng);
    downscale_with_factor(patch, f)
}
