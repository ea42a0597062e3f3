//! Input augmentation: color jitter, random grayscale and horizontal
//! flipping for facial images, and additive Gaussian noise for feature
//! vectors. Random cropping is deliberately not representable, so face
//! alignment applied upstream survives augmentation.

use std::path::Path;

use ndarray::{Array1, Array3, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 112;
pub const IMAGE_CHANNELS: usize = 3;

/// Rec. 601 luma weights used for grayscale conversion and saturation jitter.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Strength of brightness/contrast/saturation jitter; factors are drawn
    /// from `[max(0, 1-s), 1+s]`.
    pub color_jitter_strength: f64,
    pub grayscale_probability: f64,
    pub horizontal_flip_probability: f64,
    /// Standard deviation of the additive noise in feature mode.
    pub embedding_noise_sigma: f64,
}

impl AugmentPolicy {
    pub fn new(
        color_jitter_strength: f64,
        grayscale_probability: f64,
        horizontal_flip_probability: f64,
        embedding_noise_sigma: f64,
    ) -> Result<Self> {
        let policy = AugmentPolicy {
            color_jitter_strength,
            grayscale_probability,
            horizontal_flip_probability,
            embedding_noise_sigma,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.color_jitter_strength < 0.0 || !self.color_jitter_strength.is_finite() {
            return Err(Error::Config(format!(
                "color_jitter_strength must be non-negative, got {}",
                self.color_jitter_strength
            )));
        }
        for (name, p) in [
            ("grayscale_probability", self.grayscale_probability),
            (
                "horizontal_flip_probability",
                self.horizontal_flip_probability,
            ),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.embedding_noise_sigma < 0.0 || !self.embedding_noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "embedding_noise_sigma must be non-negative, got {}",
                self.embedding_noise_sigma
            )));
        }
        Ok(())
    }

    /// Leaves every input untouched.
    pub fn identity() -> Self {
        AugmentPolicy {
            color_jitter_strength: 0.0,
            grayscale_probability: 0.0,
            horizontal_flip_probability: 0.0,
            embedding_noise_sigma: 0.0,
        }
    }

    /// Strong color jitter, random grayscale, random flipping; mild feature
    /// noise in synthetic mode.
    pub fn training_default() -> Self {
        AugmentPolicy {
            color_jitter_strength: 0.4,
            grayscale_probability: 0.2,
            horizontal_flip_probability: 0.5,
            embedding_noise_sigma: 0.05,
        }
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::training_default()
    }
}

/// A normalized 112×112 RGB face, channels-first, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    data: Array3<f32>,
}

impl FaceImage {
    /// Wraps an already-decoded image; the shape must be `(3, 112, 112)`.
    pub fn from_array(data: Array3<f32>) -> Result<Self> {
        if data.dim() != (IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE) {
            return Err(Error::Dimension(format!(
                "face images must be (3, {IMAGE_SIDE}, {IMAGE_SIDE}), got {:?}",
                data.dim()
            )));
        }
        Ok(FaceImage { data })
    }

    /// Decodes an image file. Detection/alignment happen upstream; this only
    /// validates that the file is already 112×112.
    pub fn from_file(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Validation(format!("cannot decode {}: {e}", path.display())))?
            .into_rgb8();
        if img.width() as usize != IMAGE_SIDE || img.height() as usize != IMAGE_SIDE {
            return Err(Error::Validation(format!(
                "{} is {}×{}, expected {IMAGE_SIDE}×{IMAGE_SIDE} (align and resize upstream)",
                path.display(),
                img.width(),
                img.height()
            )));
        }
        let mut data = Array3::zeros((IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE));
        for (x, y, pixel) in img.enumerate_pixels() {
            for c in 0..IMAGE_CHANNELS {
                data[(c, y as usize, x as usize)] = f32::from(pixel.0[c]) / 255.0;
            }
        }
        Ok(FaceImage { data })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    /// Flattens to the model input layout (channel-major).
    pub fn flatten(&self) -> Array1<f32> {
        Array1::from_iter(self.data.iter().copied())
    }
}

/// Either kind of augmentable input.
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Image(FaceImage),
    Feature(Array1<f32>),
}

/// Applies the policy to either input kind; the output always has the shape
/// of the input.
pub fn augment(sample: &Sample, policy: &AugmentPolicy, rng: &mut impl Rng) -> Sample {
    match sample {
        Sample::Image(img) => Sample::Image(augment_image(img, policy, rng)),
        Sample::Feature(v) => Sample::Feature(augment_feature(v.view(), policy, rng)),
    }
}

fn jitter_factor(strength: f64, rng: &mut impl Rng) -> f32 {
    let lo = (1.0 - strength).max(0.0);
    let hi = 1.0 + strength;
    rng.random_range(lo..=hi) as f32
}

/// Color jitter (brightness, contrast, saturation), random grayscale and
/// random horizontal flip, in that order. Never crops. Zero-strength /
/// zero-probability components are skipped entirely, so the identity policy
/// returns the input bit-for-bit.
pub fn augment_image(image: &FaceImage, policy: &AugmentPolicy, rng: &mut impl Rng) -> FaceImage {
    let mut data = image.data.clone();

    if policy.color_jitter_strength > 0.0 {
        let brightness = jitter_factor(policy.color_jitter_strength, rng);
        let contrast = jitter_factor(policy.color_jitter_strength, rng);
        let saturation = jitter_factor(policy.color_jitter_strength, rng);

        data.mapv_inplace(|v| v * brightness);

        let mean_luma = {
            let mut acc = 0.0f32;
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    acc += luma_at(&data, y, x);
                }
            }
            acc / (IMAGE_SIDE * IMAGE_SIDE) as f32
        };
        data.mapv_inplace(|v| (v - mean_luma) * contrast + mean_luma);

        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let gray = luma_at(&data, y, x);
                for c in 0..IMAGE_CHANNELS {
                    let v = data[(c, y, x)];
                    data[(c, y, x)] = gray + (v - gray) * saturation;
                }
            }
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    if policy.grayscale_probability > 0.0 && rng.random_bool(policy.grayscale_probability) {
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let gray = luma_at(&data, y, x);
                for c in 0..IMAGE_CHANNELS {
                    data[(c, y, x)] = gray;
                }
            }
        }
    }

    if policy.horizontal_flip_probability > 0.0
        && rng.random_bool(policy.horizontal_flip_probability)
    {
        data.invert_axis(Axis(2));
        data = data.as_standard_layout().to_owned();
    }

    FaceImage { data }
}

fn luma_at(data: &Array3<f32>, y: usize, x: usize) -> f32 {
    LUMA[0] * data[(0, y, x)] + LUMA[1] * data[(1, y, x)] + LUMA[2] * data[(2, y, x)]
}

/// Adds zero-mean Gaussian noise with `embedding_noise_sigma`; a zero sigma
/// returns the input bit-for-bit.
pub fn augment_feature(
    feature: ArrayView1<f32>,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> Array1<f32> {
    let mut out = feature.to_owned();
    if policy.embedding_noise_sigma > 0.0 {
        let sigma = policy.embedding_noise_sigma;
        out.mapv_inplace(|v| {
            let n: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            v + (sigma * n) as f32
        });
    }
    out
}
