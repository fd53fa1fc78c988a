//! Image-space augmentations driven by a single strength in `[0, 1]`.
//!
//! Strength maps linearly onto each kind's parameter:
//!
//! | kind                 | parameter at strength `s`                 |
//! |----------------------|-------------------------------------------|
//! | rotation             | angle `s * 20` degrees, random sign       |
//! | flip_horizontal      | none (always mirrors)                     |
//! | gaussian_blur        | sigma `4 s` pixels                        |
//! | additive_noise       | Gaussian std `0.25 s`                     |
//! | brightness           | offset `+/- 0.5 s`, random sign           |
//! | contrast             | factor uniform in `[1 - 0.8 s, 1 + 0.8 s]`|
//! | lossy_compression    | quality `round(95 - 85 s)`                |
//! | sample_wise_normalization | none                                 |
//!
//! Outputs are clamped to `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng::Rng;
use crate::world::{ImageSample, LatentSample};

mod codec;

pub use codec::{lossy_compress, quantization_table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    Rotation,
    FlipHorizontal,
    GaussianBlur,
    AdditiveNoise,
    Brightness,
    Contrast,
    LossyCompression,
    SampleWiseNormalization,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 8] = [
        AugmentationKind::Rotation,
        AugmentationKind::FlipHorizontal,
        AugmentationKind::GaussianBlur,
        AugmentationKind::AdditiveNoise,
        AugmentationKind::Brightness,
        AugmentationKind::Contrast,
        AugmentationKind::LossyCompression,
        AugmentationKind::SampleWiseNormalization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentationKind::Rotation => "rotation",
            AugmentationKind::FlipHorizontal => "flip_horizontal",
            AugmentationKind::GaussianBlur => "gaussian_blur",
            AugmentationKind::AdditiveNoise => "additive_noise",
            AugmentationKind::Brightness => "brightness",
            AugmentationKind::Contrast => "contrast",
            AugmentationKind::LossyCompression => "lossy_compression",
            AugmentationKind::SampleWiseNormalization => "sample_wise_normalization",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| config_err!("unknown augmentation kind `{name}`"))
    }
}

/// The heavy augmentation set of the second training stage.
pub const STAGE2_KINDS: [AugmentationKind; 7] = [
    AugmentationKind::Rotation,
    AugmentationKind::FlipHorizontal,
    AugmentationKind::GaussianBlur,
    AugmentationKind::AdditiveNoise,
    AugmentationKind::Brightness,
    AugmentationKind::Contrast,
    AugmentationKind::LossyCompression,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    pub kind: AugmentationKind,
    pub strength: f64,
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(config_err!("augmentation strength must be in [0, 1], got {}", self.strength));
        }
        Ok(())
    }
}

pub const MAX_ROTATION_DEGREES: f64 = 20.0;
pub const MAX_BLUR_SIGMA: f64 = 4.0;
pub const MAX_NOISE_STD: f64 = 0.25;
pub const MAX_BRIGHTNESS_OFFSET: f64 = 0.5;
pub const MAX_CONTRAST_DELTA: f64 = 0.8;

/// JPEG-style quality for a compression strength: 95 at 0 down to 10 at 1.
pub fn compression_quality(strength: f64) -> u8 {
    libm::round(95.0 - 85.0 * strength) as u8
}

pub fn apply_augmentation(x: &ImageSample, spec: &AugmentationSpec, rng: &mut Rng) -> Result<ImageSample> {
    spec.validate()?;
    let s = spec.strength;
    let out = match spec.kind {
        AugmentationKind::Rotation => {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            rotate(x, sign * s * MAX_ROTATION_DEGREES)
        }
        AugmentationKind::FlipHorizontal => flip_horizontal(x),
        AugmentationKind::GaussianBlur => gaussian_blur(x, s * MAX_BLUR_SIGMA),
        AugmentationKind::AdditiveNoise => {
            let std = s * MAX_NOISE_STD;
            let pixels = x
                .pixels
                .iter()
                .map(|&p| {
                    let n: f64 = rng.sample(StandardNormal);
                    (p as f64 + std * n).clamp(0.0, 1.0) as f32
                })
                .collect();
            x.with_pixels(pixels)
        }
        AugmentationKind::Brightness => {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let offset = sign * s * MAX_BRIGHTNESS_OFFSET;
            x.with_pixels(x.pixels.iter().map(|&p| (p as f64 + offset).clamp(0.0, 1.0) as f32).collect())
        }
        AugmentationKind::Contrast => {
            let factor = 1.0 + MAX_CONTRAST_DELTA * s * (2.0 * rng.gen::<f64>() - 1.0);
            contrast(x, factor)
        }
        AugmentationKind::LossyCompression => lossy_compress(x, compression_quality(s))?,
        AugmentationKind::SampleWiseNormalization => image_sample_wise_normalize(x),
    };
    Ok(out)
}

pub fn flip_horizontal(x: &ImageSample) -> ImageSample {
    let (h, w) = (x.shape.height, x.shape.width);
    let mut pixels = vec![0.0f32; x.pixels.len()];
    for c in 0..x.shape.channels {
        for y in 0..h {
            let row = (c * h + y) * w;
            for xx in 0..w {
                pixels[row + xx] = x.pixels[row + w - 1 - xx];
            }
        }
    }
    x.with_pixels(pixels)
}

/// Rotation about the image centre with bilinear resampling and edge-value padding.
pub fn rotate(x: &ImageSample, degrees: f64) -> ImageSample {
    if degrees == 0.0 {
        return x.clone();
    }
    let (h, w) = (x.shape.height, x.shape.width);
    let theta = degrees.to_radians();
    let (sin, cos) = (libm::sin(theta), libm::cos(theta));
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut pixels = vec![0.0f32; x.pixels.len()];
    for c in 0..x.shape.channels {
        let plane = &x.pixels[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let (dy, dx) = (y as f64 - cy, xx as f64 - cx);
                // Inverse map: rotate output coordinates back into the source.
                let sx = (cos * dx + sin * dy + cx).clamp(0.0, (w - 1) as f64);
                let sy = (-sin * dx + cos * dy + cy).clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (libm::floor(sx) as usize, libm::floor(sy) as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                let p = |yy: usize, xc: usize| plane[yy * w + xc] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                pixels[(c * h + y) * w + xx] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0) as f32;
            }
        }
    }
    x.with_pixels(pixels)
}

/// Separable Gaussian blur with edge clamping; kernel radius `ceil(3 sigma)`.
pub fn gaussian_blur(x: &ImageSample, sigma: f64) -> ImageSample {
    if sigma <= 0.0 {
        return x.clone();
    }
    let radius = libm::ceil(3.0 * sigma) as isize;
    let mut kernel: Vec<f64> =
        (-radius..=radius).map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = (x.shape.height as isize, x.shape.width as isize);
    let mut out = vec![0.0f32; x.pixels.len()];
    let mut tmp = vec![0.0f64; (h * w) as usize];
    for c in 0..x.shape.channels {
        let plane = &x.pixels[c * (h * w) as usize..(c + 1) * (h * w) as usize];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    let sx = (xx + k as isize - radius).clamp(0, w - 1);
                    acc += wgt * plane[(y * w + sx) as usize] as f64;
                }
                tmp[(y * w + xx) as usize] = acc;
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    let sy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += wgt * tmp[(sy * w + xx) as usize];
                }
                out[c * (h * w) as usize + (y * w + xx) as usize] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    x.with_pixels(out)
}

/// Scales deviations from the image mean by `factor`.
pub fn contrast(x: &ImageSample, factor: f64) -> ImageSample {
    if factor == 1.0 {
        return x.clone();
    }
    let mean = x.pixels.iter().map(|&p| p as f64).sum::<f64>() / x.pixels.len() as f64;
    x.with_pixels(x.pixels.iter().map(|&p| (mean + factor * (p as f64 - mean)).clamp(0.0, 1.0) as f32).collect())
}

/// Image-space counterpart of [`sample_wise_normalize`]: the latent rule
/// (mean 0, std 0.5) mapped onto the pixel range by `v / 4 + 0.5`, i.e. mean
/// 0.5 and std 0.125, then clamped. Constant images become uniformly 0.5.
pub fn image_sample_wise_normalize(x: &ImageSample) -> ImageSample {
    let n = x.pixels.len() as f64;
    let mean = x.pixels.iter().map(|&p| p as f64).sum::<f64>() / n;
    let var = x.pixels.iter().map(|&p| (p as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    if std <= 1e-12 {
        return x.with_pixels(vec![0.5; x.pixels.len()]);
    }
    let k = 0.125 / std;
    x.with_pixels(x.pixels.iter().map(|&p| (0.5 + k * (p as f64 - mean)).clamp(0.0, 1.0) as f32).collect())
}

/// Result of [`sample_wise_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub latent: LatentSample,
    /// Set when the input had zero variance; the latent is then all zeros.
    pub degenerate: bool,
}

/// Rescales a latent to mean 0 and (population) standard deviation 0.5.
pub fn sample_wise_normalize(z: &LatentSample) -> Normalized {
    let n = z.values.len() as f64;
    let mean = z.values.iter().sum::<f64>() / n;
    let var = z.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        log::warn!("sample-wise normalization of a constant latent (id {})", z.id);
        return Normalized { latent: z.with_values(vec![0.0; z.values.len()]), degenerate: true };
    }
    let k = 0.5 / std;
    Normalized { latent: z.with_values(z.values.iter().map(|v| (v - mean) * k).collect()), degenerate: false }
}

impl core::fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for AugmentationKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_name(s)
    }
}
