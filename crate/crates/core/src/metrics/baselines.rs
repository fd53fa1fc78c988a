//! Pixel-wise similarity baselines.

use serde::{Deserialize, Serialize};

use super::PairScorer;
use crate::error::{config_err, input_err, Result};
use crate::world::ImageSample;

const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Mse,
    Ncc,
    Ssim,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::Mse, BaselineKind::Ncc, BaselineKind::Ssim];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Mse => "mse",
            BaselineKind::Ncc => "ncc",
            BaselineKind::Ssim => "ssim",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name).ok_or_else(|| config_err!("unknown baseline `{name}`"))
    }
}

/// Similarity of two images of the same shape; higher means more similar.
pub fn baseline_score(x: &ImageSample, y: &ImageSample, kind: BaselineKind) -> Result<f64> {
    if x.shape != y.shape || x.pixels.len() != y.pixels.len() {
        return Err(input_err!("baseline inputs differ in shape: {:?} vs {:?}", x.shape, y.shape));
    }
    Ok(match kind {
        BaselineKind::Mse => -mse(&x.pixels, &y.pixels),
        BaselineKind::Ncc => ncc(&x.pixels, &y.pixels),
        BaselineKind::Ssim => ssim(x, y),
    })
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / a.len() as f64
}

fn ncc(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&p, &q) in a.iter().zip(b) {
        let (da, db) = (p as f64 - ma, q as f64 - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        log::warn!("constant image in NCC baseline; scoring 0");
        return 0.0;
    }
    (sab / libm::sqrt(saa * sbb)).clamp(-1.0, 1.0)
}

/// Mean SSIM over all stride-1 8x8 windows of every channel.
fn ssim(x: &ImageSample, y: &ImageSample) -> f64 {
    let (h, w) = (x.shape.height, x.shape.width);
    let win_h = SSIM_WINDOW.min(h);
    let win_w = SSIM_WINDOW.min(w);
    let n = (win_h * win_w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..x.shape.channels {
        let base = c * h * w;
        for r0 in 0..=h - win_h {
            for c0 in 0..=w - win_w {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for r in r0..r0 + win_h {
                    for col in c0..c0 + win_w {
                        let a = x.pixels[base + r * w + col] as f64;
                        let b = y.pixels[base + r * w + col] as f64;
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let vx = (sxx / n - mx * mx).max(0.0);
                let vy = (syy / n - my * my).max(0.0);
                let cov = sxy / n - mx * my;
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// A baseline as a pair scorer; the "embedding" is the image itself.
#[derive(Debug, Clone, Copy)]
pub struct BaselineScorer(pub BaselineKind);

impl PairScorer for BaselineScorer {
    type Embedding = ImageSample;

    fn embed(&self, x: &ImageSample) -> Result<ImageSample> {
        Ok(x.clone())
    }

    fn compare(&self, a: &ImageSample, b: &ImageSample) -> f64 {
        baseline_score(a, b, self.0).unwrap_or(f64::NEG_INFINITY)
    }
}
