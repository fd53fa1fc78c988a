//! Post-hoc rejection filter and memorization rate.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::detector::Detector;
use crate::error::{config_err, Result};
use crate::metrics::PairScorer;
use crate::world::ImageSample;

/// Generated samples are scored as novel when `P(x_r, x_s)` is below this.
pub const NOVELTY_THRESHOLD: f64 = 0.5;

/// Anything a generator returns that carries an image.
pub trait Generated {
    fn image(&self) -> &ImageSample;
}

impl Generated for ImageSample {
    fn image(&self) -> &ImageSample {
        self
    }
}

/// Mock generator output: the image and its ground-truth memorization flag.
impl Generated for (ImageSample, bool) {
    fn image(&self) -> &ImageSample {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome<T> {
    /// The first novel draw, or the last draw when none was novel.
    pub sample: T,
    /// Generator calls made.
    pub attempts: usize,
    /// Draws scored at or above the threshold.
    pub rejected: usize,
    /// Whether `sample` was scored novel.
    pub resolved: bool,
    pub last_probability: f64,
}

/// Draws from `generate` until a sample scores below `threshold` against
/// `x_r`, making at most `max_attempts` draws.
pub fn filter_loop<T: Generated>(
    x_r: &ImageSample,
    mut generate: impl FnMut() -> Result<T>,
    detector: &Detector<'_>,
    max_attempts: usize,
    threshold: f64,
) -> Result<FilterOutcome<T>> {
    if max_attempts == 0 {
        return Err(config_err!("filter loop needs at least one attempt"));
    }
    let reference = detector.embed(x_r)?;
    let mut rejected = 0;
    let mut attempts = 0;
    loop {
        let sample = generate()?;
        attempts += 1;
        let p = detector.compare(&reference, &detector.embed(sample.image())?);
        if p < threshold {
            return Ok(FilterOutcome { sample, attempts, rejected, resolved: true, last_probability: p });
        }
        rejected += 1;
        if attempts == max_attempts {
            return Ok(FilterOutcome { sample, attempts, rejected, resolved: false, last_probability: p });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemRate {
    pub rate: f64,
    pub flagged: usize,
    pub pairs: usize,
}

/// Fraction of `(generated, real)` pairs with `P > 0.5`.
pub fn mem_rate(pairs: &[(ImageSample, ImageSample)], detector: &Detector<'_>) -> Result<MemRate> {
    if pairs.is_empty() {
        return Err(config_err!("memorization rate needs at least one pair"));
    }
    let flags = pairs
        .iter()
        .map(|(s, r)| Ok(detector.score(s, r)? > NOVELTY_THRESHOLD))
        .collect::<Result<Vec<bool>>>()?;
    Ok(mem_rate_from_flags(&flags))
}

pub fn mem_rate_from_flags(flags: &[bool]) -> MemRate {
    let flagged = flags.iter().filter(|&&f| f).count();
    MemRate { rate: flagged as f64 / flags.len().max(1) as f64, flagged, pairs: flags.len() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, ModelParams};
    use crate::world::{ImageShape, LatentNormalizer, ToyAutoencoder};

    fn fixture() -> (ToyAutoencoder, LatentNormalizer, ModelParams, ImageSample) {
        let shape = ImageShape { height: 8, width: 8, channels: 1 };
        let ae = ToyAutoencoder::with_default_mixing(shape);
        let norm = LatentNormalizer { datasets: alloc::vec![(0, 0.0, 1.0)] };
        let dims = ModelDims { input: 4, encoder_hidden: alloc::vec![4], feature: 3, head_hidden: 2 };
        let mut params = ModelParams::zeros(dims).unwrap();
        params.head[1].bias[0] = 10.0;
        let x = ImageSample::new(shape, alloc::vec![0.5; 64]).unwrap();
        (ae, norm, params, x)
    }

    #[test]
    fn mem_rate_arithmetic() {
        let r = mem_rate_from_flags(&[true, false, false, true, false]);
        assert_eq!(r.rate, 0.4);
        assert_eq!(r.flagged, 2);
    }

    #[test]
    fn always_matching_detector_never_resolves() {
        let (ae, norm, params, x) = fixture();
        let det = Detector::new(&ae, &norm, &params).unwrap();
        let out = filter_loop(&x, || Ok((x.clone(), true)), &det, 7, NOVELTY_THRESHOLD).unwrap();
        assert!(!out.resolved);
        assert_eq!((out.attempts, out.rejected), (7, 7));
        assert!(out.sample.1);
        let r = mem_rate(&[(x.clone(), x.clone())], &det).unwrap();
        assert_eq!(r.rate, 1.0);
    }

    #[test]
    fn never_matching_detector_accepts_first_draw() {
        let (ae, norm, mut params, x) = fixture();
        params.head[1].bias[0] = -10.0;
        let det = Detector::new(&ae, &norm, &params).unwrap();
        let mut calls = 0;
        let out = filter_loop(
            &x,
            || {
                calls += 1;
                Ok(x.clone())
            },
            &det,
            5,
            NOVELTY_THRESHOLD,
        )
        .unwrap();
        assert!(out.resolved);
        assert_eq!((out.attempts, out.rejected, calls), (1, 0, 1));
        assert!(filter_loop(&x, || Ok(x.clone()), &det, 0, 0.5).is_err());
        assert!(mem_rate(&[], &det).is_err());
    }
}
