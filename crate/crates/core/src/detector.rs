//! A trained detector seen end to end: image -> toy latent -> normalized
//! latent -> privacy features -> pair probability.

use alloc::vec::Vec;

use crate::error::{input_err, Result};
use crate::metrics::PairScorer;
use crate::model::{sigmoid, FeatureVector, ModelParams};
use crate::world::{ImageSample, LatentNormalizer, LatentSample, ToyAutoencoder};

/// Rows per encoder batch when embedding many images.
const EMBED_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy)]
pub struct Detector<'a> {
    pub autoencoder: &'a ToyAutoencoder,
    pub normalizer: &'a LatentNormalizer,
    pub params: &'a ModelParams,
}

impl<'a> Detector<'a> {
    pub fn new(autoencoder: &'a ToyAutoencoder, normalizer: &'a LatentNormalizer, params: &'a ModelParams) -> Result<Self> {
        let width = autoencoder.latent_shape().len();
        if width != params.dims.input {
            return Err(input_err!("latent width {width} does not match model input {}", params.dims.input));
        }
        Ok(Detector { autoencoder, normalizer, params })
    }

    pub fn latent(&self, x: &ImageSample) -> Result<LatentSample> {
        self.normalizer.apply(&self.autoencoder.encode(x)?)
    }

    /// Features for many normalized latents, batched through the encoder.
    pub fn features_of_latents(&self, latents: &[LatentSample]) -> Result<Vec<FeatureVector>> {
        let d = self.params.dims.feature;
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(EMBED_CHUNK) {
            let mut rows = Vec::with_capacity(chunk.len() * self.params.dims.input);
            for z in chunk {
                if z.values.len() != self.params.dims.input {
                    return Err(input_err!("latent {} has {} values, expected {}", z.id, z.values.len(), self.params.dims.input));
                }
                rows.extend_from_slice(&z.values);
            }
            let trace = self.params.encode_rows(&rows, chunk.len())?;
            out.extend(trace.features().chunks(d).map(|f| FeatureVector(f.to_vec())));
        }
        Ok(out)
    }

    pub fn features(&self, images: &[ImageSample]) -> Result<Vec<FeatureVector>> {
        let latents = images.iter().map(|x| self.latent(x)).collect::<Result<Vec<_>>>()?;
        self.features_of_latents(&latents)
    }

    /// `P(same identity)` for two images.
    pub fn probability(&self, a: &ImageSample, b: &ImageSample) -> Result<f64> {
        self.score(a, b)
    }
}

impl PairScorer for Detector<'_> {
    type Embedding = FeatureVector;

    fn embed(&self, x: &ImageSample) -> Result<FeatureVector> {
        self.params.encoder_forward(&self.latent(x)?)
    }

    fn compare(&self, a: &FeatureVector, b: &FeatureVector) -> f64 {
        sigmoid(self.params.head_logit(&a.0, &b.0))
    }
}
