//! Synthetic identity-structured corpora, the toy autoencoder and a mock
//! generator with a known memorization rate.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentationKind, AugmentationSpec};
use crate::error::{config_err, input_err, Result};
use crate::rng::{self, tag, Rng};

/// Spatial reduction per side applied by the toy encoder.
pub const LATENT_BLOCK: usize = 8;
/// Channel count of the toy latent.
pub const LATENT_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for ImageShape {
    fn default() -> Self {
        ImageShape { height: 64, width: 64, channels: 1 }
    }
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of the latent produced by [`ToyAutoencoder::encode`].
    pub fn latent(&self) -> LatentShape {
        LatentShape {
            channels: LATENT_CHANNELS,
            height: self.height / LATENT_BLOCK,
            width: self.width / LATENT_BLOCK,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A raster image with values in `[0, 1]`, stored channel-major
/// (`c * H * W + y * W + x`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub shape: ImageShape,
    pub pixels: Vec<f32>,
    pub identity: Option<u64>,
    pub dataset_id: u16,
    /// Corpus-unique source image id.
    pub id: u64,
}

impl ImageSample {
    pub fn new(shape: ImageShape, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != shape.len() {
            return Err(input_err!(
                "pixel count {} does not match shape {}x{}x{}",
                pixels.len(),
                shape.height,
                shape.width,
                shape.channels
            ));
        }
        Ok(ImageSample { shape, pixels, identity: None, dataset_id: 0, id: 0 })
    }

    /// Same metadata, new pixels.
    pub fn with_pixels(&self, pixels: Vec<f32>) -> Self {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        ImageSample { shape: self.shape, pixels, identity: self.identity, dataset_id: self.dataset_id, id: self.id }
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|&p| (0.0..=1.0).contains(&p))
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.shape.height + y) * self.shape.width + x]
    }
}

/// An encoded image, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub shape: LatentShape,
    pub values: Vec<f64>,
    pub identity: Option<u64>,
    pub dataset_id: u16,
    pub id: u64,
}

impl LatentSample {
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        LatentSample { shape: self.shape, values, identity: self.identity, dataset_id: self.dataset_id, id: self.id }
    }
}

fn default_max_shift() -> usize {
    0
}

fn default_fine_detail_fraction() -> f64 {
    0.1
}

fn default_nuisance_scale() -> f64 {
    0.045
}

fn default_split_fractions() -> [f64; 2] {
    [0.6, 0.2]
}

/// Parameters of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_datasets: usize,
    pub identities_per_dataset: usize,
    pub images_per_identity: usize,
    /// Standard deviation of the per-image additive pixel noise.
    pub intra_identity_noise_scale: f64,
    /// Minimum RMS pixel distance between identity prototype patterns.
    pub inter_identity_separation: f64,
    pub seed: u64,
    #[serde(default)]
    pub shape: ImageShape,
    /// Largest per-image translation of the prototype, in pixels.
    #[serde(default = "default_max_shift")]
    pub max_shift: usize,
    /// Share of identity-pattern energy in the fine band (frequencies 3 and 4);
    /// the rest is coarse (frequencies 1 and 2).
    #[serde(default = "default_fine_detail_fraction")]
    pub fine_detail_fraction: f64,
    /// RMS of a per-image smooth (frequencies 1 and 2) pixel field added on top
    /// of the white noise.
    #[serde(default = "default_nuisance_scale")]
    pub nuisance_scale: f64,
    /// Fractions of identities assigned to train and validation; test gets the rest.
    #[serde(default = "default_split_fractions")]
    pub split_fractions: [f64; 2],
}

impl CorpusSpec {
    /// The default desk-scale corpus: 3 datasets x 200 identities x 5 images.
    pub fn desk_default(seed: u64) -> Self {
        CorpusSpec {
            n_datasets: 3,
            identities_per_dataset: 200,
            images_per_identity: 5,
            intra_identity_noise_scale: 0.005,
            inter_identity_separation: 0.04,
            seed,
            shape: ImageShape::default(),
            max_shift: default_max_shift(),
            fine_detail_fraction: default_fine_detail_fraction(),
            nuisance_scale: default_nuisance_scale(),
            split_fractions: default_split_fractions(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_datasets == 0 || self.identities_per_dataset == 0 || self.images_per_identity == 0 {
            return Err(config_err!("corpus counts must all be at least 1"));
        }
        if self.n_datasets > u16::MAX as usize {
            return Err(config_err!("at most {} datasets supported", u16::MAX));
        }
        if !(self.intra_identity_noise_scale >= 0.0) || !self.intra_identity_noise_scale.is_finite() {
            return Err(config_err!("intra_identity_noise_scale must be finite and >= 0"));
        }
        if !(self.inter_identity_separation >= 0.0) || !self.inter_identity_separation.is_finite() {
            return Err(config_err!("inter_identity_separation must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.fine_detail_fraction) {
            return Err(config_err!("fine_detail_fraction must be in [0, 1]"));
        }
        if !(self.nuisance_scale >= 0.0) || !self.nuisance_scale.is_finite() {
            return Err(config_err!("nuisance_scale must be finite and >= 0"));
        }
        let s = self.shape;
        if s.height == 0 || s.width == 0 || s.height % LATENT_BLOCK != 0 || s.width % LATENT_BLOCK != 0 {
            return Err(config_err!("image height and width must be positive multiples of {LATENT_BLOCK}"));
        }
        if s.channels == 0 || s.channels > LATENT_CHANNELS {
            return Err(config_err!("image channels must be in 1..={LATENT_CHANNELS}"));
        }
        let [tr, va] = self.split_fractions;
        if !(tr > 0.0 && va >= 0.0 && tr + va <= 1.0) {
            return Err(config_err!("split fractions must satisfy train > 0, val >= 0, train + val <= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A generated corpus partitioned by identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[ImageSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &ImageSample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Zero-mean, unit-RMS random field built from plane waves whose larger
/// frequency index lies in `min_freq..=max_freq`.
fn smooth_field(rng: &mut Rng, shape: ImageShape, min_freq: usize, max_freq: usize) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let mut field = vec![0.0f64; h * w];
    let mut xcos = vec![0.0f64; w];
    let mut xsin = vec![0.0f64; w];
    let mut ycos = vec![0.0f64; h];
    let mut ysin = vec![0.0f64; h];
    for fy in 0..=max_freq {
        for fx in 0..=max_freq {
            if fx.max(fy) < min_freq.max(1) {
                continue;
            }
            let n: f64 = rng.sample(StandardNormal);
            let amp = n / libm::sqrt(1.0 + (fx * fx + fy * fy) as f64);
            let phase = rng.gen::<f64>() * 2.0 * PI;
            for (x, (c, s)) in xcos.iter_mut().zip(xsin.iter_mut()).enumerate() {
                let a = 2.0 * PI * (fx * x) as f64 / w as f64 + phase;
                *c = libm::cos(a);
                *s = libm::sin(a);
            }
            for (y, (c, s)) in ycos.iter_mut().zip(ysin.iter_mut()).enumerate() {
                let b = 2.0 * PI * (fy * y) as f64 / h as f64;
                *c = libm::cos(b);
                *s = libm::sin(b);
            }
            for y in 0..h {
                let row = &mut field[y * w..(y + 1) * w];
                for x in 0..w {
                    // cos(a + b)
                    row[x] += amp * (xcos[x] * ycos[y] - xsin[x] * ysin[y]);
                }
            }
        }
    }
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let rms = libm::sqrt(field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n);
    let scale = if rms > 0.0 { 1.0 / rms } else { 0.0 };
    field.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    field
}

fn rms_distance(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    libm::sqrt(s / a.len() as f64)
}

const TEMPLATE_LEVEL: f64 = 0.5;
const TEMPLATE_AMPLITUDE: f64 = 0.12;
const TEMPLATE_FREQ: usize = 2;
const COARSE_FREQ: usize = 2;
const FINE_FREQ: [usize; 2] = [3, 4];
/// Identity pattern amplitude relative to the requested separation.
const IDENTITY_GAIN: f64 = 1.5;
const MAX_PROTOTYPE_ATTEMPTS: usize = 64;

/// Generates a corpus with identity-disjoint train/val/test splits.
///
/// Each dataset has a shared low-frequency template; each identity adds its
/// own low-frequency pattern, redrawn until it lies at least
/// `inter_identity_separation` (RMS, before clamping) from every earlier
/// identity pattern. Images are the prototype translated by up to
/// `max_shift` pixels plus Gaussian noise of std `intra_identity_noise_scale`,
/// clamped to `[0, 1]` and rounded to f32.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let shape = spec.shape;
    let plane = shape.height * shape.width;
    let mut rng = rng::stream(spec.seed, tag::CORPUS);

    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(spec.n_datasets * spec.identities_per_dataset);
    let mut patterns: Vec<Vec<f64>> = Vec::with_capacity(prototypes.capacity());
    let amplitude = IDENTITY_GAIN * spec.inter_identity_separation;
    let fine_gain = libm::sqrt(spec.fine_detail_fraction);
    let coarse_gain = libm::sqrt(1.0 - spec.fine_detail_fraction);
    for _ in 0..spec.n_datasets {
        let templates: Vec<Vec<f64>> =
            (0..shape.channels).map(|_| smooth_field(&mut rng, shape, 1, TEMPLATE_FREQ)).collect();
        for _ in 0..spec.identities_per_dataset {
            let mut accepted = None;
            for _ in 0..MAX_PROTOTYPE_ATTEMPTS {
                let mut pattern = Vec::with_capacity(shape.len());
                for _ in 0..shape.channels {
                    let coarse = smooth_field(&mut rng, shape, 1, COARSE_FREQ);
                    let fine = smooth_field(&mut rng, shape, FINE_FREQ[0], FINE_FREQ[1]);
                    pattern.extend(coarse.iter().zip(&fine).map(|(c, f)| amplitude * (coarse_gain * c + fine_gain * f)));
                }
                // Template offsets cancel in differences within a dataset, but
                // compare full prototypes so the bound also holds across datasets.
                let mut proto = Vec::with_capacity(shape.len());
                for c in 0..shape.channels {
                    for i in 0..plane {
                        proto.push(TEMPLATE_LEVEL + TEMPLATE_AMPLITUDE * templates[c][i] + pattern[c * plane + i]);
                    }
                }
                if prototypes.iter().all(|p| rms_distance(p, &proto) >= spec.inter_identity_separation) {
                    accepted = Some((pattern, proto));
                    break;
                }
            }
            let Some((pattern, proto)) = accepted else {
                return Err(config_err!(
                    "could not place {} identities at separation {}",
                    spec.n_datasets * spec.identities_per_dataset,
                    spec.inter_identity_separation
                ));
            };
            patterns.push(pattern);
            prototypes.push(proto);
        }
    }

    let mut corpus = Corpus { spec: spec.clone(), train: Vec::new(), val: Vec::new(), test: Vec::new() };
    let mut split_rng = rng::stream(spec.seed, tag::SPLITS);
    for d in 0..spec.n_datasets {
        let mut order: Vec<usize> = (0..spec.identities_per_dataset).collect();
        order.shuffle(&mut split_rng);
        let n = order.len();
        let n_train = ((n as f64 * spec.split_fractions[0]).round() as usize).clamp(1, n);
        let n_val = ((n as f64 * spec.split_fractions[1]).round() as usize).min(n - n_train);
        let mut assignment = vec![Split::Test; n];
        for (rank, &local) in order.iter().enumerate() {
            assignment[local] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        for local in 0..spec.identities_per_dataset {
            let identity = (d * spec.identities_per_dataset + local) as u64;
            let proto = &prototypes[identity as usize];
            for k in 0..spec.images_per_identity {
                let id = identity * spec.images_per_identity as u64 + k as u64;
                let pixels = render_instance(proto, shape, spec, &mut rng);
                let sample = ImageSample { shape, pixels, identity: Some(identity), dataset_id: d as u16, id };
                match assignment[local] {
                    Split::Train => corpus.train.push(sample),
                    Split::Val => corpus.val.push(sample),
                    Split::Test => corpus.test.push(sample),
                }
            }
        }
    }
    Ok(corpus)
}

fn render_instance(proto: &[f64], shape: ImageShape, spec: &CorpusSpec, rng: &mut Rng) -> Vec<f32> {
    let (h, w) = (shape.height as isize, shape.width as isize);
    let m = spec.max_shift as isize;
    let (dy, dx) = if m > 0 { (rng.gen_range(-m..=m), rng.gen_range(-m..=m)) } else { (0, 0) };
    let mut out = Vec::with_capacity(shape.len());
    for c in 0..shape.channels {
        let base = c * shape.height * shape.width;
        let nuisance = if spec.nuisance_scale > 0.0 {
            smooth_field(rng, shape, 1, COARSE_FREQ)
        } else {
            vec![0.0; shape.height * shape.width]
        };
        for y in 0..h {
            let sy = (y - dy).clamp(0, h - 1) as usize;
            for x in 0..w {
                let sx = (x - dx).clamp(0, w - 1) as usize;
                let noise: f64 = if spec.intra_identity_noise_scale > 0.0 {
                    spec.intra_identity_noise_scale * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                let v = proto[base + sy * shape.width + sx] + spec.nuisance_scale * nuisance[y as usize * shape.width + x as usize] + noise;
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

/// Toy stand-in for a pretrained image autoencoder: 8x8 block-average pooling
/// followed by an orthonormal 4x4 channel mixing. Image channels are lifted
/// into the first `C` of 4 slots (the rest zero) before mixing; decoding
/// applies the transpose and upsamples by nearest neighbour.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAutoencoder {
    pub image_shape: ImageShape,
    mixing: [[f64; LATENT_CHANNELS]; LATENT_CHANNELS],
}

impl ToyAutoencoder {
    /// Mixing seed used by every command unless overridden.
    pub const DEFAULT_MIXING_SEED: u64 = 0x4C43_4D45_4D5F_4145;

    pub fn seeded(image_shape: ImageShape, seed: u64) -> Self {
        let mut rng = rng::stream(seed, tag::MIXING);
        let mut m = [[0.0f64; LATENT_CHANNELS]; LATENT_CHANNELS];
        // Gram-Schmidt on a Gaussian matrix; rows become orthonormal.
        loop {
            for row in m.iter_mut() {
                for v in row.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            }
            let mut ok = true;
            for i in 0..LATENT_CHANNELS {
                for j in 0..i {
                    let dot: f64 = (0..LATENT_CHANNELS).map(|k| m[i][k] * m[j][k]).sum();
                    for k in 0..LATENT_CHANNELS {
                        m[i][k] -= dot * m[j][k];
                    }
                }
                let norm = libm::sqrt(m[i].iter().map(|v| v * v).sum::<f64>());
                if norm < 1e-6 {
                    ok = false;
                    break;
                }
                m[i].iter_mut().for_each(|v| *v /= norm);
            }
            if ok {
                break;
            }
        }
        ToyAutoencoder { image_shape, mixing: m }
    }

    pub fn with_default_mixing(image_shape: ImageShape) -> Self {
        Self::seeded(image_shape, Self::DEFAULT_MIXING_SEED)
    }

    /// Identity channel mixing, used by tests.
    pub fn identity(image_shape: ImageShape) -> Self {
        let mut m = [[0.0; LATENT_CHANNELS]; LATENT_CHANNELS];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        ToyAutoencoder { image_shape, mixing: m }
    }

    pub fn mixing(&self) -> &[[f64; LATENT_CHANNELS]; LATENT_CHANNELS] {
        &self.mixing
    }

    pub fn latent_shape(&self) -> LatentShape {
        self.image_shape.latent()
    }

    pub fn encode(&self, x: &ImageSample) -> Result<LatentSample> {
        if x.shape != self.image_shape {
            return Err(input_err!("image shape {:?} does not match encoder shape {:?}", x.shape, self.image_shape));
        }
        let ls = self.latent_shape();
        let (lh, lw) = (ls.height, ls.width);
        let mut pooled = vec![0.0f64; LATENT_CHANNELS * lh * lw];
        let norm = 1.0 / (LATENT_BLOCK * LATENT_BLOCK) as f64;
        for c in 0..x.shape.channels {
            for by in 0..lh {
                for bx in 0..lw {
                    let mut acc = 0.0f64;
                    for y in by * LATENT_BLOCK..(by + 1) * LATENT_BLOCK {
                        let row = (c * x.shape.height + y) * x.shape.width;
                        for &p in &x.pixels[row + bx * LATENT_BLOCK..row + (bx + 1) * LATENT_BLOCK] {
                            acc += p as f64;
                        }
                    }
                    pooled[(c * lh + by) * lw + bx] = acc * norm;
                }
            }
        }
        let plane = lh * lw;
        let mut values = vec![0.0f64; LATENT_CHANNELS * plane];
        for i in 0..plane {
            for o in 0..LATENT_CHANNELS {
                let mut acc = 0.0;
                for c in 0..x.shape.channels {
                    acc += self.mixing[o][c] * pooled[c * plane + i];
                }
                values[o * plane + i] = acc;
            }
        }
        Ok(LatentSample { shape: ls, values, identity: x.identity, dataset_id: x.dataset_id, id: x.id })
    }

    /// Inverse mixing then nearest-neighbour upsampling. Values are not clamped.
    pub fn decode(&self, z: &LatentSample) -> Result<ImageSample> {
        let ls = self.latent_shape();
        if z.shape != ls || z.values.len() != ls.len() {
            return Err(input_err!("latent shape {:?} does not match decoder shape {:?}", z.shape, ls));
        }
        let plane = ls.height * ls.width;
        let s = self.image_shape;
        let mut pixels = vec![0.0f32; s.len()];
        for c in 0..s.channels {
            for by in 0..ls.height {
                for bx in 0..ls.width {
                    let i = by * ls.width + bx;
                    let v: f64 = (0..LATENT_CHANNELS).map(|o| self.mixing[o][c] * z.values[o * plane + i]).sum();
                    for y in by * LATENT_BLOCK..(by + 1) * LATENT_BLOCK {
                        let row = (c * s.height + y) * s.width;
                        pixels[row + bx * LATENT_BLOCK..row + (bx + 1) * LATENT_BLOCK].fill(v as f32);
                    }
                }
            }
        }
        Ok(ImageSample { shape: s, pixels, identity: z.identity, dataset_id: z.dataset_id, id: z.id })
    }
}

/// Per-dataset affine normalization of latents to mean 0 and std 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentNormalizer {
    /// `(dataset_id, mean, std)` per dataset, sorted by dataset id.
    pub datasets: Vec<(u16, f64, f64)>,
}

impl LatentNormalizer {
    pub const TARGET_STD: f64 = 0.5;

    /// Fits mean/std over all elements of each dataset's latents.
    pub fn fit(latents: &[LatentSample]) -> Result<Self> {
        let mut sums: Vec<(u16, f64, f64, usize)> = Vec::new();
        for z in latents {
            let entry = match sums.iter().position(|e| e.0 == z.dataset_id) {
                Some(i) => &mut sums[i],
                None => {
                    sums.push((z.dataset_id, 0.0, 0.0, 0));
                    sums.last_mut().unwrap()
                }
            };
            for &v in &z.values {
                entry.1 += v;
                entry.2 += v * v;
            }
            entry.3 += z.values.len();
        }
        if sums.is_empty() {
            return Err(input_err!("cannot fit a normalizer on zero latents"));
        }
        sums.sort_by_key(|e| e.0);
        let mut datasets = Vec::with_capacity(sums.len());
        for (id, s, s2, n) in sums {
            let mean = s / n as f64;
            let var = (s2 / n as f64 - mean * mean).max(0.0);
            let std = libm::sqrt(var);
            if std <= 1e-12 {
                return Err(input_err!("dataset {id} has constant latents"));
            }
            datasets.push((id, mean, std));
        }
        Ok(LatentNormalizer { datasets })
    }

    pub fn stats(&self, dataset_id: u16) -> Result<(f64, f64)> {
        self.datasets
            .iter()
            .find(|e| e.0 == dataset_id)
            .map(|e| (e.1, e.2))
            .ok_or_else(|| input_err!("normalizer has no statistics for dataset {dataset_id}"))
    }

    pub fn apply(&self, z: &LatentSample) -> Result<LatentSample> {
        let (mean, std) = self.stats(z.dataset_id)?;
        let k = Self::TARGET_STD / std;
        Ok(z.with_values(z.values.iter().map(|v| (v - mean) * k).collect()))
    }
}

/// Stand-in for a generative model whose memorization rate is known.
///
/// With probability `p_mem` it returns a lightly augmented copy of the real
/// image (flag `true`); otherwise an image of a different identity drawn from
/// `pool` (flag `false`).
#[derive(Debug, Clone)]
pub struct MockGenerator<'a> {
    pool: &'a [ImageSample],
    /// Upper bound of the copy augmentation strength.
    pub copy_strength: f64,
}

/// Augmentation kinds used for lightly perturbed copies.
pub const LIGHT_KINDS: [AugmentationKind; 6] = [
    AugmentationKind::Rotation,
    AugmentationKind::GaussianBlur,
    AugmentationKind::AdditiveNoise,
    AugmentationKind::Brightness,
    AugmentationKind::Contrast,
    AugmentationKind::LossyCompression,
];

impl<'a> MockGenerator<'a> {
    pub fn new(pool: &'a [ImageSample]) -> Result<Self> {
        if pool.is_empty() {
            return Err(config_err!("mock generator needs a non-empty image pool"));
        }
        Ok(MockGenerator { pool, copy_strength: 0.3 })
    }

    pub fn generate(&self, x_r: &ImageSample, p_mem: f64, rng: &mut Rng) -> Result<(ImageSample, bool)> {
        if !(0.0..=1.0).contains(&p_mem) {
            return Err(config_err!("p_mem must be in [0, 1], got {p_mem}"));
        }
        // Draw unconditionally so the stream advances identically for p_mem 0 and 1.
        let u: f64 = rng.gen();
        if u < p_mem {
            let kind = LIGHT_KINDS[rng.gen_range(0..LIGHT_KINDS.len())];
            let strength = rng.gen::<f64>() * self.copy_strength;
            let copy = augment::apply_augmentation(x_r, &AugmentationSpec { kind, strength }, rng)?;
            return Ok((copy, true));
        }
        for _ in 0..1024 {
            let cand = &self.pool[rng.gen_range(0..self.pool.len())];
            let different = match (cand.identity, x_r.identity) {
                (Some(a), Some(b)) => a != b,
                _ => cand.id != x_r.id,
            };
            if different {
                return Ok((cand.clone(), false));
            }
        }
        Err(config_err!("mock generator pool holds no image of a different identity"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> CorpusSpec {
        CorpusSpec {
            n_datasets: 2,
            identities_per_dataset: 10,
            images_per_identity: 3,
            intra_identity_noise_scale: 0.05,
            inter_identity_separation: 0.1,
            ..CorpusSpec::desk_default(seed)
        }
    }

    fn pixel_mse(a: &ImageSample, b: &ImageSample) -> f64 {
        a.pixels.iter().zip(&b.pixels).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.pixels.len() as f64
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = generate_corpus(&small_spec(7)).unwrap();
        let b = generate_corpus(&small_spec(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&small_spec(8)).unwrap();
        assert_ne!(a.train[0].pixels, c.train[0].pixels);
    }

    #[test]
    fn splits_are_identity_disjoint() {
        let corpus = generate_corpus(&small_spec(3)).unwrap();
        for (i, a) in Split::ALL.iter().enumerate() {
            for b in &Split::ALL[i + 1..] {
                for x in corpus.split(*a) {
                    assert!(corpus.split(*b).iter().all(|y| y.identity != x.identity));
                }
            }
        }
        assert_eq!(corpus.all().count(), 60);
        assert!(corpus.all().all(ImageSample::in_unit_range));
    }

    #[test]
    fn single_image_identities_have_no_positive_pairs() {
        let mut spec = small_spec(1);
        spec.images_per_identity = 1;
        let corpus = generate_corpus(&spec).unwrap();
        for split in Split::ALL {
            let imgs = corpus.split(split);
            for (i, a) in imgs.iter().enumerate() {
                assert!(imgs[i + 1..].iter().all(|b| b.identity != a.identity));
            }
        }
    }

    #[test]
    fn invalid_counts_are_rejected() {
        let mut spec = small_spec(1);
        spec.identities_per_dataset = 0;
        assert!(matches!(generate_corpus(&spec), Err(crate::Error::Config(_))));
        let mut spec = small_spec(1);
        spec.intra_identity_noise_scale = -1.0;
        assert!(matches!(generate_corpus(&spec), Err(crate::Error::Config(_))));
    }

    #[test]
    fn intra_identity_mse_below_inter_identity_mse() {
        let spec = CorpusSpec {
            n_datasets: 1,
            identities_per_dataset: 200,
            images_per_identity: 5,
            intra_identity_noise_scale: 0.05,
            inter_identity_separation: 0.5,
            seed: 11,
            ..CorpusSpec::desk_default(11)
        };
        let corpus = generate_corpus(&spec).unwrap();
        let imgs: Vec<&ImageSample> = corpus.all().collect();
        let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                let m = pixel_mse(imgs[i], imgs[j]);
                if imgs[i].identity == imgs[j].identity {
                    intra += m;
                    n_intra += 1;
                } else {
                    inter += m;
                    n_inter += 1;
                }
            }
        }
        let (intra, inter) = (intra / n_intra as f64, inter / n_inter as f64);
        assert!(intra < inter, "intra {intra} inter {inter}");
    }

    #[test]
    fn decode_of_encode_is_block_average_with_identity_mixing() {
        let corpus = generate_corpus(&small_spec(5)).unwrap();
        let x = &corpus.train[0];
        let ae = ToyAutoencoder::identity(x.shape);
        let back = ae.decode(&ae.encode(x).unwrap()).unwrap();
        for by in 0..8 {
            for bx in 0..8 {
                let mut acc = 0.0f64;
                for y in by * 8..by * 8 + 8 {
                    for xx in bx * 8..bx * 8 + 8 {
                        acc += x.at(0, y, xx) as f64;
                    }
                }
                let avg = (acc / 64.0) as f32;
                for y in by * 8..by * 8 + 8 {
                    for xx in bx * 8..bx * 8 + 8 {
                        assert!((back.at(0, y, xx) - avg).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn seeded_mixing_is_orthonormal_and_decode_inverts_pooling() {
        let shape = ImageShape::default();
        let ae = ToyAutoencoder::with_default_mixing(shape);
        let m = ae.mixing();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..4).map(|k| m[i][k] * m[j][k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let corpus = generate_corpus(&small_spec(5)).unwrap();
        let x = &corpus.train[1];
        let z1 = ae.encode(x).unwrap();
        assert_eq!(z1, ae.encode(x).unwrap());
        let id = ToyAutoencoder::identity(shape);
        let a = ae.decode(&z1).unwrap();
        let b = id.decode(&id.encode(x).unwrap()).unwrap();
        for (p, q) in a.pixels.iter().zip(&b.pixels) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn encoder_is_linear() {
        let corpus = generate_corpus(&small_spec(5)).unwrap();
        let x = &corpus.train[2];
        let ae = ToyAutoencoder::with_default_mixing(x.shape);
        let scaled = x.with_pixels(x.pixels.iter().map(|p| p * 0.5).collect());
        let a = ae.encode(x).unwrap();
        let b = ae.encode(&scaled).unwrap();
        for (u, v) in a.values.iter().zip(&b.values) {
            assert!((0.5 * u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_suppresses_high_frequency_detail() {
        let shape = ImageShape::default();
        let checker: Vec<f32> = (0..64 * 64).map(|i| if (i / 64 + i % 64) % 2 == 0 { 0.9 } else { 0.1 }).collect();
        let x = ImageSample::new(shape, checker).unwrap();
        // 3x3 box blur with edge clamping.
        let mut blurred = vec![0.0f32; 64 * 64];
        for y in 0..64isize {
            for xx in 0..64isize {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        acc += x.at(0, (y + dy).clamp(0, 63) as usize, (xx + dx).clamp(0, 63) as usize);
                    }
                }
                blurred[(y * 64 + xx) as usize] = acc / 9.0;
            }
        }
        let xb = x.with_pixels(blurred);
        let ae = ToyAutoencoder::with_default_mixing(shape);
        let img_dist = libm::sqrt(pixel_mse(&x, &xb));
        let za = ae.encode(&x).unwrap();
        let zb = ae.encode(&xb).unwrap();
        let lat_dist = libm::sqrt(
            za.values.iter().zip(&zb.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / za.values.len() as f64,
        );
        assert!(lat_dist / img_dist < 1.0, "ratio {}", lat_dist / img_dist);
    }

    #[test]
    fn encode_rejects_wrong_shape() {
        let ae = ToyAutoencoder::with_default_mixing(ImageShape::default());
        let x = ImageSample::new(ImageShape { height: 16, width: 16, channels: 1 }, vec![0.0; 256]).unwrap();
        assert!(matches!(ae.encode(&x), Err(crate::Error::Input(_))));
    }

    #[test]
    fn normalizer_targets_half_std() {
        let corpus = generate_corpus(&small_spec(9)).unwrap();
        let ae = ToyAutoencoder::with_default_mixing(corpus.spec.shape);
        let lat: Vec<LatentSample> = corpus.train.iter().map(|x| ae.encode(x).unwrap()).collect();
        let norm = LatentNormalizer::fit(&lat).unwrap();
        let out: Vec<f64> = lat
            .iter()
            .filter(|z| z.dataset_id == 0)
            .flat_map(|z| norm.apply(z).unwrap().values)
            .collect();
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        let std = libm::sqrt(out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n);
        assert!(mean.abs() < 1e-9);
        assert!((std - 0.5).abs() < 1e-9);
    }

    #[test]
    fn mock_generator_flag_rates() {
        let corpus = generate_corpus(&small_spec(4)).unwrap();
        let gen = MockGenerator::new(&corpus.train).unwrap();
        let x = &corpus.train[0];
        let mut rng = rng::stream(1, tag::GENERATOR);
        for _ in 0..50 {
            let (s, flag) = gen.generate(x, 0.0, &mut rng).unwrap();
            assert!(!flag);
            assert_ne!(s.identity, x.identity);
            assert!(gen.generate(x, 1.0, &mut rng).unwrap().1);
        }
        let n = 10_000;
        let hits = (0..n).filter(|_| gen.generate(x, 0.1, &mut rng).unwrap().1).count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.1).abs() <= 0.01, "rate {rate}");
    }
}
