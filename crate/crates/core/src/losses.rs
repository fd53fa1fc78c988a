//! Contrastive (NT-Xent), classification (BCE) and combined training losses.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::linalg::{gemm, Op};
use crate::model::{FeatureVector, LossGradients, ModelParams, SiameseTrace};

fn default_alpha() -> f64 {
    0.8
}

fn default_temperature() -> f64 {
    0.07
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the contrastive term; `1 - alpha` weighs classification.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Unit-normalize features before the contrastive dot products.
    #[serde(default = "default_true")]
    pub normalize_features: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: default_alpha(), temperature: default_temperature(), normalize_features: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(config_err!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLoss {
    pub loss: f64,
    /// `dL/du`, row-major `n x d`.
    pub grad: Vec<f64>,
    /// Number of anchors that had at least one positive.
    pub anchors: usize,
}

impl ContrastiveLoss {
    /// True when no anchor had a positive and the term was set to zero.
    pub fn degenerate(&self) -> bool {
        self.anchors == 0
    }
}

/// NT-Xent over `n` feature rows of width `dim`.
///
/// For anchor `a` the keys are all other rows; positives are rows with the
/// same identity. Each anchor's loss is the mean over its positives of
/// `-log softmax`, the batch loss the mean over anchors with positives.
/// Anchors without positives still serve as keys for others.
pub fn nt_xent_loss(features: &[f64], dim: usize, identities: &[u64], config: &LossConfig) -> Result<ContrastiveLoss> {
    config.validate()?;
    let n = identities.len();
    if dim == 0 || features.len() != n * dim {
        return Err(input_err!("expected {n} x {dim} features, got {} values", features.len()));
    }
    let tau = config.temperature;

    let mut norms = vec![1.0f64; n];
    let mut unit = features.to_vec();
    if config.normalize_features {
        for (row, norm) in unit.chunks_mut(dim).zip(norms.iter_mut()) {
            *norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
            row.iter_mut().for_each(|v| *v /= *norm);
        }
    }
    let mut sim = vec![0.0; n * n];
    gemm(n, dim, n, 1.0, &unit, Op::N, &unit, Op::T, 0.0, &mut sim);

    let anchors = (0..n).filter(|&a| (0..n).any(|i| i != a && identities[i] == identities[a])).count();
    if anchors == 0 {
        log::warn!("contrastive batch of {n} rows has no positive pairs; term set to 0");
        return Ok(ContrastiveLoss { loss: 0.0, grad: vec![0.0; n * dim], anchors: 0 });
    }
    let scale = 1.0 / anchors as f64;

    // coef[a][i] = dL/dsim[a][i]
    let mut coef = vec![0.0; n * n];
    let mut loss = 0.0;
    for a in 0..n {
        let positives = (0..n).filter(|&i| i != a && identities[i] == identities[a]).count();
        if positives == 0 {
            continue;
        }
        let row = &sim[a * n..(a + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for (i, &s) in row.iter().enumerate() {
            if i != a {
                max = max.max(s / tau);
            }
        }
        let mut denom = 0.0;
        for (i, &s) in row.iter().enumerate() {
            if i != a {
                denom += libm::exp(s / tau - max);
            }
        }
        let lse = max + libm::log(denom);
        let mut pos_sum = 0.0;
        for (i, &s) in row.iter().enumerate() {
            if i == a {
                continue;
            }
            let softmax = libm::exp(s / tau - lse);
            let is_pos = identities[i] == identities[a];
            if is_pos {
                pos_sum += s / tau;
            }
            let target = if is_pos { 1.0 / positives as f64 } else { 0.0 };
            coef[a * n + i] = scale * (softmax - target) / tau;
        }
        loss += lse - pos_sum / positives as f64;
    }
    loss *= scale;

    // d unit = (C + C^T) unit
    for a in 0..n {
        for i in a + 1..n {
            let s = coef[a * n + i] + coef[i * n + a];
            coef[a * n + i] = s;
            coef[i * n + a] = s;
        }
    }
    let mut grad = vec![0.0; n * dim];
    gemm(n, n, dim, 1.0, &coef, Op::N, &unit, Op::N, 0.0, &mut grad);
    if config.normalize_features {
        for ((g, u), &norm) in grad.chunks_mut(dim).zip(unit.chunks(dim)).zip(&norms) {
            let dot: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
            for (gv, uv) in g.iter_mut().zip(u) {
                *gv = (*gv - uv * dot) / norm;
            }
        }
    }
    Ok(ContrastiveLoss { loss, grad, anchors })
}

/// Convenience form over owned feature vectors.
pub fn nt_xent_loss_vectors(features: &[FeatureVector], identities: &[u64], config: &LossConfig) -> Result<ContrastiveLoss> {
    let dim = features.first().map_or(0, FeatureVector::dim);
    if features.iter().any(|f| f.dim() != dim) {
        return Err(input_err!("feature vectors have mixed dimensions"));
    }
    let flat: Vec<f64> = features.iter().flat_map(|f| f.0.iter().copied()).collect();
    nt_xent_loss(&flat, dim, identities, config)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bce {
    pub loss: f64,
    /// `dL/dlogit = sigmoid(logit) - y`.
    pub grad_logit: f64,
}

/// Binary cross-entropy of `sigmoid(logit)` against `y`, evaluated in logit
/// space: `max(l, 0) - l y + log(1 + exp(-|l|))`.
pub fn bce_loss(logit: f64, y: bool) -> Bce {
    let t = if y { 1.0 } else { 0.0 };
    let loss = logit.max(0.0) - logit * t + libm::log1p(libm::exp(-logit.abs()));
    Bce { loss, grad_logit: crate::model::sigmoid(logit) - t }
}

/// Training pairs in latent space. Row `i` of `left` and `right` form pair `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    /// Flattened latent width.
    pub width: usize,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    /// `true` when both sides share an identity.
    pub labels: Vec<bool>,
    /// Contrastive identity of each side (the source image id in unsupervised mode).
    pub left_identity: Vec<u64>,
    pub right_identity: Vec<u64>,
    pub left_dataset: Vec<u16>,
    pub right_dataset: Vec<u16>,
    pub left_source: Vec<u64>,
    pub right_source: Vec<u64>,
}

impl PairBatch {
    pub fn with_width(width: usize) -> Self {
        PairBatch {
            width,
            left: Vec::new(),
            right: Vec::new(),
            labels: Vec::new(),
            left_identity: Vec::new(),
            right_identity: Vec::new(),
            left_dataset: Vec::new(),
            right_dataset: Vec::new(),
            left_source: Vec::new(),
            right_source: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n == 0 {
            return Err(input_err!("pair batch is empty"));
        }
        let consistent = self.left.len() == n * self.width
            && self.right.len() == n * self.width
            && [self.left_identity.len(), self.right_identity.len(), self.left_dataset.len(), self.right_dataset.len()]
                .iter()
                .all(|&l| l == n)
            && self.left_source.len() == n
            && self.right_source.len() == n;
        if !consistent {
            return Err(input_err!("pair batch arrays have inconsistent lengths"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub contrastive: f64,
    pub classification: f64,
    /// Anchors with a positive in the contrastive term (0 means the term was skipped).
    pub contrastive_anchors: usize,
}

/// Loss terms and upstream gradients for a forward trace, without touching
/// parameter gradients.
pub fn loss_and_upstream(
    trace: &SiameseTrace,
    batch: &PairBatch,
    dim: usize,
    config: &LossConfig,
) -> Result<(LossBreakdown, LossGradients)> {
    let pairs = batch.len();
    let mut identities = Vec::with_capacity(2 * pairs);
    identities.extend_from_slice(&batch.left_identity);
    identities.extend_from_slice(&batch.right_identity);
    let contrastive = nt_xent_loss(trace.encoder.features(), dim, &identities, config)?;

    let mut classification = 0.0;
    let mut dlogits = Vec::with_capacity(pairs);
    let inv = 1.0 / pairs as f64;
    for (&logit, &y) in trace.head.logits().iter().zip(&batch.labels) {
        let b = bce_loss(logit, y);
        classification += b.loss * inv;
        dlogits.push((1.0 - config.alpha) * b.grad_logit * inv);
    }
    let features = contrastive.grad.iter().map(|g| config.alpha * g).collect();
    let total = config.alpha * contrastive.loss + (1.0 - config.alpha) * classification;
    Ok((
        LossBreakdown { total, contrastive: contrastive.loss, classification, contrastive_anchors: contrastive.anchors },
        LossGradients { features, logits: dlogits },
    ))
}

/// `alpha * L_contrastive + (1 - alpha) * L_classification` over a pair
/// batch, with gradients accumulated into `params`.
pub fn combined_loss(batch: &PairBatch, params: &mut ModelParams, config: &LossConfig) -> Result<LossBreakdown> {
    config.validate()?;
    batch.validate()?;
    let trace = params.siamese_forward(&batch.left, &batch.right, batch.len())?;
    let (breakdown, grads) = loss_and_upstream(&trace, batch, params.dims.feature, config)?;
    params.backward(&trace, &grads)?;
    Ok(breakdown)
}

/// Forward-only value of [`combined_loss`].
pub fn combined_loss_value(batch: &PairBatch, params: &ModelParams, config: &LossConfig) -> Result<LossBreakdown> {
    config.validate()?;
    batch.validate()?;
    let trace = params.siamese_forward(&batch.left, &batch.right, batch.len())?;
    Ok(loss_and_upstream(&trace, batch, params.dims.feature, config)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::LN_2;

    fn cfg(normalize: bool) -> LossConfig {
        LossConfig { alpha: 0.5, temperature: 0.07, normalize_features: normalize }
    }

    #[test]
    fn single_positive_key_gives_zero_loss() {
        let out = nt_xent_loss(&[1.0, 0.0, 0.3, 0.9], 2, &[7, 7], &cfg(true)).unwrap();
        assert!(out.loss.abs() < 1e-12);
    }

    #[test]
    fn equal_similarity_keys_give_ln2() {
        // Three unit vectors at 120 degrees: every pairwise similarity is -1/2.
        let s = libm::sqrt(3.0) / 2.0;
        let feats = [1.0, 0.0, -0.5, s, -0.5, -s];
        let out = nt_xent_loss(&feats, 2, &[0, 0, 1], &cfg(true)).unwrap();
        assert!((out.loss - LN_2).abs() < 1e-12, "{}", out.loss);
    }

    #[test]
    fn separated_positive_matches_closed_form() {
        let feats = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let out = nt_xent_loss(&feats, 2, &[0, 0, 1], &cfg(true)).unwrap();
        let expected = libm::log1p(libm::exp(-1.0 / 0.07));
        assert!((out.loss - expected).abs() < 1e-12, "{} vs {expected}", out.loss);
        assert!((expected - 6.2e-7).abs() < 0.1e-7);
    }

    #[test]
    fn no_positive_means_zero_term() {
        let out = nt_xent_loss(&[1.0, 0.0, 0.0, 1.0], 2, &[1, 2], &cfg(true)).unwrap();
        assert!(out.degenerate());
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_is_shift_invariant_and_nonnegative() {
        // Unnormalized features: adding a shared orthogonal component adds a
        // constant to every similarity of the anchor rows it touches.
        let feats = [0.3, 0.1, 0.0, -0.2, 0.4, 0.0, 0.5, -0.1, 0.0];
        let ids = [0, 0, 1];
        let base = nt_xent_loss(&feats, 3, &ids, &cfg(false)).unwrap();
        let mut shifted = feats;
        for row in shifted.chunks_mut(3) {
            row[2] = 0.6;
        }
        let moved = nt_xent_loss(&shifted, 3, &ids, &cfg(false)).unwrap();
        assert!((base.loss - moved.loss).abs() < 1e-12);
        assert!(base.loss >= 0.0);
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let feats: Vec<f64> = (0..5 * 3).map(|i| libm::sin(i as f64 * 1.7) * 0.8).collect();
        let ids = [0, 1, 0, 1, 2];
        for normalize in [true, false] {
            let c = LossConfig { temperature: 0.5, ..cfg(normalize) };
            let out = nt_xent_loss(&feats, 3, &ids, &c).unwrap();
            for i in 0..feats.len() {
                let h = 1e-6;
                let mut p = feats.clone();
                p[i] += h;
                let up = nt_xent_loss(&p, 3, &ids, &c).unwrap().loss;
                p[i] -= 2.0 * h;
                let down = nt_xent_loss(&p, 3, &ids, &c).unwrap().loss;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - out.grad[i]).abs() < 1e-7, "{i}: {fd} vs {}", out.grad[i]);
            }
        }
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.0, true).loss - LN_2).abs() < 1e-12);
        assert_eq!(bce_loss(0.0, true).grad_logit, -0.5);
        let expected = libm::log1p(libm::exp(2.0));
        assert!((bce_loss(2.0, false).loss - expected).abs() < 1e-12);
        assert!((expected - 2.126928).abs() < 1e-6);
        // Limit behaviour: loss decreases monotonically towards 0.
        let mut last = f64::INFINITY;
        for l in [0.0, 2.0, 10.0, 50.0, 800.0] {
            let v = bce_loss(l, true).loss;
            assert!(v < last && v >= 0.0);
            last = v;
        }
        assert_eq!(bce_loss(800.0, true).loss, 0.0);
        assert!(bce_loss(-800.0, true).loss.is_finite());
    }

    #[test]
    fn bce_is_convex_in_logit() {
        for y in [false, true] {
            for i in -40..40 {
                let l = i as f64 * 0.25;
                let h = 1e-3;
                let second = bce_loss(l + h, y).loss - 2.0 * bce_loss(l, y).loss + bce_loss(l - h, y).loss;
                assert!(second > 0.0, "logit {l}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { alpha: 1.2, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { temperature: 0.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }
}
