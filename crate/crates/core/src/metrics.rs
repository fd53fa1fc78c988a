//! Evaluation metrics, threshold calibration and robustness curves.
//!
//! Tie rule everywhere: a pair is classified positive when `score >= t`, and
//! thresholds are drawn from the observed scores plus `+inf`.

use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_augmentation, AugmentationKind, AugmentationSpec};
use crate::error::{config_err, input_err, Error, Result};
use crate::rng::{self, tag};
use crate::world::ImageSample;

pub mod baselines;

/// Pair scores with ground-truth labels; higher scores mean "same identity".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredPairs {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredPairs {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(input_err!("{} scores but {} labels", scores.len(), labels.len()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(input_err!("scores contain NaN"));
        }
        Ok(ScoredPairs { scores, labels })
    }

    pub fn from_groups(positives: &[f64], negatives: &[f64]) -> Self {
        let mut scores = positives.to_vec();
        scores.extend_from_slice(negatives);
        let mut labels = alloc::vec![true; positives.len()];
        labels.resize(scores.len(), false);
        ScoredPairs { scores, labels }
    }

    pub fn push(&mut self, score: f64, label: bool) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn positives(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores.iter().zip(&self.labels).filter(|p| *p.1).map(|p| *p.0)
    }

    pub fn negatives(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores.iter().zip(&self.labels).filter(|p| !*p.1).map(|p| *p.0)
    }

    fn counts(&self) -> (usize, usize) {
        let p = self.labels.iter().filter(|&&l| l).count();
        (p, self.labels.len() - p)
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let (p, n) = self.counts();
        if p == 0 || n == 0 {
            return Err(Error::UndefinedMetric(alloc::format!("need both classes, got {p} positives and {n} negatives")));
        }
        Ok((p, n))
    }

    /// Fraction of positives with `score >= t`.
    pub fn recall_at(&self, t: f64) -> f64 {
        let (p, _) = self.counts();
        self.positives().filter(|&s| s >= t).count() as f64 / p as f64
    }

    /// Fraction of negatives with `score < t`.
    pub fn specificity_at(&self, t: f64) -> f64 {
        let (_, n) = self.counts();
        self.negatives().filter(|&s| s < t).count() as f64 / n as f64
    }

    /// `TP / (TP + FP)` at `t`; 1.0 when nothing is classified positive.
    pub fn precision_at(&self, t: f64) -> f64 {
        let tp = self.positives().filter(|&s| s >= t).count();
        let fp = self.negatives().filter(|&s| s >= t).count();
        if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        }
    }
}

/// Area under the ROC curve: `P(pos > neg) + P(pos == neg) / 2`, computed
/// from mid-ranks in `O(n log n)`.
pub fn roc_auc(sp: &ScoredPairs) -> Result<f64> {
    let (p, n) = sp.require_both_classes()?;
    let mut order: Vec<usize> = (0..sp.scores.len()).collect();
    order.sort_by(|&a, &b| sp.scores[a].total_cmp(&sp.scores[b]));
    // Sum of positive ranks (1-based), ties receive the mean rank of their run.
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && sp.scores[order[j + 1]] == sp.scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j + 2) as f64 / 2.0;
        let run_pos = order[i..=j].iter().filter(|&&k| sp.labels[k]).count();
        rank_sum += mid_rank * run_pos as f64;
        i = j + 1;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// Smallest count `k` of positives with `k / p >= target`.
fn required_positives(target: f64, p: usize) -> Result<usize> {
    if !(target > 0.0) {
        return Err(config_err!("target rate must be positive, got {target}"));
    }
    if target > 1.0 {
        return Err(Error::Impossible(alloc::format!("target rate {target} exceeds 1")));
    }
    Ok((1..=p).find(|&k| k as f64 / p as f64 >= target).unwrap_or(p))
}

/// Largest threshold whose recall reaches `target`.
fn recall_threshold(sp: &ScoredPairs, target: f64) -> Result<f64> {
    let (p, _) = sp.require_both_classes()?;
    let k = required_positives(target, p)?;
    let mut pos: Vec<f64> = sp.positives().collect();
    pos.sort_by(|a, b| b.total_cmp(a));
    Ok(pos[k - 1])
}

/// `(precision, threshold)` at the largest threshold with recall `>= target`.
pub fn precision_at_recall(sp: &ScoredPairs, target: f64) -> Result<(f64, f64)> {
    let t = recall_threshold(sp, target)?;
    Ok((sp.precision_at(t), t))
}

/// `(specificity, threshold)` at the largest threshold with sensitivity `>= target`.
pub fn specificity_at_sensitivity(sp: &ScoredPairs, target: f64) -> Result<(f64, f64)> {
    let t = recall_threshold(sp, target)?;
    Ok((sp.specificity_at(t), t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", content = "value", rename_all = "snake_case")]
pub enum CalibrationTarget {
    Recall(f64),
    Specificity(f64),
    Sensitivity(f64),
}

impl CalibrationTarget {
    pub fn value(self) -> f64 {
        match self {
            CalibrationTarget::Recall(v) | CalibrationTarget::Specificity(v) | CalibrationTarget::Sensitivity(v) => v,
        }
    }
}

/// A frozen decision threshold and the operating point it reached on the
/// calibration split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub threshold: f64,
    pub target: CalibrationTarget,
    pub achieved: f64,
    /// The calibration scores took a single value.
    pub degenerate: bool,
}

impl CalibrationResult {
    /// The fixed 0.5 probability threshold of a classifier trained on balanced pairs.
    pub fn probability_half() -> Self {
        CalibrationResult { threshold: 0.5, target: CalibrationTarget::Recall(f64::NAN), achieved: f64::NAN, degenerate: false }
    }
}

/// Picks a threshold on validation scores.
///
/// Recall and sensitivity targets take the largest threshold that reaches the
/// target; specificity targets take the smallest one (keeping recall as high
/// as possible).
pub fn calibrate(sp: &ScoredPairs, target: CalibrationTarget) -> Result<CalibrationResult> {
    let (_, n) = sp.require_both_classes()?;
    let degenerate = sp.scores.iter().all(|&s| s == sp.scores[0]);
    if degenerate {
        log::warn!("calibration scores are all equal to {}", sp.scores[0]);
    }
    let (threshold, achieved) = match target {
        CalibrationTarget::Recall(r) | CalibrationTarget::Sensitivity(r) => {
            let t = recall_threshold(sp, r)?;
            (t, sp.recall_at(t))
        }
        CalibrationTarget::Specificity(s) => {
            if !(s > 0.0) {
                return Err(config_err!("specificity target must be positive, got {s}"));
            }
            if s > 1.0 {
                return Err(Error::Impossible(alloc::format!("specificity target {s} exceeds 1")));
            }
            let m = (1..=n).find(|&m| m as f64 / n as f64 >= s).unwrap_or(n);
            let mut neg: Vec<f64> = sp.negatives().collect();
            neg.sort_by(|a, b| a.total_cmp(b));
            let floor = neg[m - 1];
            let t = sp.scores.iter().copied().filter(|&v| v > floor).fold(f64::INFINITY, f64::min);
            (t, sp.specificity_at(t))
        }
    };
    Ok(CalibrationResult { threshold, target, achieved, degenerate })
}

/// Re-identification evaluation pairs over `images`: every within-identity
/// pairing `(i, j)` with `i < j`, each followed by one negative pairing `i`
/// with a uniformly drawn image of a different identity from the same
/// dataset. Returns `(left, right, same_identity)` index triples.
pub fn reid_eval_pairs(images: &[ImageSample], seed: u64) -> Vec<(usize, usize, bool)> {
    let mut rng = rng::stream(seed, tag::EVAL_NEGATIVES);
    let mut pairs = Vec::new();
    for i in 0..images.len() {
        let Some(id) = images[i].identity else { continue };
        for j in i + 1..images.len() {
            if images[j].identity != Some(id) {
                continue;
            }
            pairs.push((i, j, true));
            let ds = images[i].dataset_id;
            let candidates: Vec<usize> = (0..images.len())
                .filter(|&k| images[k].dataset_id == ds && images[k].identity.is_some_and(|o| o != id))
                .collect();
            if !candidates.is_empty() {
                pairs.push((i, candidates[rng.gen_range(0..candidates.len())], false));
            }
        }
    }
    pairs
}

/// Something that scores image pairs: an embedding step followed by a
/// pairwise comparison (higher means more similar).
pub trait PairScorer {
    type Embedding;

    fn embed(&self, x: &ImageSample) -> Result<Self::Embedding>;

    fn compare(&self, a: &Self::Embedding, b: &Self::Embedding) -> f64;

    fn score(&self, a: &ImageSample, b: &ImageSample) -> Result<f64> {
        Ok(self.compare(&self.embed(a)?, &self.embed(b)?))
    }
}

/// Scores every re-ID evaluation pair.
pub fn score_reid<S: PairScorer>(scorer: &S, images: &[ImageSample], seed: u64) -> Result<ScoredPairs> {
    let emb = images.iter().map(|x| scorer.embed(x)).collect::<Result<Vec<_>>>()?;
    let mut sp = ScoredPairs::default();
    for (i, j, same) in reid_eval_pairs(images, seed) {
        sp.push(scorer.compare(&emb[i], &emb[j]), same);
    }
    Ok(sp)
}

/// One `{kind, strengths}` entry of an augmentation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub kind: AugmentationKind,
    pub strengths: Vec<f64>,
}

pub fn validate_sweep(sweep: &[SweepEntry]) -> Result<()> {
    if sweep.is_empty() || sweep.iter().any(|e| e.strengths.is_empty()) {
        return Err(config_err!("augmentation sweep is empty"));
    }
    for e in sweep {
        for &s in &e.strengths {
            AugmentationSpec { kind: e.kind, strength: s }.validate()?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    /// `None` for the macro average over datasets.
    pub dataset: Option<u16>,
    pub kind: AugmentationKind,
    pub strength: f64,
    pub recall: f64,
    pub pairs: usize,
}

/// Per-dataset recall of `(x, augment(x))` pairs for one sweep cell.
/// Augmentation randomness is keyed by `(seed, kind, strength, image id)`.
pub fn robustness_cell<S: PairScorer>(
    scorer: &S,
    images: &[ImageSample],
    originals: &[S::Embedding],
    kind: AugmentationKind,
    strength: f64,
    threshold: f64,
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    let spec = AugmentationSpec { kind, strength };
    spec.validate()?;
    let cell_seed = seed ^ ((kind as u64) << 56) ^ strength.to_bits().rotate_left(13);
    let mut per_dataset: Vec<(u16, usize, usize)> = Vec::new();
    for (x, e) in images.iter().zip(originals) {
        let mut r = rng::indexed_stream(cell_seed, tag::SWEEP, x.id);
        let aug = apply_augmentation(x, &spec, &mut r)?;
        let hit = scorer.compare(e, &scorer.embed(&aug)?) >= threshold;
        match per_dataset.iter_mut().find(|d| d.0 == x.dataset_id) {
            Some(d) => {
                d.1 += hit as usize;
                d.2 += 1;
            }
            None => per_dataset.push((x.dataset_id, hit as usize, 1)),
        }
    }
    per_dataset.sort_by_key(|d| d.0);
    let mut rows: Vec<RobustnessRow> = per_dataset
        .iter()
        .map(|&(ds, hits, n)| RobustnessRow { dataset: Some(ds), kind, strength, recall: hits as f64 / n as f64, pairs: n })
        .collect();
    let macro_recall = macro_average(&rows.iter().map(|r| r.recall).collect::<Vec<_>>());
    rows.push(RobustnessRow { dataset: None, kind, strength, recall: macro_recall, pairs: images.len() });
    Ok(rows)
}

/// Recall table over a full sweep, cells in sweep order.
pub fn robustness_curve<S: PairScorer>(
    scorer: &S,
    images: &[ImageSample],
    sweep: &[SweepEntry],
    calibration: &CalibrationResult,
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    validate_sweep(sweep)?;
    if images.is_empty() {
        return Err(config_err!("robustness curve needs at least one test image"));
    }
    let originals = images.iter().map(|x| scorer.embed(x)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for entry in sweep {
        for &s in &entry.strengths {
            rows.extend(robustness_cell(scorer, images, &originals, entry.kind, s, calibration.threshold, seed)?);
        }
    }
    Ok(rows)
}

/// Unweighted mean over per-dataset values.
pub fn macro_average(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}
