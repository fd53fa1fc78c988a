//! Pair sampling, Adam, and the two-stage training schedule.

use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_augmentation, AugmentationKind, AugmentationSpec, STAGE2_KINDS};
use crate::detector::Detector;
use crate::error::{config_err, input_err, Error, Result};
use crate::losses::{combined_loss, LossConfig, PairBatch};
use crate::metrics::{calibrate, robustness_cell, roc_auc, score_reid, CalibrationTarget, PairScorer};
use crate::model::{ModelDims, ModelParams};
use crate::rng::{self, tag, Rng};
use crate::world::{
    Corpus, ImageSample, LatentNormalizer, LatentSample, Split, ToyAutoencoder, LIGHT_KINDS,
};

/// Upper strength of the light augmentations forming unsupervised positives.
pub const LIGHT_STRENGTH: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Pairs drawn per epoch; defaults to the number of training images.
    #[serde(default)]
    pub pairs_per_epoch: Option<usize>,
}

impl StageConfig {
    pub fn stage1() -> Self {
        StageConfig { max_epochs: 100, patience: 10, batch_size: 512, learning_rate: 5e-4, pairs_per_epoch: None }
    }

    pub fn stage2() -> Self {
        StageConfig { max_epochs: 20, patience: 5, batch_size: 64, learning_rate: 8e-5, pairs_per_epoch: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch size must be positive"));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return Err(config_err!("patience must be in 1..=max_epochs, got {}", self.patience));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(config_err!("learning rate must be finite and >= 0"));
        }
        if self.pairs_per_epoch == Some(0) {
            return Err(config_err!("pairs_per_epoch must be positive"));
        }
        Ok(())
    }

    fn batches_per_epoch(&self, train_images: usize) -> usize {
        self.pairs_per_epoch.unwrap_or(train_images).div_ceil(self.batch_size).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    #[default]
    Supervised,
    Unsupervised,
}

fn default_stage1() -> StageConfig {
    StageConfig::stage1()
}

fn default_stage2() -> StageConfig {
    StageConfig::stage2()
}

fn default_max_strength() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_stage1")]
    pub stage1: StageConfig,
    #[serde(default = "default_stage2")]
    pub stage2: StageConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub model: ModelDims,
    #[serde(default)]
    pub pair_mode: PairMode,
    /// Upper bound of the per-side stage-2 augmentation strength.
    #[serde(default = "default_max_strength")]
    pub stage2_max_strength: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
            model: ModelDims::default(),
            pair_mode: PairMode::Supervised,
            stage2_max_strength: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.loss.validate()?;
        self.model.validate()?;
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return Err(config_err!("Adam needs beta1, beta2 in [0, 1) and epsilon > 0"));
        }
        if !(0.0..=1.0).contains(&self.stage2_max_strength) {
            return Err(config_err!("stage2_max_strength must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Adam over every tensor of a [`ModelParams`], in `for_each_tensor_mut` order.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ModelParams) -> Self {
        let n = params.param_count();
        Adam { config, m: alloc::vec![0.0; n], v: alloc::vec![0.0; n], step: 0 }
    }

    pub fn step(&mut self, params: &mut ModelParams, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - libm::pow(beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(beta2, self.step as f64);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut offset = 0;
        params.for_each_tensor_mut(|w, g| {
            let m = &mut m[offset..offset + w.len()];
            let v = &mut v[offset..offset + w.len()];
            for i in 0..w.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                w[i] -= lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + epsilon);
            }
            offset += w.len();
        });
    }
}

/// Normalized latents of every split, plus the codec and normalizer that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCorpus {
    pub autoencoder: ToyAutoencoder,
    pub normalizer: LatentNormalizer,
    pub train: Vec<LatentSample>,
    pub val: Vec<LatentSample>,
    pub test: Vec<LatentSample>,
}

impl LatentCorpus {
    /// Encodes every image once; the normalizer is fitted on the training split.
    pub fn prepare(corpus: &Corpus, autoencoder: ToyAutoencoder) -> Result<Self> {
        let encode = |xs: &[ImageSample]| xs.iter().map(|x| autoencoder.encode(x)).collect::<Result<Vec<_>>>();
        let raw_train = encode(&corpus.train)?;
        let normalizer = LatentNormalizer::fit(&raw_train)?;
        let norm = |zs: Vec<LatentSample>| zs.iter().map(|z| normalizer.apply(z)).collect::<Result<Vec<_>>>();
        let train = norm(raw_train)?;
        let val = norm(encode(&corpus.val)?)?;
        let test = norm(encode(&corpus.test)?)?;
        Ok(LatentCorpus { autoencoder, normalizer, train, val, test })
    }

    pub fn split(&self, split: Split) -> &[LatentSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn detector<'a>(&'a self, params: &'a ModelParams) -> Result<Detector<'a>> {
        Detector::new(&self.autoencoder, &self.normalizer, params)
    }
}

/// One planned pair: indices into a split and the same-identity label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairPlan {
    pub left: usize,
    pub right: usize,
    pub label: bool,
}

/// Per-dataset index of a split, grouped by identity (or by image in
/// unsupervised mode).
#[derive(Debug, Clone)]
pub struct PairSampler {
    mode: PairMode,
    /// `datasets[d][g]` holds the image indices of group `g`.
    datasets: Vec<Vec<Vec<usize>>>,
    /// Datasets having at least one group with two images.
    positive_datasets: Vec<usize>,
}

impl PairSampler {
    pub fn new(images: &[ImageSample], mode: PairMode) -> Result<Self> {
        let mut ids: Vec<u16> = images.iter().map(|x| x.dataset_id).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut datasets: Vec<Vec<Vec<usize>>> = alloc::vec![Vec::new(); ids.len()];
        let mut keys: Vec<Vec<u64>> = alloc::vec![Vec::new(); ids.len()];
        for (i, x) in images.iter().enumerate() {
            let d = ids.binary_search(&x.dataset_id).unwrap();
            let key = match mode {
                PairMode::Supervised => {
                    x.identity.ok_or_else(|| config_err!("supervised pairs need identity labels (image {})", x.id))?
                }
                PairMode::Unsupervised => x.id,
            };
            match keys[d].iter().position(|&k| k == key) {
                Some(g) => datasets[d][g].push(i),
                None => {
                    keys[d].push(key);
                    datasets[d].push(alloc::vec![i]);
                }
            }
        }
        let positive_datasets: Vec<usize> = match mode {
            PairMode::Supervised => (0..datasets.len()).filter(|&d| datasets[d].iter().any(|g| g.len() >= 2)).collect(),
            PairMode::Unsupervised => (0..datasets.len()).collect(),
        };
        if positive_datasets.is_empty() {
            return Err(config_err!("no identity has at least two images"));
        }
        if datasets.iter().map(Vec::len).sum::<usize>() < 2 {
            return Err(config_err!("negative pairs need at least two identities"));
        }
        Ok(PairSampler { mode, datasets, positive_datasets })
    }

    pub fn mode(&self) -> PairMode {
        self.mode
    }

    /// `batch / 2` positives followed by the remaining negatives. Datasets
    /// are chosen uniformly, then a group uniformly within the dataset.
    pub fn plan(&self, batch: usize, rng: &mut Rng) -> Vec<PairPlan> {
        let n_pos = batch / 2;
        let mut plans = Vec::with_capacity(batch);
        for _ in 0..n_pos {
            let d = self.positive_datasets[rng.gen_range(0..self.positive_datasets.len())];
            plans.push(match self.mode {
                PairMode::Supervised => {
                    let groups: Vec<&Vec<usize>> = self.datasets[d].iter().filter(|g| g.len() >= 2).collect();
                    let g = groups[rng.gen_range(0..groups.len())];
                    let a = rng.gen_range(0..g.len());
                    let mut b = rng.gen_range(0..g.len() - 1);
                    if b >= a {
                        b += 1;
                    }
                    PairPlan { left: g[a], right: g[b], label: true }
                }
                PairMode::Unsupervised => {
                    let g = &self.datasets[d][rng.gen_range(0..self.datasets[d].len())];
                    let i = g[rng.gen_range(0..g.len())];
                    PairPlan { left: i, right: i, label: true }
                }
            });
        }
        for _ in n_pos..batch {
            let (ld, lg) = self.random_group(rng);
            let left = self.pick(ld, lg, rng);
            let right = loop {
                let (rd, rg) = self.random_group(rng);
                if (rd, rg) != (ld, lg) {
                    break self.pick(rd, rg, rng);
                }
            };
            plans.push(PairPlan { left, right, label: false });
        }
        plans
    }

    fn random_group(&self, rng: &mut Rng) -> (usize, usize) {
        loop {
            let d = rng.gen_range(0..self.datasets.len());
            if !self.datasets[d].is_empty() {
                return (d, rng.gen_range(0..self.datasets[d].len()));
            }
        }
    }

    fn pick(&self, d: usize, g: usize, rng: &mut Rng) -> usize {
        let group = &self.datasets[d][g];
        group[rng.gen_range(0..group.len())]
    }
}

/// How pair sides are perturbed when a plan is turned into latents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SideAugment {
    /// Precomputed clean latents.
    None,
    /// Every side gets one kind from the stage-2 set at strength
    /// `U[0, max_strength]`; a zero strength leaves the side untouched.
    Stage2 { max_strength: f64 },
}

/// Images and latents of one split, as seen by the pair materializer.
#[derive(Debug, Clone, Copy)]
pub struct SplitView<'a> {
    pub images: &'a [ImageSample],
    pub latents: &'a [LatentSample],
    pub autoencoder: &'a ToyAutoencoder,
    pub normalizer: &'a LatentNormalizer,
}

impl<'a> SplitView<'a> {
    pub fn new(corpus: &'a Corpus, latents: &'a LatentCorpus, split: Split) -> Self {
        SplitView {
            images: corpus.split(split),
            latents: latents.split(split),
            autoencoder: &latents.autoencoder,
            normalizer: &latents.normalizer,
        }
    }

    fn reencode(&self, x: &ImageSample) -> Result<Vec<f64>> {
        Ok(self.normalizer.apply(&self.autoencoder.encode(x)?)?.values)
    }

    fn side(&self, index: usize, spec: Option<AugmentationSpec>, rng: &mut Rng) -> Result<Vec<f64>> {
        match spec {
            Some(spec) if spec.strength > 0.0 => self.reencode(&apply_augmentation(&self.images[index], &spec, rng)?),
            _ => Ok(self.latents[index].values.clone()),
        }
    }
}

/// Turns pair plans into a latent batch. Unsupervised positives get a light
/// augmentation on the right side; `augment` then applies to every side.
pub fn materialize(
    view: &SplitView<'_>,
    plans: &[PairPlan],
    mode: PairMode,
    augment: SideAugment,
    rng: &mut Rng,
) -> Result<PairBatch> {
    if view.images.len() != view.latents.len() {
        return Err(input_err!("split has {} images but {} latents", view.images.len(), view.latents.len()));
    }
    let width = view.latents.first().map_or(0, |z| z.values.len());
    let mut batch = PairBatch::with_width(width);
    let stage2 = |rng: &mut Rng| match augment {
        SideAugment::None => None,
        SideAugment::Stage2 { max_strength } => {
            let kind = STAGE2_KINDS[rng.gen_range(0..STAGE2_KINDS.len())];
            let strength = rng.gen::<f64>() * max_strength;
            Some(AugmentationSpec { kind, strength })
        }
    };
    for p in plans {
        let (li, ri) = (&view.images[p.left], &view.images[p.right]);
        let left = view.side(p.left, stage2(rng), rng)?;
        let right = if mode == PairMode::Unsupervised && p.label {
            let kind = LIGHT_KINDS[rng.gen_range(0..LIGHT_KINDS.len())];
            let light = apply_augmentation(ri, &AugmentationSpec { kind, strength: rng.gen::<f64>() * LIGHT_STRENGTH }, rng)?;
            let light = match stage2(rng) {
                Some(spec) if spec.strength > 0.0 => apply_augmentation(&light, &spec, rng)?,
                _ => light,
            };
            view.reencode(&light)?
        } else {
            view.side(p.right, stage2(rng), rng)?
        };
        let key = |x: &ImageSample| match mode {
            PairMode::Supervised => x.identity.unwrap_or(u64::MAX),
            PairMode::Unsupervised => x.id,
        };
        batch.left.extend_from_slice(&left);
        batch.right.extend_from_slice(&right);
        batch.labels.push(p.label);
        batch.left_identity.push(key(li));
        batch.right_identity.push(key(ri));
        batch.left_dataset.push(li.dataset_id);
        batch.right_dataset.push(ri.dataset_id);
        batch.left_source.push(li.id);
        batch.right_source.push(ri.id);
    }
    Ok(batch)
}

/// Samples and materializes one clean batch.
pub fn sample_pairs(view: &SplitView<'_>, sampler: &PairSampler, batch: usize, rng: &mut Rng) -> Result<PairBatch> {
    let plans = sampler.plan(batch, rng);
    materialize(view, &plans, sampler.mode(), SideAugment::None, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

/// The metric used for early stopping and checkpoint selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMetric {
    /// Re-identification ROC-AUC on the validation split.
    ReidAuc,
    /// Recall of `(x, noise(x))` at the strongest noise strength, with the
    /// threshold calibrated to 50% specificity on validation re-ID pairs.
    NoiseRecall,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_auc: f64,
    pub validation_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub metric: ValidationMetric,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopping_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: AdamConfig,
    /// Filled in by callers that own a clock.
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

/// Validation-split measurements of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub auc: f64,
    pub noise_recall: f64,
}

/// Validation AUC, and when requested the strongest-noise copy recall.
pub fn validate(detector: &Detector<'_>, val: &[ImageSample], seed: u64, noise_recall: bool) -> Result<Validation> {
    let sp = score_reid(detector, val, seed)?;
    let auc = roc_auc(&sp)?;
    let noise_recall = if noise_recall {
        let cal = calibrate(&sp, CalibrationTarget::Specificity(0.5))?;
        let originals = val.iter().map(|x| detector.embed(x)).collect::<Result<Vec<_>>>()?;
        let rows = robustness_cell(detector, val, &originals, AugmentationKind::AdditiveNoise, 1.0, cal.threshold, seed)?;
        rows.last().map_or(f64::NAN, |r| r.recall)
    } else {
        f64::NAN
    };
    Ok(Validation { auc, noise_recall })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stalled,
    Stop,
}

/// Stops after `patience` epochs without a strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Progress {
        match self.best {
            Some((_, b)) if !(value > b) => {
                let since = epoch - self.best.unwrap().0;
                if since >= self.patience {
                    Progress::Stop
                } else {
                    Progress::Stalled
                }
            }
            _ => {
                self.best = Some((epoch, value));
                Progress::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|b| b.0)
    }
}

/// Runs one stage from `params`, returning the best-validation checkpoint.
pub fn run_stage(
    mut params: ModelParams,
    corpus: &Corpus,
    latents: &LatentCorpus,
    config: &TrainConfig,
    stage: Stage,
    augment: SideAugment,
) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    let stage_cfg = match stage {
        Stage::Stage1 => config.stage1,
        Stage::Stage2 => config.stage2,
    };
    let metric = match stage {
        Stage::Stage1 => ValidationMetric::ReidAuc,
        Stage::Stage2 => ValidationMetric::NoiseRecall,
    };
    if corpus.val.is_empty() {
        return Err(config_err!("training needs a non-empty validation split"));
    }
    let view = SplitView::new(corpus, latents, Split::Train);
    let sampler = PairSampler::new(view.images, config.pair_mode)?;
    let stage_key = stage as u64 + 1;
    let mut pair_rng = rng::stream(config.seed ^ (stage_key << 48), tag::PAIRS);
    let mut aug_rng = rng::stream(config.seed ^ (stage_key << 48), tag::AUGMENT);
    let eval_seed = config.seed ^ 0x5EED_0000;
    let mut adam = Adam::new(config.optimizer, &params);
    let batches = stage_cfg.batches_per_epoch(view.images.len());

    let mut report = TrainReport {
        stage,
        metric,
        epochs: Vec::new(),
        best_epoch: 0,
        stopping_epoch: 0,
        batch_size: stage_cfg.batch_size,
        learning_rate: stage_cfg.learning_rate,
        optimizer: config.optimizer,
        wall_clock_seconds: 0.0,
    };
    let mut best: Option<ModelParams> = None;
    let mut stopper = EarlyStopping::new(stage_cfg.patience);
    let mut last_finite = f64::NAN;
    for epoch in 1..=stage_cfg.max_epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..batches {
            let plans = sampler.plan(stage_cfg.batch_size, &mut pair_rng);
            let batch = materialize(&view, &plans, config.pair_mode, augment, &mut aug_rng)?;
            params.zero_grad();
            let loss = combined_loss(&batch, &mut params, &config.loss)?.total;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, last_finite_loss: last_finite });
            }
            last_finite = loss;
            adam.step(&mut params, stage_cfg.learning_rate);
            epoch_loss += loss / batches as f64;
        }
        if !params.is_finite() {
            return Err(Error::Diverged { epoch, last_finite_loss: last_finite });
        }
        let v = validate(&latents.detector(&params)?, &corpus.val, eval_seed, metric == ValidationMetric::NoiseRecall)?;
        let value = match metric {
            ValidationMetric::ReidAuc => v.auc,
            ValidationMetric::NoiseRecall => v.noise_recall,
        };
        log::info!("{stage:?} epoch {epoch}: loss {epoch_loss:.5} val auc {:.4} metric {value:.4}", v.auc);
        report.epochs.push(EpochRecord { epoch, train_loss: epoch_loss, validation_auc: v.auc, validation_metric: value });
        report.stopping_epoch = epoch;
        match stopper.observe(epoch, value) {
            Progress::Improved => {
                let mut snapshot = params.clone();
                snapshot.zero_grad();
                best = Some(snapshot);
                report.best_epoch = epoch;
            }
            Progress::Stalled => {}
            Progress::Stop => break,
        }
    }
    Ok((best.expect("at least one epoch ran"), report))
}

/// Stage one: clean latent pairs from a fresh initialization.
pub fn train_stage1(corpus: &Corpus, latents: &LatentCorpus, config: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    let params = ModelParams::init(config.seed, config.model.clone())?;
    run_stage(params, corpus, latents, config, Stage::Stage1, SideAugment::None)
}

/// Stage two: strongly augmented pairs starting from a stage-one checkpoint.
pub fn train_stage2(
    params: ModelParams,
    corpus: &Corpus,
    latents: &LatentCorpus,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    if params.dims != config.model {
        return Err(config_err!("checkpoint dims {:?} differ from configured {:?}", params.dims, config.model));
    }
    let augment = SideAugment::Stage2 { max_strength: config.stage2_max_strength };
    run_stage(params, corpus, latents, config, Stage::Stage2, augment)
}
