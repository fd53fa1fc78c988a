//! Command bodies, callable without going through the command line.

use std::collections::BTreeMap;
use std::time::Instant;

use lcmem_core::atlas::{build_atlas, fingerprint_hex, Atlas, AuditReport, HeadKernel, ScoreOptions};
use lcmem_core::audit::{filter_loop, mem_rate_from_flags, MemRate, NOVELTY_THRESHOLD};
use lcmem_core::augment::AugmentationKind;
use lcmem_core::detector::Detector;
use lcmem_core::metrics::baselines::BaselineScorer;
use lcmem_core::metrics::{
    calibrate, macro_average, precision_at_recall, reid_eval_pairs, robustness_cell, roc_auc, specificity_at_sensitivity,
    CalibrationResult, CalibrationTarget, PairScorer, RobustnessRow, ScoredPairs, SweepEntry,
};
use lcmem_core::model::{ModelDims, ModelParams};
use lcmem_core::rng::{self, tag};
use lcmem_core::training::{train_stage1, train_stage2, LatentCorpus, TrainConfig, TrainReport};
use lcmem_core::world::{Corpus, ImageSample, MockGenerator, Split, ToyAutoencoder};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{BenchConfig, MemRateConfig, RunConfig};
use crate::error::{Error, Result};
use crate::io::{LoadedModel, SCHEMA_VERSION};
use crate::parallel;

/// Recall and sensitivity level of the headline operating points.
pub const HIGH_RECALL: f64 = 0.99;
/// Test images sampled for copy-detection sweeps.
pub const COPY_IMAGES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPlan {
    Stage1,
    /// Stage two from the given stage-one checkpoint.
    Stage2,
    Full,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub latents: LatentCorpus,
    pub stage1: Option<(ModelParams, TrainReport)>,
    pub stage2: Option<(ModelParams, TrainReport)>,
}

impl TrainOutcome {
    /// The last stage that ran.
    pub fn final_params(&self) -> &ModelParams {
        &self.stage2.as_ref().or(self.stage1.as_ref()).expect("a stage ran").0
    }

    pub fn model(&self, params: &ModelParams) -> LoadedModel {
        LoadedModel::new(params.clone(), self.latents.autoencoder.clone(), self.latents.normalizer.clone())
    }
}

pub fn prepare_latents(corpus: &Corpus, mixing_seed: u64) -> Result<LatentCorpus> {
    Ok(LatentCorpus::prepare(corpus, ToyAutoencoder::seeded(corpus.spec.shape, mixing_seed))?)
}

pub fn train(corpus: &Corpus, config: &TrainConfig, mixing_seed: u64, plan: TrainPlan, init: Option<ModelParams>) -> Result<TrainOutcome> {
    let latents = prepare_latents(corpus, mixing_seed)?;
    let mut out = TrainOutcome { latents, stage1: None, stage2: None };
    let start_params = match plan {
        TrainPlan::Stage1 | TrainPlan::Full => {
            let t = Instant::now();
            let (params, mut report) = train_stage1(corpus, &out.latents, config)?;
            report.wall_clock_seconds = t.elapsed().as_secs_f64();
            log::info!("stage 1: best epoch {} of {} in {:.1}s", report.best_epoch, report.stopping_epoch, report.wall_clock_seconds);
            out.stage1 = Some((params.clone(), report));
            params
        }
        TrainPlan::Stage2 => init.ok_or_else(|| Error::Config("stage 2 needs a stage-1 checkpoint".into()))?,
    };
    if plan != TrainPlan::Stage1 {
        let t = Instant::now();
        let (params, mut report) = train_stage2(start_params, corpus, &out.latents, config)?;
        report.wall_clock_seconds = t.elapsed().as_secs_f64();
        log::info!("stage 2: best epoch {} of {} in {:.1}s", report.best_epoch, report.stopping_epoch, report.wall_clock_seconds);
        out.stage2 = Some((params, report));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pairs: usize,
    pub positives: usize,
    pub auc: f64,
    pub precision_at_recall_99: f64,
    pub threshold_at_recall_99: f64,
    pub specificity_at_sensitivity_99: f64,
}

impl PairMetrics {
    pub fn of(sp: &ScoredPairs) -> Result<Self> {
        let (precision, threshold) = precision_at_recall(sp, HIGH_RECALL)?;
        let (specificity, _) = specificity_at_sensitivity(sp, HIGH_RECALL)?;
        Ok(PairMetrics {
            pairs: sp.scores.len(),
            positives: sp.positives().count(),
            auc: roc_auc(sp)?,
            precision_at_recall_99: precision,
            threshold_at_recall_99: threshold,
            specificity_at_sensitivity_99: specificity,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub dataset: u16,
    #[serde(flatten)]
    pub metrics: PairMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    #[serde(flatten)]
    pub metrics: PairMetrics,
    pub macro_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReidReport {
    pub schema_version: u32,
    pub split: Split,
    pub fingerprint: String,
    /// Pooled over every dataset's pairs.
    #[serde(flatten)]
    pub metrics: PairMetrics,
    pub macro_auc: f64,
    pub per_dataset: Vec<DatasetMetrics>,
    pub baselines: Vec<MethodMetrics>,
    /// Threshold fixed on validation pairs.
    pub calibration: CalibrationResult,
    /// Macro fraction of sampled test images whose unmodified copy scores at
    /// or above the calibrated threshold.
    pub clean_recall: f64,
    pub clean_recall_per_dataset: Vec<(u16, f64)>,
}

/// Scores re-ID evaluation pairs; also returns the dataset of each pair.
pub fn reid_scores<S: PairScorer>(scorer: &S, images: &[ImageSample], seed: u64) -> Result<(ScoredPairs, Vec<u16>)> {
    let emb = images.iter().map(|x| scorer.embed(x)).collect::<lcmem_core::Result<Vec<_>>>()?;
    let mut sp = ScoredPairs::default();
    let mut datasets = Vec::new();
    for (i, j, same) in reid_eval_pairs(images, seed) {
        sp.push(scorer.compare(&emb[i], &emb[j]), same);
        datasets.push(images[i].dataset_id);
    }
    Ok((sp, datasets))
}

fn per_dataset(sp: &ScoredPairs, datasets: &[u16]) -> Result<Vec<DatasetMetrics>> {
    let mut groups: BTreeMap<u16, ScoredPairs> = BTreeMap::new();
    for ((&s, &l), &d) in sp.scores.iter().zip(&sp.labels).zip(datasets) {
        groups.entry(d).or_default().push(s, l);
    }
    groups.into_iter().map(|(dataset, g)| Ok(DatasetMetrics { dataset, metrics: PairMetrics::of(&g)? })).collect()
}

/// Calibrates a threshold on validation re-ID pairs.
pub fn calibrate_on<S: PairScorer>(scorer: &S, val: &[ImageSample], target: CalibrationTarget, seed: u64) -> Result<CalibrationResult> {
    let (sp, _) = reid_scores(scorer, val, seed)?;
    Ok(calibrate(&sp, target)?)
}

/// Up to `count` images drawn without replacement, kept in corpus order.
pub fn copy_subset(images: &[ImageSample], count: usize, seed: u64) -> Vec<ImageSample> {
    if images.len() <= count {
        return images.to_vec();
    }
    let mut r = rng::stream(seed, tag::SWEEP);
    let mut idx = rand::seq::index::sample(&mut r, images.len(), count).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| images[i].clone()).collect()
}

/// Per-dataset and macro recall of identical copies at `threshold`.
pub fn clean_recall<S: PairScorer>(scorer: &S, images: &[ImageSample], threshold: f64) -> Result<(f64, Vec<(u16, f64)>)> {
    let mut tallies: BTreeMap<u16, (usize, usize)> = BTreeMap::new();
    for x in images {
        let e = scorer.embed(x)?;
        let hit = scorer.compare(&e, &e) >= threshold;
        let t = tallies.entry(x.dataset_id).or_default();
        t.0 += hit as usize;
        t.1 += 1;
    }
    let per: Vec<(u16, f64)> = tallies.into_iter().map(|(d, (h, n))| (d, h as f64 / n as f64)).collect();
    Ok((macro_average(&per.iter().map(|p| p.1).collect::<Vec<_>>()), per))
}

pub fn eval_reid(model: &LoadedModel, corpus: &Corpus, cfg: &RunConfig, threads: usize) -> Result<ReidReport> {
    let detector = model.detector()?;
    let images = corpus.split(cfg.eval.split);
    let seed = cfg.seed;
    let (sp, datasets) = reid_scores(&detector, images, seed)?;
    let per = per_dataset(&sp, &datasets)?;
    let baselines = parallel::map(&cfg.eval.baselines, threads, |&kind| -> Result<MethodMetrics> {
        let (bsp, bdatasets) = reid_scores(&BaselineScorer(kind), images, seed)?;
        let bper = per_dataset(&bsp, &bdatasets)?;
        Ok(MethodMetrics {
            method: kind.name().to_string(),
            metrics: PairMetrics::of(&bsp)?,
            macro_auc: macro_average(&bper.iter().map(|d| d.metrics.auc).collect::<Vec<_>>()),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let calibration = calibrate_on(&detector, &corpus.val, cfg.eval.calibration, seed)?;
    let subset = copy_subset(images, COPY_IMAGES, seed);
    let (clean, clean_per) = clean_recall(&detector, &subset, calibration.threshold)?;
    Ok(ReidReport {
        schema_version: SCHEMA_VERSION,
        split: cfg.eval.split,
        fingerprint: fingerprint_hex(&model.fingerprint),
        metrics: PairMetrics::of(&sp)?,
        macro_auc: macro_average(&per.iter().map(|d| d.metrics.auc).collect::<Vec<_>>()),
        per_dataset: per,
        baselines,
        calibration,
        clean_recall: clean,
        clean_recall_per_dataset: clean_per,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCurve {
    pub method: String,
    pub calibration: CalibrationResult,
    pub rows: Vec<RobustnessRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyReport {
    pub schema_version: u32,
    pub split: Split,
    pub images: usize,
    pub sweep: Vec<SweepEntry>,
    pub detector: MethodCurve,
    pub baselines: Vec<MethodCurve>,
}

/// Robustness table with one parallel task per `(kind, strength)` cell.
pub fn robustness_table<S>(
    scorer: &S,
    images: &[ImageSample],
    sweep: &[SweepEntry],
    threshold: f64,
    seed: u64,
    threads: usize,
) -> Result<Vec<RobustnessRow>>
where
    S: PairScorer + Sync,
    S::Embedding: Sync,
{
    lcmem_core::metrics::validate_sweep(sweep)?;
    let originals = images.iter().map(|x| scorer.embed(x)).collect::<lcmem_core::Result<Vec<_>>>()?;
    let cells: Vec<(AugmentationKind, f64)> = sweep.iter().flat_map(|e| e.strengths.iter().map(move |&s| (e.kind, s))).collect();
    let tables = parallel::map(&cells, threads, |&(kind, strength)| {
        robustness_cell(scorer, images, &originals, kind, strength, threshold, seed)
    });
    let mut rows = Vec::new();
    for t in tables {
        rows.extend(t?);
    }
    Ok(rows)
}

pub fn eval_copy(model: &LoadedModel, corpus: &Corpus, cfg: &RunConfig, sweep: &[SweepEntry], threads: usize) -> Result<CopyReport> {
    let detector = model.detector()?;
    let seed = cfg.seed;
    let subset = copy_subset(corpus.split(cfg.eval.split), COPY_IMAGES, seed);
    let calibration = calibrate_on(&detector, &corpus.val, cfg.eval.calibration, seed)?;
    let rows = robustness_table(&detector, &subset, sweep, calibration.threshold, seed, threads)?;
    let mut baselines = Vec::new();
    for &kind in &cfg.eval.baselines {
        let scorer = BaselineScorer(kind);
        let calibration = calibrate_on(&scorer, &corpus.val, cfg.eval.calibration, seed)?;
        let rows = robustness_table(&scorer, &subset, sweep, calibration.threshold, seed, threads)?;
        baselines.push(MethodCurve { method: kind.name().to_string(), calibration, rows });
    }
    Ok(CopyReport {
        schema_version: SCHEMA_VERSION,
        split: cfg.eval.split,
        images: subset.len(),
        sweep: sweep.to_vec(),
        detector: MethodCurve { method: "detector".into(), calibration, rows },
        baselines,
    })
}

/// Holds out one image from each of `count` randomly chosen identities that
/// have at least two images. Returns `(rest, held_out)`.
pub fn holdout_queries(images: &[ImageSample], count: usize, seed: u64) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    if count == 0 {
        return Ok((images.to_vec(), Vec::new()));
    }
    let mut groups: BTreeMap<(u16, u64), Vec<usize>> = BTreeMap::new();
    for (i, x) in images.iter().enumerate() {
        if let Some(identity) = x.identity {
            groups.entry((x.dataset_id, identity)).or_default().push(i);
        }
    }
    let mut eligible: Vec<&Vec<usize>> = groups.values().filter(|g| g.len() >= 2).collect();
    if eligible.len() < count {
        return Err(Error::Config(format!("only {} identities have two or more images; {count} queries requested", eligible.len())));
    }
    let mut r = rng::stream(seed, tag::HOLDOUT);
    eligible.shuffle(&mut r);
    let mut held = vec![false; images.len()];
    let mut queries = Vec::with_capacity(count);
    for g in &eligible[..count] {
        let i = g[r.gen_range(0..g.len())];
        held[i] = true;
        queries.push(images[i].clone());
    }
    let rest = images.iter().zip(&held).filter(|(_, &h)| !h).map(|(x, _)| x.clone()).collect();
    Ok((rest, queries))
}

/// Atlas rows for the kept images and query rows for the held-out ones.
pub fn build_atlas_pair(detector: &Detector<'_>, images: &[ImageSample], holdout: usize, seed: u64) -> Result<(Atlas, Option<Atlas>)> {
    let (rest, queries) = holdout_queries(images, holdout, seed)?;
    let atlas = build_atlas(detector, &rest)?;
    let queries = if queries.is_empty() { None } else { Some(build_atlas(detector, &queries)?) };
    Ok((atlas, queries))
}

/// One-vs-all audit with the threshold optionally recalibrated on `val`.
pub fn audit_one_vs_all(
    model: &LoadedModel,
    atlas: &Atlas,
    queries: &Atlas,
    options: ScoreOptions,
    calibration: Option<(CalibrationTarget, &[ImageSample], u64)>,
    threads: usize,
) -> Result<(AuditReport, CalibrationResult)> {
    let mut options = options;
    let cal = match calibration {
        Some((target, val, seed)) => calibrate_on(&model.detector()?, val, target, seed)?,
        None => CalibrationResult { threshold: options.threshold, ..CalibrationResult::probability_half() },
    };
    options.threshold = cal.threshold;
    let kernel = HeadKernel::new(&model.params);
    let report = parallel::score_one_vs_all(&kernel, atlas, queries, &options, threads)?;
    Ok((report, cal))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRates {
    /// Flag rate on memorized copies.
    pub tpr: f64,
    /// Flag rate on different-identity samples.
    pub fpr: f64,
    pub samples_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemRateReport {
    pub schema_version: u32,
    pub p_mem: f64,
    pub trials: usize,
    /// Ground-truth memorized share of the unfiltered draws.
    pub true_memorized_fraction: f64,
    /// Measured before filtering.
    pub mem_rate: MemRate,
    pub confusion: ConfusionRates,
    /// `p_mem * tpr + (1 - p_mem) * fpr`.
    pub expected_mem_rate: f64,
    pub filter: FilterSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub max_attempts: usize,
    pub accepted: usize,
    pub unresolved: usize,
    pub memorized_among_accepted: usize,
    pub memorized_fraction_among_accepted: f64,
    pub mean_attempts: f64,
}

fn mock_flag(detector: &Detector<'_>, generated: &ImageSample, real: &ImageSample) -> Result<bool> {
    Ok(detector.score(generated, real)? > NOVELTY_THRESHOLD)
}

/// Mock-generator MemRate, its closed-form expectation and the filter loop.
pub fn audit_memrate(model: &LoadedModel, corpus: &Corpus, cfg: &MemRateConfig, seed: u64) -> Result<MemRateReport> {
    let detector = model.detector()?;
    let pool = corpus.split(cfg.split);
    let mut generator = MockGenerator::new(pool)?;
    generator.copy_strength = cfg.copy_strength;
    let pick = |r: &mut rng::Rng| &pool[r.gen_range(0..pool.len())];

    let mut r = rng::indexed_stream(seed, tag::GENERATOR, 0);
    let mut flags = Vec::with_capacity(cfg.trials);
    let mut memorized = 0;
    for _ in 0..cfg.trials {
        let x_r = pick(&mut r);
        let (x_s, is_copy) = generator.generate(x_r, cfg.p_mem, &mut r)?;
        memorized += is_copy as usize;
        flags.push(mock_flag(&detector, &x_s, x_r)?);
    }
    let rate = mem_rate_from_flags(&flags);

    let mut r = rng::indexed_stream(seed, tag::GENERATOR, 1);
    let (mut tp, mut fp) = (0usize, 0usize);
    for _ in 0..cfg.trials {
        let x_r = pick(&mut r);
        let (copy, _) = generator.generate(x_r, 1.0, &mut r)?;
        tp += mock_flag(&detector, &copy, x_r)? as usize;
        let (other, _) = generator.generate(x_r, 0.0, &mut r)?;
        fp += mock_flag(&detector, &other, x_r)? as usize;
    }
    let confusion = ConfusionRates { tpr: tp as f64 / cfg.trials as f64, fpr: fp as f64 / cfg.trials as f64, samples_per_class: cfg.trials };

    let mut r = rng::indexed_stream(seed, tag::GENERATOR, 2);
    let mut summary = FilterSummary {
        max_attempts: cfg.max_attempts,
        accepted: 0,
        unresolved: 0,
        memorized_among_accepted: 0,
        memorized_fraction_among_accepted: 0.0,
        mean_attempts: 0.0,
    };
    let mut attempts = 0;
    for _ in 0..cfg.trials {
        let x_r = pick(&mut r).clone();
        let outcome = filter_loop(&x_r, || generator.generate(&x_r, cfg.p_mem, &mut r), &detector, cfg.max_attempts, NOVELTY_THRESHOLD)?;
        attempts += outcome.attempts;
        if outcome.resolved {
            summary.accepted += 1;
            summary.memorized_among_accepted += outcome.sample.1 as usize;
        } else {
            summary.unresolved += 1;
        }
    }
    summary.memorized_fraction_among_accepted =
        if summary.accepted > 0 { summary.memorized_among_accepted as f64 / summary.accepted as f64 } else { 0.0 };
    summary.mean_attempts = attempts as f64 / cfg.trials as f64;

    Ok(MemRateReport {
        schema_version: SCHEMA_VERSION,
        p_mem: cfg.p_mem,
        trials: cfg.trials,
        true_memorized_fraction: memorized as f64 / cfg.trials as f64,
        mem_rate: rate,
        expected_mem_rate: cfg.p_mem * confusion.tpr + (1.0 - cfg.p_mem) * confusion.fpr,
        confusion,
        filter: summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRun {
    pub threads: usize,
    pub pairs: u64,
    pub wall_clock_seconds: f64,
    pub pairs_per_second: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub dim: usize,
    pub head_hidden: usize,
    pub atlas_rows: usize,
    pub queries: usize,
    pub block_rows: usize,
    pub available_parallelism: usize,
    pub runs: Vec<ThroughputRun>,
    /// Flag sets and score digests agreed across every thread count.
    pub deterministic: bool,
    /// Seconds per pair at a tenth of the atlas divided by the full-size
    /// value, both at the first thread count.
    pub scaling_ratio: f64,
}

/// Seeded random atlas in the feature range of a ReLU encoder.
pub fn random_atlas(params: &ModelParams, rows: usize, seed: u64, index: u64) -> Atlas {
    let dim = params.dims.feature;
    let mut r = rng::indexed_stream(seed, tag::BENCH, index);
    Atlas {
        dim,
        fingerprint: lcmem_core::atlas::fingerprint(params),
        ids: (0..rows as u64).collect(),
        identities: (0..rows as i64).map(|i| i % 1000).collect(),
        features: (0..rows * dim).map(|_| r.gen_range(0.0f32..1.0)).collect(),
    }
}

pub fn bench_params(seed: u64) -> Result<ModelParams> {
    Ok(ModelParams::init(seed, ModelDims::default())?)
}

fn best_of(kernel: &HeadKernel, atlas: &Atlas, queries: &Atlas, options: &ScoreOptions, threads: usize, repeats: usize) -> Result<AuditReport> {
    let mut best: Option<AuditReport> = None;
    for _ in 0..repeats {
        let r = parallel::score_one_vs_all(kernel, atlas, queries, options, threads)?;
        if best.as_ref().map_or(true, |b| r.wall_clock_seconds < b.wall_clock_seconds) {
            best = Some(r);
        }
    }
    Ok(best.expect("repeats >= 1"))
}

pub fn bench_throughput(params: &ModelParams, cfg: &BenchConfig, seed: u64) -> Result<BenchReport> {
    let kernel = HeadKernel::new(params);
    let atlas = random_atlas(params, cfg.atlas_rows, seed, 0);
    let queries = random_atlas(params, cfg.queries, seed, 1);
    let options = ScoreOptions { block_rows: cfg.block_rows, top_k: 1, ..ScoreOptions::default() };
    let mut runs: Vec<ThroughputRun> = Vec::new();
    let mut reference: Option<AuditReport> = None;
    let mut deterministic = true;
    for &threads in &cfg.thread_counts {
        let report = best_of(&kernel, &atlas, &queries, &options, threads, cfg.repeats)?;
        if let Some(r) = &reference {
            deterministic &= r.flags == report.flags && r.results == report.results;
        }
        let base = runs.first().map_or(report.wall_clock_seconds, |b| b.wall_clock_seconds);
        runs.push(ThroughputRun {
            threads,
            pairs: report.total_pairs,
            wall_clock_seconds: report.wall_clock_seconds,
            pairs_per_second: report.pairs_per_second,
            speedup: base / report.wall_clock_seconds,
        });
        reference.get_or_insert(report);
    }
    let small = atlas.select(&(0..(cfg.atlas_rows / 10).max(1)).collect::<Vec<_>>());
    let small_run = best_of(&kernel, &small, &queries, &options, cfg.thread_counts[0], cfg.repeats)?;
    let full_per_pair = 1.0 / runs[0].pairs_per_second;
    let small_per_pair = small_run.wall_clock_seconds / small_run.total_pairs as f64;
    Ok(BenchReport {
        schema_version: SCHEMA_VERSION,
        dim: params.dims.feature,
        head_hidden: params.dims.head_hidden,
        atlas_rows: cfg.atlas_rows,
        queries: cfg.queries,
        block_rows: cfg.block_rows,
        available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
        runs,
        deterministic,
        scaling_ratio: small_per_pair / full_per_pair,
    })
}
