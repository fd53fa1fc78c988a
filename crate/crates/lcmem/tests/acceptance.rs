//! Release gates. Every test writes one `criterion N [PASS|FAIL]` line to
//! stdout (bypassing capture) before asserting.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use lcmem::io::{self, LoadedModel};
use lcmem::parallel;
use lcmem::pipeline::{self, TrainOutcome, TrainPlan};
use lcmem::config::{BenchConfig, MemRateConfig};
use lcmem_core::atlas::{build_atlas, fingerprint, Atlas, AuditReport, HeadKernel, ScoreOptions};
use lcmem_core::augment::{apply_augmentation, lossy_compress, AugmentationKind, AugmentationSpec};
use lcmem_core::format;
use lcmem_core::losses::{bce_loss, combined_loss, combined_loss_value, nt_xent_loss, LossConfig, PairBatch};
use lcmem_core::metrics::{
    precision_at_recall, roc_auc, specificity_at_sensitivity, CalibrationTarget, ScoredPairs, SweepEntry,
};
use lcmem_core::model::{ModelDims, ModelParams};
use lcmem_core::rng;
use lcmem_core::training::TrainConfig;
use lcmem_core::world::{generate_corpus, Corpus, CorpusSpec, ImageSample, LatentNormalizer, ToyAutoencoder};
use lcmem_core::Error as CoreError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 42;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {id:>2} [{tag}] {name}: {detail}");
    let _ = out.flush();
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

struct Trained {
    corpus: Corpus,
    outcome: TrainOutcome,
    seconds: f64,
}

impl Trained {
    fn stage1(&self) -> LoadedModel {
        self.outcome.model(&self.outcome.stage1.as_ref().unwrap().0)
    }

    fn stage2(&self) -> LoadedModel {
        self.outcome.model(&self.outcome.stage2.as_ref().unwrap().0)
    }
}

/// Two-stage training on the default corpus, shared by every test that needs it.
fn trained() -> &'static Trained {
    static TRAINED: OnceLock<Trained> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let corpus = generate_corpus(&CorpusSpec::desk_default(SEED)).unwrap();
        let start = Instant::now();
        let outcome = pipeline::train(&corpus, &TrainConfig::new(SEED), ToyAutoencoder::DEFAULT_MIXING_SEED, TrainPlan::Full, None).unwrap();
        Trained { corpus, outcome, seconds: start.elapsed().as_secs_f64() }
    })
}

// ---------------------------------------------------------------------------
// 1. Gradients

fn random_batch(r: &mut ChaCha8Rng, width: usize, pairs: usize) -> PairBatch {
    let mut b = PairBatch::with_width(width);
    for i in 0..pairs {
        let positive = i % 2 == 0;
        let id = (i / 2) as u64;
        b.left.extend((0..width).map(|_| r.gen_range(-1.0..1.0)));
        b.right.extend((0..width).map(|_| r.gen_range(-1.0..1.0)));
        b.labels.push(positive);
        b.left_identity.push(id);
        b.right_identity.push(if positive { id } else { 1000 + i as u64 });
        b.left_dataset.push(0);
        b.right_dataset.push(0);
        b.left_source.push(2 * i as u64);
        b.right_source.push(2 * i as u64 + 1);
    }
    b
}

fn tensors(p: &mut ModelParams) -> Vec<&mut Vec<f64>> {
    p.layers_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    const STEP: f64 = 1e-5;
    let start = Instant::now();
    let dims = ModelDims { input: 10, encoder_hidden: vec![8, 7], feature: 6, head_hidden: 5 };
    let mut r = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for alpha in [0.0, 0.5, 0.8, 1.0] {
        let config = LossConfig { alpha, ..LossConfig::default() };
        for trial in 0..2u64 {
            let mut params = ModelParams::init(trial * 31 + alpha.to_bits(), dims.clone()).unwrap();
            for l in params.layers_mut() {
                l.bias.iter_mut().for_each(|b| *b = r.gen_range(-0.1..0.1));
            }
            let batch = random_batch(&mut r, dims.input, 8);
            let mut analytic = params.clone();
            analytic.zero_grad();
            combined_loss(&batch, &mut analytic, &config).unwrap();
            let mut grads = Vec::new();
            analytic.for_each_tensor_mut(|_, g| grads.extend_from_slice(g));

            let mut probe = params.clone();
            let shapes: Vec<usize> = tensors(&mut probe).iter().map(|t| t.len()).collect();
            let mut flat = 0;
            for (t, len) in shapes.into_iter().enumerate() {
                for i in 0..len {
                    let orig = tensors(&mut probe)[t][i];
                    tensors(&mut probe)[t][i] = orig + STEP;
                    let up = combined_loss_value(&batch, &probe, &config).unwrap().total;
                    tensors(&mut probe)[t][i] = orig - STEP;
                    let down = combined_loss_value(&batch, &probe, &config).unwrap().total;
                    tensors(&mut probe)[t][i] = orig;
                    let numeric = (up - down) / (2.0 * STEP);
                    let a = grads[flat + i];
                    worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
                    checked += 1;
                }
                flat += len;
            }
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient correctness",
        worst < 1e-4 && seconds < 30.0,
        &format!("{checked} parameters, worst relative error {worst:.2e} (< 1e-4), {seconds:.2}s (< 30s)"),
    );
}

// ---------------------------------------------------------------------------
// 2. Loss unit values

#[test]
fn criterion_02_loss_unit_values() {
    let ln2 = std::f64::consts::LN_2;
    // Three unit vectors 120 degrees apart: each anchor sees its positive and
    // one negative at the same similarity.
    let s = 3f64.sqrt() / 2.0;
    let cfg = LossConfig::default();
    let nt = nt_xent_loss(&[1.0, 0.0, -0.5, s, -0.5, -s], 2, &[0, 0, 1], &cfg).unwrap().loss;
    let bce = bce_loss(0.0, true).loss;

    let mut r = ChaCha8Rng::seed_from_u64(7);
    let params = ModelParams::init(3, ModelDims { input: 6, encoder_hidden: vec![5], feature: 4, head_hidden: 3 }).unwrap();
    let batch = random_batch(&mut r, 6, 6);
    let both = combined_loss_value(&batch, &params, &LossConfig { alpha: 0.5, ..cfg }).unwrap();
    let only_c = combined_loss_value(&batch, &params, &LossConfig { alpha: 1.0, ..cfg }).unwrap().total;
    let only_b = combined_loss_value(&batch, &params, &LossConfig { alpha: 0.0, ..cfg }).unwrap().total;

    let pass = (nt - ln2).abs() < 1e-12 && (bce - ln2).abs() < 1e-12 && only_c == both.contrastive && only_b == both.classification;
    verdict(
        2,
        "loss unit values",
        pass,
        &format!(
            "NT-Xent two-key {:.1e} from ln 2, BCE(0.5, 1) {:.1e} from ln 2, alpha=1 exact {}, alpha=0 exact {}",
            (nt - ln2).abs(),
            (bce - ln2).abs(),
            only_c == both.contrastive,
            only_b == both.classification
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Metric oracles

fn brute_force_auc(sp: &ScoredPairs) -> f64 {
    let pos: Vec<f64> = sp.positives().collect();
    let neg: Vec<f64> = sp.negatives().collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// `(precision, specificity, threshold)` at the largest observed-or-infinite
/// threshold whose recall reaches `target`.
fn sweep_oracle(sp: &ScoredPairs, target: f64) -> (f64, f64, f64) {
    let mut candidates: Vec<f64> = sp.scores.clone();
    candidates.push(f64::INFINITY);
    candidates.sort_by(|a, b| b.total_cmp(a));
    let p = sp.labels.iter().filter(|&&l| l).count();
    let n = sp.labels.len() - p;
    for t in candidates {
        let tp = sp.scores.iter().zip(&sp.labels).filter(|(&s, &l)| l && s >= t).count();
        let fp = sp.scores.iter().zip(&sp.labels).filter(|(&s, &l)| !l && s >= t).count();
        if tp as f64 / p as f64 >= target {
            let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
            return (precision, (n - fp) as f64 / n as f64, t);
        }
    }
    unreachable!("the smallest score reaches full recall")
}

#[test]
fn criterion_03_metric_oracles() {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_auc = 0.0f64;
    let mut mismatches = 0;
    for case in 0..100 {
        let n = r.gen_range(2..=200);
        let mut scores = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            // Even cases draw from a coarse grid so ties are common.
            let s = if case % 2 == 0 { r.gen_range(0..12) as f64 / 11.0 } else { r.gen::<f64>() };
            scores.push(s);
            labels.push(if i == 0 { true } else if i == 1 { false } else { r.gen_bool(0.4) });
        }
        let sp = ScoredPairs::new(scores, labels).unwrap();
        worst_auc = worst_auc.max((roc_auc(&sp).unwrap() - brute_force_auc(&sp)).abs());
        for target in [0.5, 0.9, 0.95, 0.99, 1.0] {
            let (precision, t) = precision_at_recall(&sp, target).unwrap();
            let (specificity, t2) = specificity_at_sensitivity(&sp, target).unwrap();
            let (op, os, ot) = sweep_oracle(&sp, target);
            if precision != op || specificity != os || t != ot || t2 != ot {
                mismatches += 1;
            }
        }
    }
    verdict(
        3,
        "metric oracle equivalence",
        worst_auc <= 1e-12 && mismatches == 0,
        &format!("100 instances, worst AUC gap {worst_auc:.1e} (<= 1e-12), {mismatches} operating-point mismatches (0)"),
    );
}

// ---------------------------------------------------------------------------
// 4. Re-identification on the default corpus

#[test]
fn criterion_04_two_stage_reid() {
    let t = trained();
    let model = t.stage2();
    let (sp, _) = pipeline::reid_scores(&model.detector().unwrap(), &t.corpus.test, SEED).unwrap();
    let auc = roc_auc(&sp).unwrap();
    let (spec, _) = specificity_at_sensitivity(&sp, 0.99).unwrap();
    verdict(
        4,
        "two-stage re-ID on the default corpus",
        auc >= 0.95 && spec >= 0.5 && t.seconds < 600.0,
        &format!(
            "test AUC {auc:.4} (>= 0.95), specificity@0.99 {spec:.4} (>= 0.5), training {:.1}s (< 600s) on {} core(s)",
            t.seconds,
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Robustness gained by the second stage

fn strongest_noise_recall(model: &LoadedModel, corpus: &Corpus) -> (f64, f64) {
    let det = model.detector().unwrap();
    let cal = pipeline::calibrate_on(&det, &corpus.val, CalibrationTarget::Specificity(0.5), SEED).unwrap();
    let images = pipeline::copy_subset(&corpus.test, pipeline::COPY_IMAGES, SEED);
    let sweep = [SweepEntry { kind: AugmentationKind::AdditiveNoise, strengths: vec![1.0] }];
    let rows = pipeline::robustness_table(&det, &images, &sweep, cal.threshold, SEED, 1).unwrap();
    let recall = rows.iter().find(|r| r.dataset.is_none()).unwrap().recall;
    let (sp, _) = pipeline::reid_scores(&det, &corpus.test, SEED).unwrap();
    (recall, roc_auc(&sp).unwrap())
}

#[test]
fn criterion_05_second_stage_robustness() {
    let t = trained();
    let (r1, auc1) = strongest_noise_recall(&t.stage1(), &t.corpus);
    let (r2, auc2) = strongest_noise_recall(&t.stage2(), &t.corpus);
    verdict(
        5,
        "two-stage robustness effect",
        r2 - r1 >= 0.2 && (auc2 - auc1).abs() <= 0.05,
        &format!(
            "noise s=1 recall at 50% specificity: stage 1 {r1:.4}, stage 2 {r2:.4} (gain {:.4} >= 0.2); clean AUC {auc1:.4} vs {auc2:.4} (gap {:.4} <= 0.05)",
            r2 - r1,
            (auc2 - auc1).abs()
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Augmentation contracts

fn pixel_mse(a: &ImageSample, b: &ImageSample) -> f64 {
    a.pixels.iter().zip(&b.pixels).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.pixels.len() as f64
}

#[test]
fn criterion_06_augmentation_contracts() {
    let corpus = generate_corpus(&CorpusSpec { n_datasets: 1, identities_per_dataset: 3, images_per_identity: 2, ..CorpusSpec::desk_default(SEED) }).unwrap();
    let x = &corpus.all().next().unwrap().clone();

    let mut identity_err = 0.0f64;
    for kind in AugmentationKind::ALL {
        if matches!(kind, AugmentationKind::FlipHorizontal | AugmentationKind::SampleWiseNormalization | AugmentationKind::LossyCompression) {
            continue;
        }
        let y = apply_augmentation(x, &AugmentationSpec { kind, strength: 0.0 }, &mut rng::stream(1, 0)).unwrap();
        let e = x.pixels.iter().zip(&y.pixels).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
        identity_err = identity_err.max(e);
    }

    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let mut monotone = true;
    for kind in [AugmentationKind::GaussianBlur, AugmentationKind::AdditiveNoise, AugmentationKind::LossyCompression] {
        let mses: Vec<f64> = grid
            .iter()
            .map(|&s| pixel_mse(x, &apply_augmentation(x, &AugmentationSpec { kind, strength: s }, &mut rng::stream(9, 0)).unwrap()))
            .collect();
        monotone &= mses.windows(2).all(|w| w[1] >= w[0] - 1e-9);
    }

    let q100 = lossy_compress(x, 100).unwrap();
    let roundtrip = x.pixels.iter().zip(&q100.pixels).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);

    verdict(
        6,
        "augmentation contracts",
        identity_err <= 1e-6 && monotone && roundtrip < 1e-3,
        &format!("strength-0 max error {identity_err:.1e} (<= 1e-6), MSE monotone for blur/noise/compression {monotone}, quality-100 max error {roundtrip:.1e} (< 1e-3)"),
    );
}

// ---------------------------------------------------------------------------
// 7. Filter loop and MemRate

#[test]
fn criterion_07_filter_loop_and_memrate() {
    let t = trained();
    let cfg = MemRateConfig { p_mem: 0.1, trials: 1000, ..MemRateConfig::default() };
    let r = pipeline::audit_memrate(&t.stage2(), &t.corpus, &cfg, SEED).unwrap();
    let gap = (r.mem_rate.rate - r.expected_mem_rate).abs();
    verdict(
        7,
        "filter-loop efficacy",
        r.filter.memorized_fraction_among_accepted < 0.01 && gap <= 0.02,
        &format!(
            "memorized among {} accepted {:.4} (< 0.01); MemRate {:.4} vs p*TPR+(1-p)*FPR {:.4} (TPR {:.4}, FPR {:.4}, gap {gap:.4} <= 0.02)",
            r.filter.accepted,
            r.filter.memorized_fraction_among_accepted,
            r.mem_rate.rate,
            r.expected_mem_rate,
            r.confusion.tpr,
            r.confusion.fpr
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. One-vs-all audit

/// A fresh population of 10,100 images: 100 held-out queries and a 10,000-row
/// atlas, normalized per dataset on itself.
fn audit_population(t: &Trained) -> (LoadedModel, Atlas, Atlas) {
    let spec = CorpusSpec { n_datasets: 2, identities_per_dataset: 1010, images_per_identity: 5, ..CorpusSpec::desk_default(SEED + 1) };
    let corpus = generate_corpus(&spec).unwrap();
    let images: Vec<ImageSample> = corpus.all().cloned().collect();
    let ae = ToyAutoencoder::seeded(spec.shape, ToyAutoencoder::DEFAULT_MIXING_SEED);
    let latents: Vec<_> = images.iter().map(|x| ae.encode(x).unwrap()).collect();
    let normalizer = LatentNormalizer::fit(&latents).unwrap();
    let model = LoadedModel::new(t.outcome.stage2.as_ref().unwrap().0.clone(), ae, normalizer);
    let (rest, queries) = pipeline::holdout_queries(&images, 100, SEED).unwrap();
    let det = model.detector().unwrap();
    let atlas = build_atlas(&det, &rest).unwrap();
    let queries = build_atlas(&det, &queries).unwrap();
    (model, atlas, queries)
}

#[test]
fn criterion_08_one_vs_all_audit() {
    let t = trained();
    let (model, atlas, queries) = audit_population(t);
    let kernel = HeadKernel::new(&model.params);
    let mut runs: Vec<AuditReport> = Vec::new();
    for block_rows in [64, 1024] {
        for threads in [1, 2, 8] {
            let options = ScoreOptions { threshold: 0.5, block_rows, ..ScoreOptions::default() };
            runs.push(parallel::score_one_vs_all(&kernel, &atlas, &queries, &options, threads).unwrap());
        }
    }
    let base = &runs[0];
    let identical = runs.iter().all(|r| r.flags == base.flags && r.results == base.results && r.tally == base.tally);
    let tally = base.tally;
    let pos = tally.positives_flagged as f64 / tally.positives as f64;
    let neg = tally.negatives_flagged as f64 / tally.negatives as f64;
    verdict(
        8,
        "one-vs-all audit",
        atlas.rows() == 10_000 && queries.rows() == 100 && pos >= 0.99 && neg <= 0.05 && identical,
        &format!(
            "{}x{} pairs: positives above 0.5 {pos:.4} (>= 0.99, n={}), negatives {neg:.4} (<= 0.05, n={}), flags identical over threads {{1,2,8}} x blocks {{64,1024}}: {identical}",
            queries.rows(),
            atlas.rows(),
            tally.positives,
            tally.negatives
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Throughput

#[test]
fn criterion_09_throughput() {
    let params = pipeline::bench_params(SEED).unwrap();
    let cfg = BenchConfig { atlas_rows: 20_000, queries: 64, thread_counts: vec![1, 4], block_rows: 1024, repeats: 3 };
    let r = pipeline::bench_throughput(&params, &cfg, SEED).unwrap();
    let single = r.runs[0].pairs_per_second;
    let speedup = r.runs[1].speedup;
    verdict(
        9,
        "throughput",
        r.dim == 64 && single >= 500_000.0 && speedup >= 3.0 && r.deterministic,
        &format!(
            "d={} single-thread {single:.0} pairs/s (>= 500000), 4 threads {:.0} pairs/s, speedup {speedup:.2}x (>= 3) with {} core(s) available",
            r.dim, r.runs[1].pairs_per_second, r.available_parallelism
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Serialization

#[test]
fn criterion_10_serialization() {
    let dir = tempfile::tempdir().unwrap();
    let params = ModelParams::init(5, ModelDims { input: 16, encoder_hidden: vec![12], feature: 8, head_hidden: 4 }).unwrap();
    let ppath = dir.path().join("p.lcmp");
    io::save_params(&ppath, &params).unwrap();
    let back = io::load_params(&ppath).unwrap();
    let params_exact = back == params && format::encode_params(&back) == std::fs::read(&ppath).unwrap();

    let mut r = ChaCha8Rng::seed_from_u64(1);
    let atlas = Atlas {
        dim: 8,
        fingerprint: fingerprint(&params),
        ids: (0..6).collect(),
        identities: vec![0, 0, 1, -1, 2, 2],
        features: (0..48).map(|_| r.gen_range(0.0f32..3.0)).collect(),
    };
    let apath = dir.path().join("a.lcma");
    io::save_atlas(&apath, &atlas).unwrap();
    let atlas_back = io::load_atlas(&apath).unwrap();
    let atlas_exact = atlas_back == atlas
        && atlas_back.features.iter().zip(&atlas.features).all(|(a, b)| a.to_bits() == b.to_bits());

    let mut undetected = 0;
    let mut flips = 0;
    for (bytes, is_params) in [(format::encode_params(&params), true), (atlas.encode(), false)] {
        for bit in 0..bytes.len() * 8 {
            let mut c = bytes.clone();
            c[bit / 8] ^= 1 << (bit % 8);
            flips += 1;
            let ok = if is_params { format::decode_params(&c).is_ok() } else { Atlas::decode(&c).is_ok() };
            undetected += ok as usize;
        }
    }

    // One flipped weight bit gives a different model; its kernel must refuse the atlas.
    let mut tampered = params.clone();
    tampered.head[0].weight[0] = f64::from_bits(tampered.head[0].weight[0].to_bits() ^ 1);
    let kernel = HeadKernel::new(&tampered);
    let blocked = matches!(
        lcmem_core::atlas::score_one_vs_all(&kernel, &atlas, &atlas, &ScoreOptions::default()),
        Err(CoreError::FingerprintMismatch)
    ) && fingerprint(&tampered) != fingerprint(&params);

    verdict(
        10,
        "serialization",
        params_exact && atlas_exact && undetected == 0 && blocked,
        &format!("params roundtrip exact {params_exact}, atlas roundtrip exact {atlas_exact}, {undetected} of {flips} single-bit flips undetected (0), fingerprint mismatch blocks scoring {blocked}"),
    );
}
