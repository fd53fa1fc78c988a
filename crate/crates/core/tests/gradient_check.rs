//! Analytic gradients of the combined loss against central finite differences.

use lcmem_core::losses::{combined_loss, combined_loss_value, LossConfig, PairBatch};
use lcmem_core::model::{ModelDims, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
const FLOOR: f64 = 1e-6;

fn random_batch(rng: &mut ChaCha8Rng, width: usize, pairs: usize) -> PairBatch {
    let mut b = PairBatch::with_width(width);
    for i in 0..pairs {
        let positive = i % 2 == 0;
        let a = (i / 2) as u64;
        let c = if positive { a } else { 100 + i as u64 };
        b.left.extend((0..width).map(|_| rng.gen_range(-1.0..1.0)));
        b.right.extend((0..width).map(|_| rng.gen_range(-1.0..1.0)));
        b.labels.push(positive);
        b.left_identity.push(a);
        b.right_identity.push(c);
        b.left_dataset.push(0);
        b.right_dataset.push(0);
        b.left_source.push(2 * i as u64);
        b.right_source.push(2 * i as u64 + 1);
    }
    b
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Returns the worst relative error over the checked parameter indices.
fn check(params: &ModelParams, batch: &PairBatch, config: &LossConfig, stride: usize) -> (f64, usize) {
    let mut analytic = params.clone();
    analytic.zero_grad();
    combined_loss(batch, &mut analytic, config).unwrap();
    let mut grads = Vec::new();
    analytic.for_each_tensor_mut(|_, g| grads.extend_from_slice(g));

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut flat = 0usize;
    let n_tensors = 2 * probe.layers().count();
    for t in 0..n_tensors {
        let len = tensor_len(&probe, t);
        let mut i = 0;
        while i < len {
            let orig = tensor(&mut probe, t)[i];
            tensor(&mut probe, t)[i] = orig + STEP;
            let up = combined_loss_value(batch, &probe, config).unwrap().total;
            tensor(&mut probe, t)[i] = orig - STEP;
            let down = combined_loss_value(batch, &probe, config).unwrap().total;
            tensor(&mut probe, t)[i] = orig;
            let fd = (up - down) / (2.0 * STEP);
            let err = relative_error(grads[flat + i], fd);
            assert!(
                err < TOLERANCE,
                "alpha {} tensor {t} index {i}: analytic {} vs numeric {fd} (rel {err})",
                config.alpha,
                grads[flat + i]
            );
            worst = worst.max(err);
            checked += 1;
            i += stride;
        }
        flat += len;
    }
    (worst, checked)
}

fn tensor_len(p: &ModelParams, t: usize) -> usize {
    let l = p.layers().nth(t / 2).unwrap();
    if t % 2 == 0 {
        l.weight.len()
    } else {
        l.bias.len()
    }
}

fn tensor(p: &mut ModelParams, t: usize) -> &mut Vec<f64> {
    let l = p.layers_mut().nth(t / 2).unwrap();
    if t % 2 == 0 {
        &mut l.weight
    } else {
        &mut l.bias
    }
}

fn small_dims() -> ModelDims {
    ModelDims { input: 8, encoder_hidden: vec![7, 6], feature: 5, head_hidden: 4 }
}

fn perturbed_params(seed: u64, dims: ModelDims) -> ModelParams {
    // Non-zero biases so ReLU masks are not trivially aligned with zero.
    let mut p = ModelParams::init(seed, dims).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    for l in p.layers_mut() {
        for b in l.bias.iter_mut() {
            *b = rng.gen_range(-0.1..0.1);
        }
    }
    p
}

#[test]
fn every_parameter_matches_finite_differences_across_alpha_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for alpha in [0.0, 0.5, 0.8, 1.0] {
        for (normalize, temperature) in [(true, 0.07), (false, 0.5)] {
            let config = LossConfig { alpha, temperature, normalize_features: normalize };
            let params = perturbed_params(alpha.to_bits() ^ temperature.to_bits(), small_dims());
            let batch = random_batch(&mut rng, 8, 6);
            let (worst, checked) = check(&params, &batch, &config, 1);
            assert_eq!(checked, params.param_count());
            assert!(worst < TOLERANCE);
        }
    }
}

#[test]
fn default_size_model_spot_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = perturbed_params(3, ModelDims::default());
    let batch = random_batch(&mut rng, 256, 4);
    let config = LossConfig::default();
    let (worst, checked) = check(&params, &batch, &config, 997);
    assert!(checked > 100);
    assert!(worst < TOLERANCE);
}

#[test]
fn alpha_boundaries_select_single_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = perturbed_params(4, small_dims());
    let batch = random_batch(&mut rng, 8, 6);
    let both = combined_loss_value(&batch, &params, &LossConfig { alpha: 0.5, ..LossConfig::default() }).unwrap();
    let only_c = combined_loss_value(&batch, &params, &LossConfig { alpha: 1.0, ..LossConfig::default() }).unwrap();
    let only_b = combined_loss_value(&batch, &params, &LossConfig { alpha: 0.0, ..LossConfig::default() }).unwrap();
    assert_eq!(only_c.total, both.contrastive);
    assert_eq!(only_b.total, both.classification);
    let mixed = LossConfig { alpha: 0.8, ..LossConfig::default() };
    let r = combined_loss_value(&batch, &params, &mixed).unwrap();
    assert!((r.total - (0.8 * r.contrastive + 0.2 * r.classification)).abs() < 1e-15);
}
