//! Analytic gradients against central finite differences.

use dynlab_core::model::{ModelConfig, ModelParams};
use dynlab_core::trainer::loss_and_gradients;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const H: f64 = 1e-5;

fn random_params(cfg: &ModelConfig, seed: u64, std: f64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).unwrap();
    let mut p = ModelParams::zeros(cfg);
    for m in p.matrices_mut() {
        m.data_mut().iter_mut().for_each(|v| *v = dist.sample(&mut rng));
    }
    p
}

fn loss(p: &ModelParams, batch: &[Vec<u32>]) -> f64 {
    loss_and_gradients(p, batch).unwrap().0
}

/// Max over entries of `|a - n| / max(|a|, |n|, floor)`.
fn max_rel_error(params: &ModelParams, batch: &[Vec<u32>], tensor: usize, floor: f64) -> f64 {
    let (_, grads) = loss_and_gradients(params, batch).unwrap();
    let analytic = grads.matrices()[tensor].data().to_vec();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = params.clone();
        plus.matrices_mut()[tensor].data_mut()[i] += H;
        let mut minus = params.clone();
        minus.matrices_mut()[tensor].data_mut()[i] -= H;
        let numeric = (loss(&plus, batch) - loss(&minus, batch)) / (2.0 * H);
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

#[test]
fn every_parameter_tensor_matches_finite_differences() {
    let cfg = ModelConfig::new(2, 4, 2, 7, 5).unwrap().with_mlp_hidden(6);
    let params = random_params(&cfg, 17, 0.5);
    let batch = vec![vec![1u32, 4, 2, 6, 0], vec![3, 3, 5]];
    let names = ModelParams::tensor_names(&cfg);
    for (i, name) in names.iter().enumerate() {
        let err = max_rel_error(&params, &batch, i, 1e-6);
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn write_matrix_gradients_on_reference_model() {
    // L = 2, D = 8, two heads, H_mlp = 32, T = 4.
    let cfg = ModelConfig::new(2, 8, 2, 10, 4).unwrap();
    assert_eq!(cfg.mlp_hidden, 32);
    let params = random_params(&cfg, 5, 0.3);
    let batch = vec![vec![1u32, 7, 3, 9], vec![0, 2, 2, 8]];
    let names = ModelParams::tensor_names(&cfg);
    for (i, name) in names.iter().enumerate() {
        if name.ends_with("w_o") || name.ends_with("w_proj") {
            let err = max_rel_error(&params, &batch, i, 1e-8);
            assert!(err < 1e-4, "{name}: relative error {err:e}");
        }
    }
}

#[test]
fn duplicated_batch_leaves_loss_and_gradients_unchanged() {
    let cfg = ModelConfig::new(2, 8, 2, 10, 4).unwrap();
    let params = random_params(&cfg, 9, 0.3);
    let batch = vec![vec![1u32, 7, 3, 9], vec![0, 2, 2, 8]];
    let doubled: Vec<Vec<u32>> = batch.iter().chain(batch.iter()).cloned().collect();
    let (l1, g1) = loss_and_gradients(&params, &batch).unwrap();
    let (l2, g2) = loss_and_gradients(&params, &doubled).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    for (a, b) in g1.matrices().iter().zip(g2.matrices()) {
        assert!(a.max_abs_diff(b) < 1e-12);
    }
}
