//! Finite-difference checks of the hand-written backward pass in f64.

mod common;

use canids::nn::{CnnModel, Mode, Tensor};
use canids::quant::fold_batchnorm;
use canids::Model64;
use common::gradcheck::{arch, assert_all, batch, check, norm, perturb};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn composed_model_with_batchnorm_and_dropout() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut model = Model64::new(arch(&[3, 4], 0.25), seed).unwrap();
        perturb(&mut model, &mut rng);
        let (x, y) = batch(&mut rng, 6);
        assert_all(&check(&model, &x, &y, seed), &format!("seed {seed}"));
    }
}

#[test]
fn every_layer_kind_in_isolation() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        // a single conv block, no dropout: conv + BN + ReLU + dense head
        let mut one = Model64::new(arch(&[3], 0.0), seed).unwrap();
        perturb(&mut one, &mut rng);
        let (x, y) = batch(&mut rng, 5);
        assert_all(&check(&one, &x, &y, seed), &format!("single block, seed {seed}"));

        // folded: conv + ReLU stacks without normalization
        let mut folded = fold_batchnorm(&Model64::new(arch(&[3, 3, 2], 0.0), seed).unwrap()).unwrap();
        perturb(&mut folded, &mut rng);
        let (x, y) = batch(&mut rng, 4);
        assert_all(&check(&folded, &x, &y, seed), &format!("folded, seed {seed}"));
    }
}

#[test]
fn single_sample_batch_without_batchnorm() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut m = fold_batchnorm(&Model64::new(arch(&[2], 0.0), 1).unwrap()).unwrap();
    perturb(&mut m, &mut rng);
    let (x, y) = batch(&mut rng, 1);
    assert_all(&check(&m, &x, &y, 0), "n = 1");
}

#[test]
fn gradients_match_between_f32_and_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m64 = Model64::new(arch(&[3, 4], 0.0), 5).unwrap();
    perturb(&mut m64, &mut rng);
    let (x, y) = batch(&mut rng, 6);
    let g64 = {
        let mut m = m64.clone();
        let pass = m.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m64.backward(&pass, &y).unwrap()
    };
    let m32: CnnModel<f32> = m64.cast();
    let x32 = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v as f32).collect()).unwrap();
    let y32: Vec<f32> = y.iter().map(|&v| v as f32).collect();
    let mut m = m32.clone();
    let pass = m.forward(&x32, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let g32 = m32.backward(&pass, &y32).unwrap();
    for (a, b) in g64.values.iter().zip(&g32.values) {
        let diff: Vec<f64> = a.iter().zip(b).map(|(p, q)| p - *q as f64).collect();
        assert!(norm(&diff) <= 1e-3 * norm(a).max(1e-3), "{} vs {}", norm(&diff), norm(a));
    }
}

#[test]
fn backward_needs_a_training_pass() {
    let mut m = Model64::new(arch(&[2], 0.0), 0).unwrap();
    let (x, y) = batch(&mut ChaCha8Rng::seed_from_u64(0), 2);
    let pass = m.forward(&x, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(!pass.retains_state());
    assert!(m.backward(&pass, &y).is_err());
}
