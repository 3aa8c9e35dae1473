//! Central finite differences against the analytic backward pass.

use canids::nn::{ArchConfig, Mode, Tensor};
use canids::Model64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

pub fn arch(channels: &[usize], dropout: f64) -> ArchConfig {
    ArchConfig {
        conv_channels: channels.to_vec(),
        dense_units: 5,
        dropout_rate: dropout,
        ..ArchConfig::default()
    }
}

pub fn batch(rng: &mut ChaCha8Rng, n: usize) -> (Tensor<f64>, Vec<f64>) {
    let data = (0..n * 44).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    labels.rotate_left(rng.gen_range(0..n));
    (Tensor::new(vec![n, 2, 2, 11], data).unwrap(), labels)
}

/// Randomizes every parameter and batch-norm affine so gradients are generic.
pub fn perturb(model: &mut Model64, rng: &mut ChaCha8Rng) {
    for p in model.params_mut() {
        for v in p.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

fn loss(model: &Model64, x: &Tensor<f64>, y: &[f64], mode: Mode, seed: u64) -> f64 {
    let mut m = model.clone();
    let pass = m.forward(x, mode, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    pass.loss(y).unwrap()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn central(model: &Model64, x: &Tensor<f64>, y: &[f64], seed: u64, t: usize, i: usize, step: f64) -> f64 {
    let mut plus = model.clone();
    plus.params_mut()[t][i] += step;
    let mut minus = model.clone();
    minus.params_mut()[t][i] -= step;
    (loss(&plus, x, y, Mode::Train, seed) - loss(&minus, x, y, Mode::Train, seed)) / (2.0 * step)
}

/// Difference quotient at `H`; where shrinking the step fourfold moves it
/// (a ReLU kink within reach of the step), the step keeps shrinking until two
/// successive quotients agree.
fn settled(model: &Model64, x: &Tensor<f64>, y: &[f64], seed: u64, t: usize, i: usize, tol: f64) -> f64 {
    let mut step = H;
    let mut prev = central(model, x, y, seed, t, i, step);
    for _ in 0..6 {
        step /= 4.0;
        let next = central(model, x, y, seed, t, i, step);
        if (next - prev).abs() <= tol {
            return prev;
        }
        prev = next;
    }
    prev
}

/// Per-tensor relative error `|g - fd| / max(|g|, |fd|)` of the analytic
/// gradient against central differences. Tensors whose gradients are both at
/// rounding level count as zero error.
pub fn check(model: &Model64, x: &Tensor<f64>, y: &[f64], dropout_seed: u64) -> Vec<(String, f64)> {
    let mut m = model.clone();
    let pass = m.forward(x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(dropout_seed)).unwrap();
    let grads = model.backward(&pass, y).unwrap();
    let names = model.param_names();
    let mut out = Vec::new();
    for (t, name) in names.iter().enumerate() {
        let g = &grads.values[t];
        let tol = TOL * norm(g) / 10.0 + 1e-9;
        let fd: Vec<f64> = (0..g.len()).map(|i| settled(model, x, y, dropout_seed, t, i, tol)).collect();
        let scale = norm(g).max(norm(&fd));
        let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let rel = if scale < 1e-9 { 0.0 } else { norm(&diff) / scale };
        out.push((name.clone(), rel));
    }
    out
}

pub fn assert_all(results: &[(String, f64)], ctx: &str) {
    for (name, rel) in results {
        assert!(*rel < TOL, "{ctx}: {name} relative error {rel:e}");
    }
}

