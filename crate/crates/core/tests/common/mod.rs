#![allow(dead_code)]

use jlcm::{Activation, LinearLayer, Matrix, ModelContainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Box-Muller normal sample.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn gauss(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| (normal(rng) * std) as f32)
}

/// Stack of layers with widths `dims[0] -> dims[1] -> ...`; ReLU between
/// layers, identity at the end, He-style weight scale and small biases.
pub fn random_model(rng: &mut ChaCha8Rng, dims: &[usize]) -> ModelContainer {
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(l, d)| {
            let act = if l + 2 == dims.len() { Activation::Identity } else { Activation::Relu };
            let w = gauss(rng, d[1], d[0], (1.0 / d[0] as f64).sqrt());
            let b = (0..d[1]).map(|_| (0.1 * normal(rng)) as f32).collect();
            LinearLayer::new(w, Some(b), act).unwrap()
        })
        .collect();
    ModelContainer::new("random", layers).unwrap()
}

pub fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
