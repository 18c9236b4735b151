#![allow(dead_code)]

use marginlab::losses::LabeledLogits;
use marginlab::numerics::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Logits uniform in `[-spread, spread]` with uniform random labels.
pub fn random_batch<R: Rng>(rng: &mut R, n: usize, c: usize, spread: f64) -> LabeledLogits<f64> {
    let data: Vec<f64> = (0..n * c)
        .map(|_| rng.random_range(-spread..=spread))
        .collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    LabeledLogits::new(Matrix::from_vec(n, c, data).unwrap(), labels).unwrap()
}

/// Batch whose size is drawn from `1..=max_n` by `2..=max_c`.
pub fn random_sized_batch<R: Rng>(
    rng: &mut R,
    max_n: usize,
    max_c: usize,
    spread: f64,
) -> LabeledLogits<f64> {
    let n = rng.random_range(1..=max_n);
    let c = rng.random_range(2..=max_c);
    random_batch(rng, n, c, spread)
}

/// Mean of −log(posterior of the margin-shifted target), straight from the
/// exponentials with no shifting.
pub fn naive_am(data: &LabeledLogits<f64>, m: f64, s: f64) -> f64 {
    let z = data.logits();
    let mut total = 0.0;
    for (i, &y) in data.labels().iter().enumerate() {
        let target = (s * (z[(i, y)] - m)).exp();
        let mut denom = target;
        for j in 0..z.cols() {
            if j != y {
                denom += (s * z[(i, j)]).exp();
            }
        }
        total += -(target / denom).ln();
    }
    total / data.num_samples() as f64
}

/// Per-sample pairwise form, summed without any stabilization.
pub fn naive_ram(data: &LabeledLogits<f64>, m: f64, s: f64) -> f64 {
    let z = data.logits();
    let mut total = 0.0;
    for (i, &y) in data.labels().iter().enumerate() {
        let mut inner = 1.0;
        for j in 0..z.cols() {
            if j != y {
                let delta = z[(i, y)] - z[(i, j)];
                inner += f64::max(0.0, -s * (delta - m)).exp();
            }
        }
        total += inner.ln();
    }
    total / data.num_samples() as f64
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs())
}
