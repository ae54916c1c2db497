use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::SynthConfig;

/// Adds `N(0, σ)` noise in place.
pub fn jitter(x: &mut [f64], sigma: f64, rng: &mut impl Rng) {
    if sigma == 0.0 {
        return;
    }
    for v in x {
        let z: f64 = StandardNormal.sample(rng);
        *v += sigma * z;
    }
}

pub fn scale(x: &mut [f64], factor: f64) {
    for v in x {
        *v *= factor;
    }
}

/// Multiplies by a factor drawn from `range`; returns the factor.
pub fn scale_aug(x: &mut [f64], range: (f64, f64), rng: &mut impl Rng) -> f64 {
    let f = rng.random_range(range.0..range.1);
    scale(x, f);
    f
}

/// `λx + (1−λ)y` over the common prefix; the tail of `x` is kept.
pub fn mix(x: &[f64], y: &[f64], lambda: f64) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &a)| match y.get(i) {
            Some(&b) => lambda * a + (1.0 - lambda) * b,
            None => a,
        })
        .collect()
}

/// Each series becomes a convex combination with a random partner,
/// `λ ~ U(0, 1)` drawn per series. Partners are read from the originals.
pub fn mixup(batch: &mut [Vec<f64>], rng: &mut impl Rng) {
    let n = batch.len();
    if n < 2 {
        return;
    }
    let orig = batch.to_vec();
    for (i, x) in batch.iter_mut().enumerate() {
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let lambda = rng.random_range(0.0..1.0);
        *x = mix(&orig[i], &orig[j], lambda);
    }
}

fn std_of(x: &[f64]) -> f64 {
    let n = x.len().max(1) as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}

/// With probability `augment_prob`, jitters and scales every series and
/// then mixes the batch. Returns whether anything was applied.
pub fn augment_batch(batch: &mut [Vec<f64>], cfg: &SynthConfig, rng: &mut impl Rng) -> bool {
    if !rng.random_bool(cfg.augment_prob) {
        return false;
    }
    for x in batch.iter_mut() {
        let frac = rng.random_range(cfg.jitter_frac.0..cfg.jitter_frac.1);
        let sigma = frac * std_of(x);
        jitter(x, sigma, rng);
        scale_aug(x, cfg.scale_range, rng);
    }
    mixup(batch, rng);
    true
}
