//! Pinball-loss minimizers recover Gaussian quantiles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};
use tsjoint::objectives::{pinball, QuantileGrid};

use crate::Outcome;

/// Golden-section search for the minimizer of the mean pinball loss,
/// which is convex in `q`.
fn minimize(draws: &[f64], tau: f64) -> f64 {
    let f = |q: f64| draws.iter().map(|&y| pinball(tau, y - q)).sum::<f64>();
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (-6.0, 6.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-6 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = Normal::new(0.0, 1.0).unwrap();
    let draws: Vec<f64> = (0..100_000).map(|_| n.sample(&mut rng)).collect();
    let oracle = StdNormal::standard();
    let grid = QuantileGrid::uniform(21).unwrap();
    let mut worst = (0.0f64, 0.0);
    for &tau in grid.levels() {
        let err = (minimize(&draws, tau) - oracle.inverse_cdf(tau)).abs();
        if err > worst.0 {
            worst = (err, tau);
        }
    }
    Outcome::new(
        worst.0 <= 0.02,
        format!("max |q̂ - Φ⁻¹(τ)| {:.4} at τ={:.3} over 21 levels (tol 0.02)", worst.0, worst.1),
    )
}
