//! Forward/inverse normalization and NaN-insensitive statistics.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tsjoint::codec::{compute_visible_stats, denormalize, normalize};

use crate::Outcome;

pub fn run() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = Normal::new(0.0, 1.0).unwrap();
    let mut worst = 0.0f64;
    let mut stats_equal = 0;
    for _ in 0..1000 {
        let len = rng.random_range(1..400);
        let mu = rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-3..6));
        let sigma = 10f64.powi(rng.random_range(-3..5));
        let x: Vec<f64> = (0..len).map(|_| mu + sigma * z.sample(&mut rng)).collect();
        let s = compute_visible_stats(&x).unwrap();
        let back = denormalize(&normalize(&x, s), s);
        for (a, b) in x.iter().zip(&back) {
            worst = worst.max((a - b).abs() / a.abs().max(f64::MIN_POSITIVE));
        }
        // Insert NaNs between the observations; the visible values and
        // their order are unchanged.
        let mut holed = Vec::with_capacity(2 * len);
        for &v in &x {
            while rng.random_bool(0.3) {
                holed.push(f64::NAN);
            }
            holed.push(v);
        }
        let h = compute_visible_stats(&holed).unwrap();
        if h.mu.to_bits() == s.mu.to_bits() && h.sigma.to_bits() == s.sigma.to_bits() {
            stats_equal += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst <= 1e-6 && stats_equal == 1000 && secs <= 5.0,
        format!("max relative roundtrip error {worst:.2e} (tol 1e-6); NaN-inserted stats bit-identical {stats_equal}/1000; {secs:.2}s (limit 5s)"),
    )
}
