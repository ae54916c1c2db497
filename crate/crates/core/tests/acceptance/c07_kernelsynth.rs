//! Generator conformance over 10,000 series and long-series throughput.

use tsjoint::synth::{measure_throughput, sample_series, series_rng, Mode, SynthConfig};

use crate::Outcome;

pub fn run() -> Outcome {
    let cfg = SynthConfig::default();
    let n = 10_000;
    let (mut finite, mut bounded, mut additive, mut counts_ok) = (0, 0, 0, 0);
    for i in 0..n {
        let s = sample_series(&cfg, 1024, &mut series_rng(7, i)).unwrap();
        finite += s.values.iter().all(|v| v.is_finite()) as usize;
        bounded += s.values.iter().all(|v| (v.abs() as f64) <= 1e7) as usize;
        additive += (s.mode == Mode::Additive) as usize;
        counts_ok += (2..=5).contains(&s.kernels.len()) as usize;
    }
    let frac = additive as f64 / n as f64;
    // Warm up once, then time.
    measure_throughput(&cfg, 32_768, 5, 99).unwrap();
    let ms = measure_throughput(&cfg, 32_768, 100, 100).unwrap();
    let ok = finite == n as usize
        && bounded == n as usize
        && (frac - 0.8).abs() <= 0.02
        && counts_ok == n as usize
        && ms <= 3.0;
    Outcome::new(
        ok,
        format!(
            "finite {finite}/{n}, |x|<=1e7 {bounded}/{n}, additive fraction {frac:.4} (0.80 ± 0.02), \
             kernel count in 2..=5 {counts_ok}/{n}; {ms:.2} ms/series at L=32768 (limit 3 ms)"
        ),
    )
}
