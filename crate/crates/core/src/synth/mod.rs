//! Online synthetic series: a bank of closed-form and random-feature kernels,
//! composed additively or with occasional multiplication.

mod augment;
mod kernels;
mod stream;

pub use augment::{augment_batch, jitter, mix, mixup, scale, scale_aug};
pub use kernels::{
    rbf_rff, rff_sum, time_grid, Category, KernelKind, KernelRanges, KernelSpec, Wave, ALL_KINDS, BANK,
};
pub use stream::{measure_throughput, SynthStream};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::RawSeries;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Inclusive.
    pub n_kernels: (usize, usize),
    pub additive_prob: f64,
    pub multiply_prob: f64,
    pub kernel_clip: f64,
    pub output_clip: f64,
    pub augment_prob: f64,
    /// Share of time-series batches drawn from the generator.
    pub synth_batch_prob: f64,
    /// Jitter σ as a fraction of the series std.
    pub jitter_frac: (f64, f64),
    pub scale_range: (f64, f64),
    pub ranges: KernelRanges,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_kernels: (2, 5),
            additive_prob: 0.8,
            multiply_prob: 0.4,
            kernel_clip: 5.0,
            output_clip: 1e7,
            augment_prob: 0.5,
            synth_batch_prob: 0.2,
            jitter_frac: (0.01, 0.1),
            scale_range: (0.5, 2.0),
            ranges: KernelRanges::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.n_kernels;
        if lo == 0 || lo > hi || hi > BANK.len() {
            return Err(Error::Config(format!("n_kernels range {lo}..={hi} is invalid")));
        }
        for (name, p) in [
            ("additive_prob", self.additive_prob),
            ("multiply_prob", self.multiply_prob),
            ("augment_prob", self.augment_prob),
            ("synth_batch_prob", self.synth_batch_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.ranges.rff_features == 0 {
            return Err(Error::Config("rff_features must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Additive,
    Mixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub values: Vec<f32>,
    pub kernels: Vec<KernelKind>,
    pub mode: Mode,
}

impl SynthSample {
    pub fn into_series(self, id: impl Into<String>) -> RawSeries {
        RawSeries {
            id: Some(id.into()),
            ..RawSeries::univariate(self.values.into_iter().map(f64::from).collect())
        }
    }
}

/// Maps NaN to 0 and clamps to `±bound`; infinities land on the bound.
pub fn clip(x: &mut [f64], bound: f64) {
    for v in x {
        *v = if v.is_nan() { 0.0 } else { v.clamp(-bound, bound) };
    }
}

/// Additive mode sums. Mixed mode starts from the first kernel and, per
/// later kernel, multiplies by it (shifted to `k − min(k) + 1`) with
/// probability `multiply_prob`, adding it otherwise.
pub fn compose(kernels: &[Vec<f64>], mode: Mode, multiply_prob: f64, rng: &mut impl Rng) -> Vec<f64> {
    let Some((first, rest)) = kernels.split_first() else {
        return Vec::new();
    };
    let mut x = first.clone();
    for k in rest {
        let multiply = mode == Mode::Mixed && rng.random_bool(multiply_prob);
        if multiply {
            let shift = 1.0 - k.iter().copied().fold(f64::INFINITY, f64::min);
            for (a, b) in x.iter_mut().zip(k) {
                *a *= b + shift;
            }
        } else {
            for (a, b) in x.iter_mut().zip(k) {
                *a += b;
            }
        }
    }
    x
}

fn finish(mut x: Vec<f64>, cfg: &SynthConfig) -> Vec<f32> {
    clip(&mut x, cfg.output_clip);
    x.into_iter().map(|v| v as f32).collect()
}

fn eval_clipped(spec: &KernelSpec, len: usize, cfg: &SynthConfig) -> Vec<f64> {
    let mut k = spec.eval(len);
    clip(&mut k, cfg.kernel_clip);
    k
}

/// RNG for series `index` of a stream seeded with `seed`.
pub fn series_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn sample_series(cfg: &SynthConfig, len: usize, rng: &mut ChaCha8Rng) -> Result<SynthSample> {
    if len < 2 {
        return Err(Error::Config(format!("synthetic length must be at least 2, got {len}")));
    }
    let (lo, hi) = cfg.n_kernels;
    let n = rng.random_range(lo..=hi);
    let kinds: Vec<KernelKind> = rand::seq::index::sample(rng, BANK.len(), n)
        .into_iter()
        .map(|i| BANK[i])
        .collect();
    let mode = if rng.random_bool(cfg.additive_prob) {
        Mode::Additive
    } else {
        Mode::Mixed
    };
    let parts: Vec<Vec<f64>> = kinds
        .iter()
        .map(|k| eval_clipped(&k.draw(len, &cfg.ranges, rng), len, cfg))
        .collect();
    let x = compose(&parts, mode, cfg.multiply_prob, rng);
    Ok(SynthSample {
        values: finish(x, cfg),
        kernels: kinds,
        mode,
    })
}

/// A series made of one explicitly chosen kernel, for fixtures.
pub fn sample_forced(cfg: &SynthConfig, kind: KernelKind, len: usize, rng: &mut ChaCha8Rng) -> Result<SynthSample> {
    let spec = kind.draw(len, &cfg.ranges, rng);
    sample_spec(cfg, &spec, len).map(|mut s| {
        s.kernels = vec![kind];
        s
    })
}

pub fn sample_spec(cfg: &SynthConfig, spec: &KernelSpec, len: usize) -> Result<SynthSample> {
    if len < 2 {
        return Err(Error::Config(format!("synthetic length must be at least 2, got {len}")));
    }
    Ok(SynthSample {
        values: finish(eval_clipped(spec, len, cfg), cfg),
        kernels: Vec::new(),
        mode: Mode::Additive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bounded_finite_and_mode_rate() {
        let cfg = SynthConfig::default();
        let n = 10_000;
        let mut additive = 0;
        let mut counts = [0usize; 6];
        for i in 0..n {
            let s = sample_series(&cfg, 64, &mut series_rng(7, i)).unwrap();
            assert!(s.values.iter().all(|v| v.is_finite() && v.abs() <= 1e7));
            additive += (s.mode == Mode::Additive) as usize;
            counts[s.kernels.len()] += 1;
            assert!((2..=5).contains(&s.kernels.len()));
        }
        let frac = additive as f64 / n as f64;
        assert!((frac - 0.8).abs() <= 0.02, "{frac}");
        for c in &counts[2..=5] {
            assert!((*c as f64 / n as f64 - 0.25).abs() < 0.03, "{counts:?}");
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let cfg = SynthConfig::default();
        for i in 0..50 {
            let a = sample_series(&cfg, 300, &mut series_rng(3, i)).unwrap();
            let b = sample_series(&cfg, 300, &mut series_rng(3, i)).unwrap();
            assert_eq!(a, b);
        }
        let a = sample_series(&cfg, 300, &mut series_rng(3, 0)).unwrap();
        let b = sample_series(&cfg, 300, &mut series_rng(4, 0)).unwrap();
        assert_ne!(a.values, b.values);
    }

    #[test]
    fn forced_linear_and_constant() {
        let cfg = SynthConfig::default();
        let s = sample_spec(&cfg, &KernelSpec::Linear { a: 1.0, b: 0.0 }, 100).unwrap();
        let t: Vec<f32> = time_grid(100).into_iter().map(|v| v as f32).collect();
        assert_eq!(s.values, t);
        let s = sample_forced(&cfg, KernelKind::Constant, 50, &mut series_rng(1, 0)).unwrap();
        assert!(s.values.iter().all(|&v| v == s.values[0]));
        assert!(sample_spec(&cfg, &KernelSpec::Constant { c: 1.0 }, 1).is_err());
    }

    #[test]
    fn log_trend_is_clipped_not_infinite() {
        let cfg = SynthConfig::default();
        let s = sample_spec(&cfg, &KernelSpec::Log { c: 1.0 }, 10).unwrap();
        assert_eq!(s.values[0], -5.0);
        let s = sample_spec(&cfg, &KernelSpec::Log { c: 0.0 }, 10).unwrap();
        assert_eq!(s.values[0], 0.0);
    }

    #[test]
    fn compose_examples() {
        let mut rng = series_rng(0, 0);
        let k = vec![vec![1.0, -2.0, 3.0]];
        assert_eq!(compose(&k, Mode::Additive, 0.4, &mut rng), k[0]);
        assert_eq!(compose(&k, Mode::Mixed, 0.4, &mut rng), k[0]);
        let two = vec![vec![1.5; 4], vec![-0.25; 4]];
        assert_eq!(compose(&two, Mode::Additive, 0.4, &mut rng), vec![1.25; 4]);
        // Always multiplying: the factor is shifted so its minimum is 1.
        let a = vec![2.0, -1.0, 0.5];
        let b = vec![-3.0, 0.0, 1.0];
        let got = compose(&[a.clone(), b.clone()], Mode::Mixed, 1.0, &mut rng);
        let shift = 1.0 - b.iter().copied().fold(f64::INFINITY, f64::min);
        for i in 0..3 {
            assert!(b[i] + shift >= 1.0);
            assert_eq!(got[i], a[i] * (b[i] + shift));
        }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        let bad = SynthConfig {
            n_kernels: (3, 2),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthConfig {
            additive_prob: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn any_seed_is_bounded(seed in any::<u64>(), len in 2usize..400) {
            let s = sample_series(&SynthConfig::default(), len, &mut series_rng(seed, 0)).unwrap();
            prop_assert_eq!(s.values.len(), len);
            prop_assert!(s.values.iter().all(|v| v.is_finite() && v.abs() <= 1e7));
        }
    }
}
