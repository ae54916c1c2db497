use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

/// Row of the generator table. Several kinds may share one row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    RbfSmooth,
    Periodic,
    PeriodicHarmonics,
    RationalQuadratic,
    LinearTrend,
    Polynomial,
    LogTrend,
    RandomWalk,
    LevelShifts,
    DiscreteWaves,
    DampedOscillation,
    WhiteNoise,
    HeteroskedasticNoise,
    PeriodicNoise,
    StepFunction,
    Exponential,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KernelKind {
    RbfShort,
    RbfLong,
    PeriodicShort,
    PeriodicLong,
    PeriodicHarmonics,
    RationalQuadratic,
    Linear,
    Polynomial,
    Log,
    RandomWalk,
    LevelShifts,
    SquareWave,
    SawtoothWave,
    TriangleWave,
    Damped,
    WhiteNoise,
    HeteroskedasticNoise,
    PeriodicNoise,
    Step,
    Exponential,
    Constant,
}

pub const ALL_KINDS: [KernelKind; 21] = {
    use KernelKind::*;
    [
        RbfShort,
        RbfLong,
        PeriodicShort,
        PeriodicLong,
        PeriodicHarmonics,
        RationalQuadratic,
        Linear,
        Polynomial,
        Log,
        RandomWalk,
        LevelShifts,
        SquareWave,
        SawtoothWave,
        TriangleWave,
        Damped,
        WhiteNoise,
        HeteroskedasticNoise,
        PeriodicNoise,
        Step,
        Exponential,
        Constant,
    ]
};

/// The 33-entry bank; duplicates raise sampling weight.
pub const BANK: [KernelKind; 33] = {
    use KernelKind::*;
    [
        RbfShort,
        RbfShort,
        RbfShort,
        RbfLong,
        RbfLong,
        PeriodicShort,
        PeriodicShort,
        PeriodicShort,
        PeriodicLong,
        PeriodicLong,
        PeriodicHarmonics,
        RationalQuadratic,
        RationalQuadratic,
        Linear,
        Polynomial,
        Polynomial,
        Log,
        RandomWalk,
        RandomWalk,
        LevelShifts,
        SquareWave,
        SawtoothWave,
        TriangleWave,
        Damped,
        Damped,
        WhiteNoise,
        WhiteNoise,
        WhiteNoise,
        HeteroskedasticNoise,
        PeriodicNoise,
        Step,
        Exponential,
        Constant,
    ]
};

impl KernelKind {
    pub fn category(self) -> Category {
        use KernelKind::*;
        match self {
            RbfShort | RbfLong => Category::RbfSmooth,
            PeriodicShort | PeriodicLong => Category::Periodic,
            PeriodicHarmonics => Category::PeriodicHarmonics,
            RationalQuadratic => Category::RationalQuadratic,
            Linear => Category::LinearTrend,
            Polynomial => Category::Polynomial,
            Log => Category::LogTrend,
            RandomWalk => Category::RandomWalk,
            LevelShifts => Category::LevelShifts,
            SquareWave | SawtoothWave | TriangleWave => Category::DiscreteWaves,
            Damped => Category::DampedOscillation,
            WhiteNoise => Category::WhiteNoise,
            HeteroskedasticNoise => Category::HeteroskedasticNoise,
            PeriodicNoise => Category::PeriodicNoise,
            Step => Category::StepFunction,
            Exponential => Category::Exponential,
            Constant => Category::Constant,
        }
    }

    pub fn name(self) -> &'static str {
        use KernelKind::*;
        match self {
            RbfShort => "rbf_short",
            RbfLong => "rbf_long",
            PeriodicShort => "periodic_short",
            PeriodicLong => "periodic_long",
            PeriodicHarmonics => "periodic_harmonics",
            RationalQuadratic => "rational_quadratic",
            Linear => "linear",
            Polynomial => "polynomial",
            Log => "log",
            RandomWalk => "random_walk",
            LevelShifts => "level_shifts",
            SquareWave => "square_wave",
            SawtoothWave => "sawtooth_wave",
            TriangleWave => "triangle_wave",
            Damped => "damped",
            WhiteNoise => "white_noise",
            HeteroskedasticNoise => "heteroskedastic_noise",
            PeriodicNoise => "periodic_noise",
            Step => "step",
            Exponential => "exponential",
            Constant => "constant",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        ALL_KINDS
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown kernel {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wave {
    Square,
    Sawtooth,
    Triangle,
}

/// Ranges for kernel parameters the generator table leaves open.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct KernelRanges {
    pub rbf_short: (f64, f64),
    pub rbf_long: (f64, f64),
    pub period_short: (f64, f64),
    pub period_long: (f64, f64),
    pub rq_alpha: (f64, f64),
    pub rff_features: usize,
}

impl Default for KernelRanges {
    fn default() -> Self {
        Self {
            rbf_short: (0.01, 0.1),
            rbf_long: (0.1, 1.0),
            period_short: (0.02, 0.1),
            period_long: (0.1, 0.5),
            rq_alpha: (0.5, 5.0),
            rff_features: 32,
        }
    }
}

/// A fully parameterized kernel; evaluating it is deterministic.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelSpec {
    /// `(1/R) Σ cos(ω_r t + φ_r)`.
    Rff { omegas: Vec<f64>, phases: Vec<f64> },
    /// `Σ_h A_h sin(2π h t / p + φ_h)`.
    Sines { period: f64, amps: Vec<f64>, phases: Vec<f64> },
    Linear { a: f64, b: f64 },
    /// Highest degree first.
    Polynomial { coeffs: Vec<f64> },
    Log { c: f64 },
    RandomWalk { drift: f64, sigma: f64, seed: u64 },
    LevelShifts { at: Vec<usize>, sizes: Vec<f64> },
    Wave { wave: Wave, period: f64, amp: f64, phase: f64, offset: f64 },
    Damped { amp: f64, gamma: f64, period: f64, phase: f64 },
    WhiteNoise { sigma: f64, seed: u64 },
    Heteroskedastic { sigma: f64, envelope: Box<KernelSpec>, seed: u64 },
    PeriodicNoise { amp: f64, period: f64, phase: f64, seed: u64 },
    Step { breaks: Vec<usize>, levels: Vec<f64> },
    Exponential { r: f64 },
    Constant { c: f64 },
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..hi)
}

fn draw_rff(rng: &mut ChaCha8Rng, ell: f64, r: usize, gamma_alpha: Option<f64>) -> KernelSpec {
    let gamma = gamma_alpha.map(|a| Gamma::new(a, 1.0 / a).expect("positive shape"));
    let omegas = (0..r)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            let s = gamma.as_ref().map_or(1.0, |g| g.sample(rng));
            s * z / ell
        })
        .collect();
    let phases = (0..r).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    KernelSpec::Rff { omegas, phases }
}

/// One draw of the RBF kernel through `r` random Fourier features.
pub fn rbf_rff(len: usize, length_scale: f64, r: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    draw_rff(rng, length_scale, r, None).eval(len)
}

impl KernelKind {
    pub fn draw(self, len: usize, ranges: &KernelRanges, rng: &mut ChaCha8Rng) -> KernelSpec {
        use KernelKind::*;
        let r = ranges.rff_features;
        match self {
            RbfShort => {
                let ell = uniform(rng, ranges.rbf_short);
                draw_rff(rng, ell, r, None)
            }
            RbfLong => {
                let ell = uniform(rng, ranges.rbf_long);
                draw_rff(rng, ell, r, None)
            }
            RationalQuadratic => {
                let ell = uniform(rng, (ranges.rbf_short.0, ranges.rbf_long.1));
                let alpha = uniform(rng, ranges.rq_alpha);
                draw_rff(rng, ell, r, Some(alpha))
            }
            PeriodicShort | PeriodicLong | PeriodicHarmonics => {
                let range = if self == PeriodicLong {
                    ranges.period_long
                } else {
                    ranges.period_short
                };
                let period = uniform(rng, range);
                let a = rng.random_range(0.5..2.0);
                let n = if self == PeriodicHarmonics { 3 } else { 1 };
                KernelSpec::Sines {
                    period,
                    amps: (1..=n).map(|h| a / h as f64).collect(),
                    phases: (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
                }
            }
            Linear => KernelSpec::Linear {
                a: rng.random_range(-3.0..3.0),
                b: rng.random_range(-1.0..1.0),
            },
            Polynomial => {
                let degree = rng.random_range(2..=4);
                KernelSpec::Polynomial {
                    coeffs: (0..=degree).map(|_| rng.random_range(-2.0..2.0)).collect(),
                }
            }
            Log => KernelSpec::Log {
                c: rng.random_range(-2.0..2.0),
            },
            RandomWalk => KernelSpec::RandomWalk {
                drift: rng.random_range(-0.01..0.01),
                sigma: rng.random_range(0.5..2.0) / (len.max(1) as f64).sqrt(),
                seed: rng.random(),
            },
            LevelShifts => {
                let n = rng.random_range(1..=3);
                let lo = len / 10;
                let hi = (len * 9 / 10).max(lo + 1);
                let mut at: Vec<usize> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
                at.sort_unstable();
                let sizes = (0..n)
                    .map(|_| {
                        let m = rng.random_range(0.5..2.0);
                        if rng.random_bool(0.5) { m } else { -m }
                    })
                    .collect();
                KernelSpec::LevelShifts { at, sizes }
            }
            SquareWave | SawtoothWave | TriangleWave => KernelSpec::Wave {
                wave: match self {
                    SquareWave => Wave::Square,
                    SawtoothWave => Wave::Sawtooth,
                    _ => Wave::Triangle,
                },
                period: rng.random_range(0.05..0.40),
                amp: rng.random_range(0.5..2.0),
                phase: rng.random_range(0.0..1.0),
                offset: rng.random_range(-1.0..1.0),
            },
            Damped => KernelSpec::Damped {
                amp: rng.random_range(0.5..2.0),
                gamma: rng.random_range(1.0..8.0),
                period: uniform(rng, (ranges.period_short.0, ranges.period_long.1)),
                phase: rng.random_range(0.0..2.0 * PI),
            },
            WhiteNoise => KernelSpec::WhiteNoise {
                sigma: rng.random_range(0.1..1.0),
                seed: rng.random(),
            },
            HeteroskedasticNoise => {
                let sigma = rng.random_range(0.1..1.0);
                let ell = uniform(rng, ranges.rbf_long);
                let envelope = Box::new(draw_rff(rng, ell, r, None));
                KernelSpec::Heteroskedastic {
                    sigma,
                    envelope,
                    seed: rng.random(),
                }
            }
            PeriodicNoise => KernelSpec::PeriodicNoise {
                amp: rng.random_range(0.5..2.0),
                period: uniform(rng, (ranges.period_short.0, ranges.period_long.1)),
                phase: rng.random_range(0.0..2.0 * PI),
                seed: rng.random(),
            },
            Step => {
                let segments = rng.random_range(3..=11).min(len.max(1));
                let mut breaks: Vec<usize> = Vec::new();
                if len > 1 {
                    let picks = rand::seq::index::sample(rng, len - 1, segments - 1);
                    breaks = picks.into_iter().map(|i| i + 1).collect();
                    breaks.sort_unstable();
                }
                let levels = (0..=breaks.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
                KernelSpec::Step { breaks, levels }
            }
            Exponential => KernelSpec::Exponential {
                r: rng.random_range(-3.0..3.0),
            },
            Constant => KernelSpec::Constant {
                c: rng.random_range(-2.0..2.0),
            },
        }
    }
}

/// `linspace(0, 1, len)`.
pub fn time_grid(len: usize) -> Vec<f64> {
    let d = if len > 1 { 1.0 / (len - 1) as f64 } else { 0.0 };
    (0..len).map(|i| i as f64 * d).collect()
}

const ANCHOR: usize = 64;

/// `(1/R) Σ cos(ω_r t_i + φ_r)` on the uniform grid.
pub fn rff_sum(len: usize, omegas: &[f64], phases: &[f64]) -> Vec<f64> {
    let w = vec![1.0 / omegas.len().max(1) as f64; omegas.len()];
    cos_sum(len, omegas, phases, &w)
}

const BLOCK: usize = 128;

/// `cos(θ j)`, `sin(θ j)` for `j < n` by complex rotation, re-anchored
/// with exact `sin`/`cos` every `ANCHOR` steps to bound rounding drift.
fn rotations(theta: f64, n: usize, c: &mut Vec<f64>, s: &mut Vec<f64>) {
    c.clear();
    s.clear();
    let (rs, rc) = theta.sin_cos();
    let (mut zc, mut zs) = (1.0, 0.0);
    for j in 0..n {
        if j % ANCHOR == 0 {
            (zs, zc) = (theta * j as f64).sin_cos();
        }
        c.push(zc);
        s.push(zs);
        (zc, zs) = (zc * rc - zs * rs, zc * rs + zs * rc);
    }
}

/// `Σ w_k cos(ω_k t_i + φ_k)` on the uniform grid. Time is cut into
/// blocks; each term is a block anchor rotated by a per-term table, so the
/// inner loop is a plain multiply-add over contiguous samples.
pub fn cos_sum(len: usize, omegas: &[f64], phases: &[f64], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let dt = if len > 1 { 1.0 / (len - 1) as f64 } else { 0.0 };
    let n = BLOCK.min(len);
    let blocks = len.div_ceil(BLOCK);
    let (mut c, mut s) = (Vec::new(), Vec::new());
    // Per term: rotation tables within a block and anchors w·e^{i(ω t_b + φ)}.
    let mut tables = Vec::with_capacity(omegas.len());
    for ((&om, &ph), &w) in omegas.iter().zip(phases).zip(weights) {
        rotations(om * dt, n, &mut c, &mut s);
        let (ec, es) = (c.clone(), s.clone());
        rotations(om * dt * BLOCK as f64, blocks, &mut c, &mut s);
        let (pc, ps) = (w * ph.cos(), w * ph.sin());
        let anchors: Vec<(f64, f64)> = c
            .iter()
            .zip(&s)
            .map(|(ac, as_)| (pc * ac - ps * as_, pc * as_ + ps * ac))
            .collect();
        tables.push((ec, es, anchors));
    }
    for (b, chunk) in out.chunks_mut(BLOCK).enumerate() {
        for (ec, es, anchors) in &tables {
            let (c0, s0) = anchors[b];
            for ((o, c), s) in chunk.iter_mut().zip(ec).zip(es) {
                *o += c0 * c - s0 * s;
            }
        }
    }
    out
}

/// `sin(2π t / period + phase)` on the uniform grid.
fn sine(len: usize, period: f64, phase: f64) -> Vec<f64> {
    cos_sum(len, &[2.0 * PI / period], &[phase - PI / 2.0], &[1.0])
}

fn wave(w: Wave, x: f64) -> f64 {
    let f = x - x.floor();
    match w {
        Wave::Square => {
            if f < 0.5 {
                1.0
            } else {
                -1.0
            }
        }
        Wave::Sawtooth => 2.0 * f - 1.0,
        Wave::Triangle => 1.0 - 4.0 * (f - 0.5).abs(),
    }
}

fn normals(seed: u64, len: usize) -> impl Iterator<Item = f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(move |_| StandardNormal.sample(&mut rng))
}

impl KernelSpec {
    pub fn eval(&self, len: usize) -> Vec<f64> {
        let t = || time_grid(len);
        match self {
            KernelSpec::Rff { omegas, phases } => rff_sum(len, omegas, phases),
            KernelSpec::Sines { period, amps, phases } => {
                let om: Vec<f64> = (1..=amps.len()).map(|h| 2.0 * PI * h as f64 / period).collect();
                let ph: Vec<f64> = phases.iter().map(|p| p - PI / 2.0).collect();
                cos_sum(len, &om, &ph, amps)
            }
            KernelSpec::Linear { a, b } => t().into_iter().map(|x| a * x + b).collect(),
            KernelSpec::Polynomial { coeffs } => t()
                .into_iter()
                .map(|x| coeffs.iter().fold(0.0, |acc, c| acc * x + c))
                .collect(),
            KernelSpec::Log { c } => t().into_iter().map(|x| c * x.ln()).collect(),
            KernelSpec::RandomWalk { drift, sigma, seed } => {
                let mut acc = 0.0;
                normals(*seed, len)
                    .map(|z| {
                        acc += drift + sigma * z;
                        acc
                    })
                    .collect()
            }
            KernelSpec::LevelShifts { at, sizes } => (0..len)
                .map(|i| at.iter().zip(sizes).filter(|(&a, _)| i >= a).map(|(_, s)| s).sum())
                .collect(),
            KernelSpec::Wave {
                wave: w,
                period,
                amp,
                phase,
                offset,
            } => t()
                .into_iter()
                .map(|x| amp * wave(*w, x / period + phase) + offset)
                .collect(),
            KernelSpec::Damped {
                amp,
                gamma,
                period,
                phase,
            } => t()
                .into_iter()
                .zip(sine(len, *period, *phase))
                .map(|(x, s)| amp * (-gamma * x).exp() * s)
                .collect(),
            KernelSpec::WhiteNoise { sigma, seed } => normals(*seed, len).map(|z| sigma * z).collect(),
            KernelSpec::Heteroskedastic { sigma, envelope, seed } => envelope
                .eval(len)
                .into_iter()
                .zip(normals(*seed, len))
                .map(|(k, z)| sigma * (0.5 * k).exp() * z)
                .collect(),
            KernelSpec::PeriodicNoise {
                amp,
                period,
                phase,
                seed,
            } => sine(len, *period, *phase)
                .into_iter()
                .zip(normals(*seed, len))
                .map(|(s, z)| 0.3 * z * (1.0 + amp * (s * 0.5 + 0.5)))
                .collect(),
            KernelSpec::Step { breaks, levels } => {
                let mut out = Vec::with_capacity(len);
                let mut seg = 0;
                for i in 0..len {
                    while seg < breaks.len() && i >= breaks[seg] {
                        seg += 1;
                    }
                    out.push(levels[seg]);
                }
                out
            }
            KernelSpec::Exponential { r } => t().into_iter().map(|x| (r * x).exp() - 1.0).collect(),
            KernelSpec::Constant { c } => vec![*c; len],
        }
    }
}
