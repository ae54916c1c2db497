//! Desk-scale learning: text memorization, forecasting on a held-out
//! seasonal set after synthetic-only training, and joint 92/8 training.

use rand::Rng;
use tsjoint::codec::compute_visible_stats;
use tsjoint::inference::{ForecastRequest, Forecaster};
use tsjoint::metrics::{mase, seasonal_naive, wql, MetricReport};
use tsjoint::model::{init_params, ModelConfig, ModelParams};
use tsjoint::objectives::LossWeights;
use tsjoint::optim::OptimConfig;
use tsjoint::pipeline::{eval_text_ce, sample_modality, DataSources, Modality, RunConfig, StageConfig, TextCorpus, Trainer};
use tsjoint::synth::{series_rng, KernelKind, KernelRanges, KernelSpec, SynthConfig};
use tsjoint::tensor::Tensor;
use tsjoint::tokenizer::BpeVocab;

use crate::Outcome;

const SENTENCES: [&str; 50] = [
    "The river rose slowly after three days of rain.",
    "A quiet market opened before the sun came up.",
    "Electricity demand peaks on cold winter evenings.",
    "The old clock in the hall stopped at noon.",
    "Traffic on the bridge doubles during the morning rush.",
    "She planted tomatoes along the southern fence.",
    "Hourly sensor readings drift when the battery runs low.",
    "Sales of umbrellas jump whenever storms are forecast.",
    "The train to the coast leaves every forty minutes.",
    "A heron waited patiently at the edge of the pond.",
    "Weekly website visits fall sharply over the holidays.",
    "The bakery sells out of bread by ten o'clock.",
    "Snow covered the mountain pass for most of March.",
    "The pump cycles on and off twice each hour.",
    "Children crowded the library after school let out.",
    "Wind speed at the harbor follows the daily tide.",
    "The committee met to review the quarterly budget.",
    "Solar output drops to zero soon after sunset.",
    "A stray cat slept on the warm engine of the truck.",
    "Monthly rainfall totals vary widely across the valley.",
    "The lighthouse beam sweeps the bay every twelve seconds.",
    "Prices at the fuel station changed three times today.",
    "The orchestra tuned their instruments in the dim hall.",
    "Hospital admissions climb during the influenza season.",
    "He repaired the fence with wire and two wooden posts.",
    "Water temperature in the lake lags the air by weeks.",
    "The server logs show a spike of errors at midnight.",
    "Bees returned to the hive as the light faded.",
    "Ridership on the night bus is steady all year.",
    "The farmer checked the soil moisture every morning.",
    "Ticket sales surged after the first glowing review.",
    "A thin fog settled over the fields before dawn.",
    "The thermostat holds the room near twenty degrees.",
    "Gulls followed the fishing boat back to the pier.",
    "Call volume at the help desk halves on weekends.",
    "The museum added a new wing for modern sculpture.",
    "Heart rate rises quickly at the start of a sprint.",
    "The baker kneads dough long before the shop opens.",
    "Retail footfall is highest on the last Saturday of each month.",
    "An owl called twice from the dark pine forest.",
    "The factory line pauses for maintenance every Sunday.",
    "Pollen counts are worst in late spring afternoons.",
    "The ferry was delayed by a sudden summer squall.",
    "Network traffic doubles when the evening films begin.",
    "Her notebook was full of sketches of the harbor.",
    "Grain prices settled after a volatile autumn.",
    "The streetlights flicker on at exactly six o'clock.",
    "Visitors to the park peak on warm Sunday afternoons.",
    "The glacier retreats a little further every summer.",
    "A final bell signalled the end of the long day.",
];

const SEQ_LEN: usize = 32;
const MICRO_BATCH: usize = 8;
const STEPS: u64 = 2000;
const TEXT_PROB: f64 = 0.92;

fn model_cfg(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        ..ModelConfig::default()
    }
}

fn run_cfg(model: &ModelConfig, text_prob: f64, total: u64) -> RunConfig {
    RunConfig {
        seed: 11,
        model: model.clone(),
        stage1: StageConfig {
            seq_len: SEQ_LEN,
            micro_batch: MICRO_BATCH,
            text_prob,
            total_steps: total,
            ..StageConfig::stage1()
        },
        stage2: None,
        ..RunConfig::default()
    }
}

fn data(tok: Option<&BpeVocab>) -> DataSources {
    let mut d = DataSources::new(SynthConfig::default(), 77);
    d.prefetch = true;
    match tok {
        Some(t) => d.with_text(&SENTENCES, t.clone()),
        None => d,
    }
}

struct Seasonal {
    context: Vec<f64>,
    future: Vec<f64>,
    period: usize,
}

/// Held-out generator draws with strong seasonal structure: one periodic
/// kernel (single or harmonic) plus a linear trend and white noise, each
/// drawn from the generator's own ranges on unseen seeds. The period is set
/// to a whole number of steps so seasonal naive repeats exactly one cycle.
fn seasonal_set(n: usize, horizon: usize, seed: u64) -> Vec<Seasonal> {
    let ranges = KernelRanges::default();
    let ctx = SEQ_LEN * 8;
    let len = ctx + horizon;
    (0..n)
        .map(|i| {
            let mut rng = series_rng(seed, i as u64);
            let period = rng.random_range(8..=28usize);
            let kind = if i % 2 == 0 {
                KernelKind::PeriodicShort
            } else {
                KernelKind::PeriodicHarmonics
            };
            let mut seasonal = kind.draw(len, &ranges, &mut rng);
            if let KernelSpec::Sines { period: p, .. } = &mut seasonal {
                *p = period as f64 / (len - 1) as f64;
            }
            let parts = [
                seasonal,
                KernelKind::Linear.draw(len, &ranges, &mut rng),
                KernelKind::WhiteNoise.draw(len, &ranges, &mut rng),
            ];
            let mut x = vec![0.0; len];
            for part in &parts {
                for (a, b) in x.iter_mut().zip(part.eval(len)) {
                    *a += b;
                }
            }
            Seasonal {
                context: x[..ctx].to_vec(),
                future: x[ctx..].to_vec(),
                period,
            }
        })
        .collect()
}

struct TsScore {
    /// Geometric mean of model MASE over seasonal-naive MASE.
    mase_ratio: f64,
    /// Geometric mean of model WQL over zero-model WQL.
    wql_ratio: f64,
}

fn eval_ts(params: &ModelParams<Tensor<f32>>, cfg: &ModelConfig, set: &[Seasonal]) -> TsScore {
    let f = Forecaster::new(params, cfg).unwrap();
    let zero_params = init_params(cfg, 0).unwrap();
    let zero = Forecaster::new(&zero_params, cfg).unwrap();
    let mut m = MetricReport::new("mase");
    let mut w = MetricReport::new("wql");
    for (i, s) in set.iter().enumerate() {
        let req = ForecastRequest {
            context: s.context.clone(),
            horizon: s.future.len(),
            text: None,
        };
        let r = f.forecast(&req).unwrap();
        let r0 = zero.forecast(&req).unwrap();
        let naive = seasonal_naive(&s.context, s.period, s.future.len()).unwrap();
        m.push(
            format!("s{i}"),
            mase(&r.median, &s.future, &s.context, s.period),
            mase(&naive, &s.future, &s.context, s.period),
        )
        .unwrap();
        w.push(
            format!("s{i}"),
            wql(&r.quantiles, &s.future, &r.levels),
            wql(&r0.quantiles, &s.future, &r0.levels),
        )
        .unwrap();
        // The zero model forecasts the context mean everywhere.
        let mu = compute_visible_stats(&s.context).unwrap().mu;
        assert!(r0.median.iter().all(|v| (v - mu).abs() < 1e-9 * (1.0 + mu.abs())));
    }
    TsScore {
        mase_ratio: m.geomean.unwrap(),
        wql_ratio: w.geomean.unwrap(),
    }
}

/// Trains on text only, checking the whole-corpus CE every 100 steps.
fn text_only(cfg: &ModelConfig, tok: &BpeVocab, corpus: &TextCorpus) -> (f64, u64) {
    let rc = run_cfg(cfg, 1.0, STEPS);
    let mut tr = Trainer::new(cfg.clone(), OptimConfig::default(), rc.schedule(), rc.seed).unwrap();
    let mut d = data(Some(tok));
    let mut ce = f64::INFINITY;
    while tr.step < STEPS {
        let next = tr.step + 100;
        tsjoint::pipeline::run_steps(&rc, &mut tr, &mut d, next, &mut std::io::sink(), None).unwrap();
        ce = eval_text_ce(&tr.params, cfg, corpus, SEQ_LEN).unwrap();
        if ce < 0.1 {
            break;
        }
    }
    (ce, tr.step)
}

fn ts_only(cfg: &ModelConfig) -> Trainer {
    let rc = run_cfg(cfg, 0.0, STEPS);
    let mut tr = Trainer::new(cfg.clone(), OptimConfig::default(), rc.schedule(), rc.seed).unwrap();
    let mut d = data(None);
    tsjoint::pipeline::run_steps(&rc, &mut tr, &mut d, STEPS, &mut std::io::sink(), None).unwrap();
    tr
}

/// 92/8 sampling until the series side has had as many updates as the
/// series-only run.
fn joint(cfg: &ModelConfig, tok: &BpeVocab) -> (Trainer, u64, u64) {
    let total = (STEPS as f64 / (1.0 - TEXT_PROB)).round() as u64;
    let rc = run_cfg(cfg, TEXT_PROB, total);
    let stage = rc.stage1.clone();
    let mut tr = Trainer::new(cfg.clone(), OptimConfig::default(), rc.schedule(), rc.seed).unwrap();
    let mut d = data(Some(tok));
    let (mut n_text, mut n_ts) = (0u64, 0u64);
    while n_ts < STEPS && tr.step < total {
        let modality = sample_modality(&mut tr.rng, TEXT_PROB);
        let b = d.batch(modality, &stage, cfg.patch_size, &mut tr.rng).unwrap();
        if tr.train_step(&b, LossWeights::default()).unwrap().is_some() {
            match modality {
                Modality::Text => n_text += 1,
                Modality::Ts => n_ts += 1,
            }
        }
    }
    (tr, n_text, n_ts)
}

pub fn run() -> Outcome {
    let tok = BpeVocab::train(SENTENCES, 512).unwrap();
    let cfg = model_cfg(tok.vocab_size());
    let corpus = TextCorpus::new(&SENTENCES, &tok);
    let set = seasonal_set(60, 24, 4242);

    let (ce_a, steps_a) = text_only(&cfg, &tok, &corpus);
    let pass_a = ce_a < 0.1;

    let tr_b = ts_only(&cfg);
    let b = eval_ts(&tr_b.params, &cfg, &set);
    let pass_b = b.mase_ratio < 1.0 && b.wql_ratio <= 0.7;

    let (tr_c, n_text, n_ts) = joint(&cfg, &tok);
    let ce_c = eval_text_ce(&tr_c.params, &cfg, &corpus, SEQ_LEN).unwrap();
    let c = eval_ts(&tr_c.params, &cfg, &set);
    let worse = |joint: f64, solo: f64| joint <= 1.2 * solo;
    let pass_c = worse(ce_c, ce_a.max(f64::MIN_POSITIVE)) && worse(c.mase_ratio, b.mase_ratio) && worse(c.wql_ratio, b.wql_ratio);

    Outcome::new(
        pass_a && pass_b && pass_c,
        format!(
            "(a) text CE {ce_a:.4} after {steps_a} steps [{}]; \
             (b) MASE/naive {:.3}, WQL/zero {:.3} [{}]; \
             (c) joint {n_text} text + {n_ts} series steps: CE {ce_c:.4}, MASE/naive {:.3}, WQL/zero {:.3} [{}]",
            if pass_a { "ok" } else { "fail" },
            b.mase_ratio,
            b.wql_ratio,
            if pass_b { "ok" } else { "fail" },
            c.mase_ratio,
            c.wql_ratio,
            if pass_c { "ok" } else { "fail" },
        ),
    )
}
