//! Newton–Schulz spectrum, parameter-group census, and bit-exact resume.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tsjoint::model::{ModelConfig, ModelParams};
use tsjoint::optim::{newton_schulz, param_groups, OptimConfig, NS_STEPS};
use tsjoint::pipeline::{run_steps, save_run, DataSources, RunConfig, RunState, StageConfig, Trainer};
use tsjoint::synth::SynthConfig;
use tsjoint::tensor::Tensor;
use tsjoint::tokenizer::BpeVocab;

use crate::Outcome;

fn spectrum() -> (usize, usize, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = Normal::new(0.0, 1.0).unwrap();
    let trials = 20;
    let (mut passed, mut lo, mut hi) = (0, f64::INFINITY, 0.0f64);
    for _ in 0..trials {
        let g: Vec<f64> = (0..64 * 64).map(|_| n.sample(&mut rng)).collect();
        let o = newton_schulz(&g, 64, 64, NS_STEPS).unwrap();
        let sv = DMatrix::from_row_slice(64, 64, &o).singular_values();
        let (mn, mx) = (sv.min(), sv.max());
        lo = lo.min(mn);
        hi = hi.max(mx);
        if mn >= 0.7 && mx <= 1.3 {
            passed += 1;
        }
    }
    (passed, trials, lo, hi)
}

fn census() -> bool {
    [true, false].into_iter().all(|tied| {
        let cfg = ModelConfig {
            tie_embeddings: tied,
            ..ModelConfig::default()
        };
        let shapes = ModelParams::<Tensor<f32>>::expected_shapes(&cfg);
        let groups = param_groups(&shapes, Clone::clone).unwrap();
        let all: BTreeSet<String> = shapes.names().into_iter().collect();
        let listed: Vec<&String> = groups.values().flatten().collect();
        let unique: BTreeSet<String> = listed.iter().map(|s| s.to_string()).collect();
        listed.len() == unique.len() && unique == all
    })
}

fn data() -> DataSources {
    let templates = [
        "The series rises with a seasonal pattern and noise.",
        "The series falls with noise.",
        "The series stays level with a seasonal pattern.",
    ];
    let tok = BpeVocab::train(templates, 300).unwrap();
    let docs: Vec<String> = (0..40)
        .map(|i| format!("Gauge {i} read {} units at hour {}.", (i * 37) % 101, i % 24))
        .collect();
    DataSources::new(SynthConfig::default(), 3).with_text(&docs, tok)
}

/// 20 updates, checkpoint, then 100 more from memory and from disk.
fn resume() -> (bool, u64) {
    let cfg = RunConfig {
        model: ModelConfig {
            vocab_size: 404,
            ..ModelConfig::default()
        },
        stage1: StageConfig {
            seq_len: 32,
            micro_batch: 4,
            text_prob: 0.5,
            total_steps: 80,
            ..StageConfig::stage1()
        },
        stage2: Some(StageConfig {
            seq_len: 48,
            micro_batch: 4,
            text_prob: 0.5,
            alignment_frac: 0.25,
            total_steps: 60,
            ..StageConfig::stage2()
        }),
        checkpoint_every: 0,
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    let mut t = Trainer::new(cfg.model.clone(), OptimConfig::default(), cfg.schedule(), 4).unwrap();
    let mut d = data();
    run_steps(&cfg, &mut t, &mut d, 20, &mut std::io::sink(), None).unwrap();
    save_run(&t, &d, 1, &path).unwrap();
    let a = run_steps(&cfg, &mut t, &mut d, 120, &mut std::io::sink(), None).unwrap();

    let (mut t2, extra) = Trainer::load(&path).unwrap();
    let st: RunState = serde_json::from_value(extra).unwrap();
    let mut d2 = data();
    d2.synth_next = st.synth_next;
    let b = run_steps(&cfg, &mut t2, &mut d2, 120, &mut std::io::sink(), None).unwrap();
    let same = a.len() == 100 && a == b && t.params == t2.params && t.step == t2.step;
    let bits = t
        .params
        .named()
        .iter()
        .zip(t2.params.named())
        .all(|((_, x), (_, y))| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    (same && bits, a.len() as u64)
}

pub fn run() -> Outcome {
    let (passed, trials, lo, hi) = spectrum();
    let ns_ok = passed == trials;
    let census_ok = census();
    let (resume_ok, n) = resume();
    Outcome::new(
        ns_ok && census_ok && resume_ok,
        format!(
            "Newton-Schulz ({NS_STEPS} steps) singular values in [0.7, 1.3] for {passed}/{trials} Gaussian 64x64 inputs, \
             observed range [{lo:.3}, {hi:.3}] [{}]; group census {} [{}]; resume over {n} further steps {} [{}]",
            if ns_ok { "ok" } else { "fail" },
            if census_ok { "covers every tensor once" } else { "incomplete" },
            if census_ok { "ok" } else { "fail" },
            if resume_ok { "bit-identical" } else { "diverged" },
            if resume_ok { "ok" } else { "fail" },
        ),
    )
}
