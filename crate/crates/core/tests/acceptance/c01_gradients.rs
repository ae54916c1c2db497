//! Analytic gradients of the full 2-layer, d=64 model on a mixed batch
//! against central finite differences in f64.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsjoint::model::{forward, ModelConfig};
use tsjoint::objectives::{combined_loss, lm_logits, masked_quantile_loss, quantile_head, LossWeights, QuantileGrid};
use tsjoint::optim::group_of;
use tsjoint::tensor::gradcheck::{grad_check, GradCheckOptions};
use tsjoint::tensor::Tensor;

use crate::common::{mixed_layout, noisy_params};
use crate::Outcome;

pub fn run() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        vocab_size: 512,
        ..ModelConfig::default()
    };
    assert_eq!((cfg.n_layers, cfg.d_model), (2, 64));
    let p = noisy_params(&cfg, 1, 0.1).cast::<f64>();
    let names = p.names();
    let flat: Vec<Tensor<f64>> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seqs = vec![mixed_layout(&cfg, &mut rng, 9), mixed_layout(&cfg, &mut rng, 9)];
    let seq = seqs[0].len();
    let mut text_rows = Vec::new();
    let mut patch_rows = Vec::new();
    for (b, s) in seqs.iter().enumerate() {
        text_rows.extend(s.text_positions().into_iter().map(|i| b * seq + i));
        patch_rows.extend(s.patch_positions().into_iter().map(|i| b * seq + i));
    }
    let targets: Vec<Option<usize>> = text_rows.iter().map(|&i| (i % 5 != 0).then_some((i * 37) % cfg.vocab_size)).collect();
    let y: Vec<f64> = (0..patch_rows.len() * cfg.patch_size).map(|i| (i as f64 * 0.37).sin()).collect();
    let z: Vec<f64> = (0..y.len()).map(|i| if i % 4 == 3 { 0.0 } else { 1.0 }).collect();
    let grid = QuantileGrid::uniform(cfg.n_quantiles).unwrap();
    let weights = LossWeights { text: 1.0, ts: 2.5 };
    let report = grad_check(
        |g, vars| {
            let mut it = vars.iter().copied();
            let pv = p.map(|_, _| it.next().unwrap());
            let h = forward(g, &pv, &cfg, &seqs)?;
            let logits = lm_logits(g, &pv, &cfg, h, Some(&text_rows))?;
            let ce = g.cross_entropy(logits, &targets, None)?;
            let q = quantile_head(g, &pv, &cfg, h, Some(&patch_rows))?;
            let ql = masked_quantile_loss(g, q, &y, &z, &grid)?;
            combined_loss(g, ce, ql, weights)
        },
        &flat,
        &GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            max_coords: Some(8),
            ..Default::default()
        },
    )
    .unwrap();
    let mut by_group: BTreeMap<String, f64> = BTreeMap::new();
    for r in &report.params {
        let g = format!("{:?}", group_of(&names[r.index]));
        let e = by_group.entry(g).or_insert(0.0);
        *e = e.max(r.max_rel_err);
    }
    let worst = report
        .params
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let groups: Vec<String> = by_group.iter().map(|(g, e)| format!("{g} {e:.1e}")).collect();
    Outcome::new(
        report.passed() && secs <= 60.0,
        format!(
            "{} tensors, max rel err {:.2e} at {} (tol 1e-4); per group: {}; {secs:.1}s (limit 60s)",
            report.params.len(),
            report.max_rel_err,
            names[worst.index],
            groups.join(", ")
        ),
    )
}
