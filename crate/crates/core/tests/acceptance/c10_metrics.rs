//! Metric identities and their reconciliation with the training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsjoint::metrics::{mase, seasonal_naive, wql, MetricReport};
use tsjoint::objectives::{class_balanced_weights, masked_quantile_loss, QuantileGrid};
use tsjoint::tensor::{Graph, Tensor};

use crate::Outcome;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let grid = QuantileGrid::uniform(9).unwrap();
    let q = grid.len();

    let mut self_report = MetricReport::new("mase");
    let mut scale_err = 0.0f64;
    let mut recon_err = 0.0f64;
    for task in 0..20 {
        let m = [1, 4, 7, 12][task % 4];
        let n = rng.random_range(30..80);
        let h = rng.random_range(1..20);
        let ctx: Vec<f64> = (0..n).map(|t| (t as f64 * 0.5).sin() * 5.0 + rng.random_range(0.0..2.0) + 3.0).collect();
        let y: Vec<f64> = (0..h).map(|_| rng.random_range(-4.0..9.0)).collect();
        let point: Vec<f64> = (0..h).map(|_| rng.random_range(-4.0..9.0)).collect();
        let quant: Vec<Vec<f64>> = (0..h)
            .map(|_| {
                let mut r: Vec<f64> = (0..q).map(|_| rng.random_range(-5.0..10.0)).collect();
                r.sort_by(f64::total_cmp);
                r
            })
            .collect();
        let naive = seasonal_naive(&ctx, m, h).unwrap();
        let b = mase(&naive, &y, &ctx, m);
        let b2 = mase(&naive, &y, &ctx, m);
        self_report.push(format!("t{task}"), b, b2).unwrap();

        let base_mase = mase(&point, &y, &ctx, m).unwrap();
        let base_wql = wql(&quant, &y, grid.levels()).unwrap();
        for lam in [1e-3, 7.0, 1e4] {
            let s = |v: &[f64]| v.iter().map(|x| x * lam).collect::<Vec<_>>();
            let sq: Vec<Vec<f64>> = quant.iter().map(|r| s(r)).collect();
            scale_err = scale_err.max(rel(mase(&s(&point), &s(&y), &s(&ctx), m).unwrap(), base_mase));
            scale_err = scale_err.max(rel(wql(&sq, &s(&y), grid.levels()).unwrap(), base_wql));
        }

        // Training loss on the same fixture: one patch position per step
        // (P = 1) and an all-ones mask gives Σρ / (Q·T).
        let mut g = Graph::<f64>::new();
        let pred = g.constant(Tensor::new(vec![h, q], quant.concat()).unwrap());
        let ql = masked_quantile_loss(&mut g, pred, &y, &vec![1.0; h], &grid).unwrap();
        let ql = g.value(ql).data()[0];
        let abs_sum: f64 = y.iter().map(|v| v.abs()).sum();
        recon_err = recon_err.max(rel(base_wql, 2.0 * ql * h as f64 / abs_sum));
    }
    let gm = self_report.geomean.unwrap();
    let w = class_balanced_weights(&[3, 1]).unwrap();
    let ok = gm == 1.0 && scale_err <= 1e-12 && recon_err <= 1e-12 && w == vec![0.5, 1.5];
    Outcome::new(
        ok,
        format!(
            "self-standardized geomean {gm}; scale invariance max rel err {scale_err:.1e}; \
             WQL vs 2·QL·T/Σ|y| max rel err {recon_err:.1e} (tol 1e-12); class weights [3,1] -> {w:?}"
        ),
    )
}
