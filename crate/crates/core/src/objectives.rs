//! Output heads and training losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Graph, Real, Var};

/// Quantile levels spaced uniformly over `[0.05, 0.95]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileGrid {
    levels: Vec<f64>,
}

impl QuantileGrid {
    pub fn uniform(q: usize) -> Result<Self> {
        match q {
            0 => Err(Error::config("quantile grid needs at least one level")),
            1 => Ok(Self { levels: vec![0.5] }),
            _ => Ok(Self {
                levels: (0..q).map(|i| 0.05 + 0.9 * i as f64 / (q - 1) as f64).collect(),
            }),
        }
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Index of the 0.5 level (present for odd Q).
    pub fn median_index(&self) -> Option<usize> {
        self.levels.iter().position(|&t| (t - 0.5).abs() < 1e-12)
    }

    pub fn as_real<F: Real>(&self) -> Vec<F> {
        self.levels.iter().map(|&t| F::of(t)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub text: f64,
    pub ts: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { text: 1.0, ts: 2.5 }
    }
}

/// `max(τu, (τ−1)u)`.
pub fn pinball(tau: f64, u: f64) -> f64 {
    (tau * u).max((tau - 1.0) * u)
}

fn select_rows<F: Real>(g: &mut Graph<F>, hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
    match rows {
        Some(r) => g.gather_rows(hidden, r),
        None => Ok(hidden),
    }
}

/// Soft-capped vocabulary logits through the (tied) output head.
pub fn lm_logits<F: Real>(
    g: &mut Graph<F>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    hidden: Var,
    rows: Option<&[usize]>,
) -> Result<Var> {
    let h = select_rows(g, hidden, rows)?;
    let w = p.lm_head.unwrap_or(p.embed);
    let logits = g.linear(h, w)?;
    Ok(g.soft_cap(logits, F::of(cfg.softcap_alpha)))
}

/// RMSNorm then a bias-free projection to `P·Q` outputs per row, laid out
/// position-major (quantile index fastest).
pub fn quantile_head<F: Real>(
    g: &mut Graph<F>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    hidden: Var,
    rows: Option<&[usize]>,
) -> Result<Var> {
    let h = select_rows(g, hidden, rows)?;
    let n = g.rmsnorm(h, Some(p.qhead_norm), F::of(cfg.norm_eps))?;
    g.linear(n, p.qhead)
}

/// Mean next-token cross-entropy over rows with a target; zero if none.
pub fn lm_loss<F: Real>(g: &mut Graph<F>, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    g.cross_entropy(logits, targets, None)
}

/// `Σ z·ρ_τ(y − q̂) / (Q·Σz)`; zero if the mask is empty.
pub fn masked_quantile_loss<F: Real>(
    g: &mut Graph<F>,
    q_hat: Var,
    y: &[F],
    z: &[F],
    grid: &QuantileGrid,
) -> Result<Var> {
    g.quantile_loss(q_hat, y, z, &grid.as_real())
}

pub fn combined_loss<F: Real>(g: &mut Graph<F>, ce: Var, ql: Var, w: LossWeights) -> Result<Var> {
    let a = g.scale(ce, F::of(w.text));
    let b = g.scale(ql, F::of(w.ts));
    g.add(a, b)
}

/// Inverse-frequency class weights normalized to sum to the class count.
pub fn class_balanced_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::config("no classes"));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("class {c} has no training examples")));
    }
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    let s: f64 = inv.iter().sum();
    let k = counts.len() as f64;
    Ok(inv.iter().map(|w| w * k / s).collect())
}
