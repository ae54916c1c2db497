//! Muon for block matrices, AdamW for everything else, and the
//! warmup / constant / linear-decay learning-rate schedule.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{gemm, Tensor};

/// Quintic Newton–Schulz coefficients.
pub const NS_COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);
pub const NS_STEPS: usize = 5;
const NS_EPS: f64 = 1e-7;

/// Approximately orthogonalizes a row-major `rows x cols` matrix: the
/// result keeps the singular vectors of `g` with singular values pushed
/// toward one.
pub fn newton_schulz(g: &[f64], rows: usize, cols: usize, steps: usize) -> Result<Vec<f64>> {
    if g.len() != rows * cols {
        return Err(Error::dim(format!("{} values for a {rows}x{cols} matrix", g.len())));
    }
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::Optimizer("non-finite input to Newton-Schulz".into()));
    }
    let tall = rows > cols;
    let (m, n) = if tall { (cols, rows) } else { (rows, cols) };
    let mut x = if tall { transpose(g, rows, cols) } else { g.to_vec() };
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut x {
        *v /= norm + NS_EPS;
    }
    let (a, b, c) = NS_COEFFS;
    let mut gram = vec![0.0; m * m];
    let mut poly = vec![0.0; m * m];
    let mut next = vec![0.0; m * n];
    for _ in 0..steps {
        gemm(m, n, m, &x, false, &x, true, &mut gram, false);
        gemm(m, m, m, &gram, false, &gram, false, &mut poly, false);
        for (p, &s) in poly.iter_mut().zip(&gram) {
            *p = b * s + c * *p;
        }
        next.copy_from_slice(&x);
        for v in &mut next {
            *v *= a;
        }
        gemm(m, m, n, &poly, false, &x, false, &mut next, true);
        std::mem::swap(&mut x, &mut next);
    }
    Ok(if tall { transpose(&x, m, n) } else { x })
}

fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = x[i * c + j];
        }
    }
    t
}

/// `base · √(768 / d)`.
pub fn scale_lr(base: f64, d_model: usize) -> f64 {
    base * (768.0 / d_model as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Trailing fraction of training spent in linear decay.
    pub decay_fraction: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warmup_steps: 40,
            total_steps: 2000,
            decay_fraction: 0.65,
        }
    }
}

impl Schedule {
    pub fn decay_start(&self) -> f64 {
        self.total_steps as f64 * (1.0 - self.decay_fraction)
    }

    /// LR multiplier for 1-based update `step`: `step / warmup` during
    /// warmup, 1 until the decay phase, then linear to 0 at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let s = step as f64;
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            s / self.warmup_steps as f64
        };
        let total = self.total_steps as f64;
        let start = self.decay_start();
        let decay = if total > start {
            (total - s) / (total - start)
        } else {
            1.0
        };
        warm.min(1.0).min(decay).max(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Muon,
    AdamEmbed,
    AdamHead,
    AdamRest,
}

/// Block matrices go to Muon; the token table, an untied head and the
/// remaining tensors each get their own AdamW group.
pub fn group_of(name: &str) -> Group {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if name.starts_with("layers.") && ["wq", "wk", "wv", "wo", "w1", "w2", "w3"].contains(&leaf) {
        Group::Muon
    } else if name == "embed" {
        Group::AdamEmbed
    } else if name == "lm_head" {
        Group::AdamHead
    } else {
        Group::AdamRest
    }
}

/// Names assigned to each group. Fails unless every name lands in exactly
/// one group and Muon only receives 2-D tensors.
pub fn param_groups<T>(
    params: &ModelParams<T>,
    shape: impl Fn(&T) -> Vec<usize>,
) -> Result<BTreeMap<Group, Vec<String>>> {
    let mut groups: BTreeMap<Group, Vec<String>> = BTreeMap::new();
    let mut seen = std::collections::HashSet::new();
    for (name, t) in params.named() {
        if !seen.insert(name.clone()) {
            return Err(Error::Optimizer(format!("parameter {name} listed twice")));
        }
        let g = group_of(&name);
        if g == Group::Muon && shape(t).len() != 2 {
            return Err(Error::Optimizer(format!("Muon parameter {name} is not 2-D")));
        }
        groups.entry(g).or_default().push(name);
    }
    let total: usize = groups.values().map(Vec::len).sum();
    if total != seen.len() {
        return Err(Error::Optimizer("groups do not partition the parameters".into()));
    }
    Ok(groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub muon_lr: f64,
    pub muon_momentum: f64,
    pub ns_steps: usize,
    pub embed_lr: f64,
    pub head_lr: f64,
    pub rest_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            muon_lr: 0.02,
            muon_momentum: 0.95,
            ns_steps: NS_STEPS,
            embed_lr: 0.2,
            head_lr: 0.004,
            rest_lr: 0.002,
            beta1: 0.8,
            beta2: 0.95,
            eps: 1e-10,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One bias-corrected AdamW update; `t` is the 1-based step of this
/// parameter. Weight decay is decoupled.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], t: u64, lr: f64, h: AdamHyper) {
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..p.len() {
        let gi = g[i] as f64;
        let mi = h.beta1 * m[i] as f64 + (1.0 - h.beta1) * gi;
        let vi = h.beta2 * v[i] as f64 + (1.0 - h.beta2) * gi * gi;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let upd = (mi / bc1) / ((vi / bc2).sqrt() + h.eps);
        let pi = p[i] as f64 * (1.0 - lr * h.weight_decay) - lr * upd;
        p[i] = pi as f32;
    }
}

/// Plain momentum, orthogonalize, then step by `lr · √max(rows, cols)`.
pub fn muon_update(p: &mut Tensor<f32>, g: &[f32], buf: &mut [f32], lr: f64, momentum: f64, ns_steps: usize) -> Result<()> {
    let (r, c) = (p.shape()[0], p.shape()[1]);
    for (b, &gi) in buf.iter_mut().zip(g) {
        *b = (momentum * *b as f64 + gi as f64) as f32;
    }
    let m: Vec<f64> = buf.iter().map(|&x| x as f64).collect();
    let o = newton_schulz(&m, r, c, ns_steps)?;
    let s = lr * (r.max(c) as f64).sqrt();
    for (pi, oi) in p.data_mut().iter_mut().zip(o) {
        *pi = (*pi as f64 - s * oi) as f32;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
enum Slot {
    Muon { buf: Vec<f32> },
    Adam { m: Vec<f32>, v: Vec<f32>, t: u64 },
}

/// Grouped optimizer over a [`ModelParams`] tree.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimConfig,
    d_model: usize,
    state: BTreeMap<String, Slot>,
    pub steps: u64,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    config: OptimConfig,
    d_model: usize,
    steps: u64,
    adam_steps: BTreeMap<String, u64>,
}

impl Optimizer {
    pub fn new(config: OptimConfig, params: &ModelParams<Tensor<f32>>, d_model: usize) -> Result<Self> {
        param_groups(params, |t| t.shape().to_vec())?;
        let state = params
            .named()
            .into_iter()
            .map(|(n, t)| {
                let z = vec![0.0; t.numel()];
                let s = if group_of(&n) == Group::Muon {
                    Slot::Muon { buf: z }
                } else {
                    Slot::Adam {
                        m: z.clone(),
                        v: z,
                        t: 0,
                    }
                };
                (n, s)
            })
            .collect();
        Ok(Self {
            config,
            d_model,
            state,
            steps: 0,
        })
    }

    /// Base (unscheduled) learning rate of a group, with the width scaling
    /// applied to the AdamW groups.
    pub fn group_lr(&self, g: Group) -> f64 {
        let c = &self.config;
        match g {
            Group::Muon => c.muon_lr,
            Group::AdamEmbed => scale_lr(c.embed_lr, self.d_model),
            Group::AdamHead => scale_lr(c.head_lr, self.d_model),
            Group::AdamRest => scale_lr(c.rest_lr, self.d_model),
        }
    }

    /// Applies one update with schedule multiplier `lr_mult`. Parameters
    /// without a gradient are left untouched, state included.
    pub fn step(
        &mut self,
        params: &mut ModelParams<Tensor<f32>>,
        grads: &HashMap<String, Tensor<f32>>,
        lr_mult: f64,
    ) -> Result<()> {
        let hyper = AdamHyper {
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.eps,
            weight_decay: self.config.weight_decay,
        };
        for (name, p) in params.named_mut() {
            let Some(g) = grads.get(&name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::Optimizer(format!("gradient shape mismatch for {name}")));
            }
            let lr = self.group_lr(group_of(&name)) * lr_mult;
            let slot = self
                .state
                .get_mut(&name)
                .ok_or_else(|| Error::Optimizer(format!("no optimizer state for {name}")))?;
            match slot {
                Slot::Muon { buf } => muon_update(
                    p,
                    g.data(),
                    buf,
                    lr,
                    self.config.muon_momentum,
                    self.config.ns_steps,
                )?,
                Slot::Adam { m, v, t } => {
                    *t += 1;
                    adamw_update(p.data_mut(), g.data(), m, v, *t, lr, hyper);
                }
            }
            if !p.is_finite() {
                return Err(Error::Numeric(format!("parameter {name} became non-finite")));
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Metadata plus named state tensors (`opt.<param>.buf|m|v`).
    pub fn export(&self) -> Result<(serde_json::Value, Vec<(String, Tensor<f32>)>)> {
        let mut tensors = Vec::new();
        let mut adam_steps = BTreeMap::new();
        for (name, s) in &self.state {
            match s {
                Slot::Muon { buf } => tensors.push((format!("opt.{name}.buf"), Tensor::new(vec![buf.len()], buf.clone())?)),
                Slot::Adam { m, v, t } => {
                    tensors.push((format!("opt.{name}.m"), Tensor::new(vec![m.len()], m.clone())?));
                    tensors.push((format!("opt.{name}.v"), Tensor::new(vec![v.len()], v.clone())?));
                    adam_steps.insert(name.clone(), *t);
                }
            }
        }
        let meta = serde_json::to_value(StateMeta {
            config: self.config.clone(),
            d_model: self.d_model,
            steps: self.steps,
            adam_steps,
        })?;
        Ok((meta, tensors))
    }

    pub fn import(
        meta: &serde_json::Value,
        tensors: &HashMap<String, Tensor<f32>>,
        params: &ModelParams<Tensor<f32>>,
    ) -> Result<Self> {
        let m: StateMeta = serde_json::from_value(meta.clone())?;
        let mut opt = Self::new(m.config, params, m.d_model)?;
        opt.steps = m.steps;
        let fetch = |key: String, len: usize| -> Result<Vec<f32>> {
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
            if t.numel() != len {
                return Err(Error::Checkpoint(format!("optimizer tensor {key} has wrong size")));
            }
            Ok(t.data().to_vec())
        };
        for (name, slot) in opt.state.iter_mut() {
            match slot {
                Slot::Muon { buf } => *buf = fetch(format!("opt.{name}.buf"), buf.len())?,
                Slot::Adam { m: mm, v, t } => {
                    *mm = fetch(format!("opt.{name}.m"), mm.len())?;
                    *v = fetch(format!("opt.{name}.v"), v.len())?;
                    *t = *m
                        .adam_steps
                        .get(name)
                        .ok_or_else(|| Error::Checkpoint(format!("missing step count for {name}")))?;
                }
            }
        }
        Ok(opt)
    }
}
