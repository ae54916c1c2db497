//! Forecast and classification metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::pinball;

fn undefined(msg: impl Into<String>) -> Error {
    Error::Undefined(msg.into())
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{what}: lengths {a} and {b} differ")));
    }
    if a == 0 {
        return Err(Error::Data(format!("{what}: empty input")));
    }
    Ok(())
}

/// Season length from a frequency tag; 1 when unknown.
pub fn season_for_freq(freq: Option<&str>) -> usize {
    let Some(f) = freq else { return 1 };
    match f.trim().to_ascii_lowercase().as_str() {
        "h" | "1h" | "hourly" | "hour" => 24,
        "d" | "1d" | "daily" | "day" => 7,
        "w" | "1w" | "weekly" | "week" => 52,
        "m" | "ms" | "me" | "1m" | "monthly" | "month" => 12,
        _ => 1,
    }
}

/// `ŷ_{n+h} = y_{n+h−m⌈h/m⌉}` for `h = 1..=horizon`.
pub fn seasonal_naive(context: &[f64], m: usize, horizon: usize) -> Result<Vec<f64>> {
    let n = context.len();
    if m == 0 || m > n {
        return Err(Error::config(format!("season {m} is undefined for a context of length {n}")));
    }
    Ok((1..=horizon)
        .map(|h| context[n - 1 + h - m * h.div_ceil(m)])
        .collect())
}

pub fn mae(forecast: &[f64], target: &[f64]) -> Result<f64> {
    same_len(forecast.len(), target.len(), "mae")?;
    Ok(forecast.iter().zip(target).map(|(f, y)| (f - y).abs()).sum::<f64>() / target.len() as f64)
}

/// MAE divided by the mean absolute target.
pub fn nmae(forecast: &[f64], target: &[f64]) -> Result<f64> {
    let scale = target.iter().map(|y| y.abs()).sum::<f64>() / target.len().max(1) as f64;
    let e = mae(forecast, target)?;
    if scale == 0.0 {
        return Err(undefined("nmae: all targets are zero"));
    }
    Ok(e / scale)
}

/// In-sample MAE of the one-step seasonal naive on `context`.
pub fn seasonal_scale(context: &[f64], m: usize) -> Result<f64> {
    if m == 0 || context.len() <= m {
        return Err(undefined(format!(
            "mase: context of length {} has no lag-{m} pairs",
            context.len()
        )));
    }
    let d: f64 = context.windows(m + 1).map(|w| (w[m] - w[0]).abs()).sum();
    let s = d / (context.len() - m) as f64;
    if s == 0.0 {
        return Err(undefined("mase: seasonal naive is exact in-sample"));
    }
    Ok(s)
}

pub fn mase(forecast: &[f64], target: &[f64], context: &[f64], m: usize) -> Result<f64> {
    let e = mae(forecast, target)?;
    Ok(e / seasonal_scale(context, m)?)
}

/// `2·Σ_{t,q} ρ_τq(y_t − q̂_tq) / (Q·Σ_t |y_t|)`; `quantiles[t][q]`.
pub fn wql(quantiles: &[Vec<f64>], target: &[f64], levels: &[f64]) -> Result<f64> {
    same_len(quantiles.len(), target.len(), "wql")?;
    let q = levels.len();
    if q == 0 {
        return Err(Error::config("wql: empty quantile grid"));
    }
    let mut loss = 0.0;
    for (row, &y) in quantiles.iter().zip(target) {
        if row.len() != q {
            return Err(Error::dim(format!("wql: row has {} quantiles, grid has {q}", row.len())));
        }
        loss += row.iter().zip(levels).map(|(qh, &tau)| pinball(tau, y - qh)).sum::<f64>();
    }
    let denom: f64 = target.iter().map(|y| y.abs()).sum();
    if denom == 0.0 {
        return Err(undefined("wql: all targets are zero"));
    }
    Ok(2.0 * loss / (q as f64 * denom))
}

/// Geometric mean of non-negative ratios.
pub fn geomean(ratios: &[f64]) -> Result<f64> {
    if ratios.is_empty() {
        return Err(undefined("geomean of no tasks"));
    }
    if let Some(r) = ratios.iter().find(|r| !r.is_finite() || **r < 0.0) {
        return Err(Error::Numeric(format!("geomean: invalid ratio {r}")));
    }
    Ok((ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub metric: f64,
    pub baseline: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub task: String,
    pub reason: String,
}

/// Baseline-standardized scores and their geometric mean. Tasks whose
/// metric or baseline is undefined are listed under `skipped`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub tasks: Vec<TaskScore>,
    pub skipped: Vec<Skipped>,
    pub geomean: Option<f64>,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>) -> Self {
        Self {
            metric: metric.into(),
            ..Default::default()
        }
    }

    /// Records one task. Only [`Error::Undefined`] is absorbed as a skip.
    pub fn push(&mut self, task: impl Into<String>, metric: Result<f64>, baseline: Result<f64>) -> Result<()> {
        let task = task.into();
        let outcome = metric.and_then(|m| {
            let b = baseline?;
            if b == 0.0 {
                return Err(undefined("baseline metric is zero"));
            }
            Ok((m, b))
        });
        match outcome {
            Ok((metric, baseline)) => self.tasks.push(TaskScore {
                task,
                metric,
                baseline,
                ratio: metric / baseline,
            }),
            Err(Error::Undefined(reason)) => self.skipped.push(Skipped { task, reason }),
            Err(e) => return Err(e),
        }
        self.geomean = geomean(&self.tasks.iter().map(|t| t.ratio).collect::<Vec<_>>()).ok();
        Ok(())
    }
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    same_len(preds.len(), labels.len(), "accuracy")?;
    Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Mean per-class F1 over every class seen in `preds` or `labels`.
pub fn macro_f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    same_len(preds.len(), labels.len(), "macro_f1")?;
    let classes: BTreeSet<usize> = preds.iter().chain(labels).copied().collect();
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for (&p, &l) in preds.iter().zip(labels) {
                match (p == c, l == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
            }
            let denom = 2 * tp + fp + fneg;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / classes.len() as f64)
}

/// Mann–Whitney AUC with average ranks for ties.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    same_len(scores.len(), positive.len(), "auc")?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("auc: NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(undefined("auc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Macro one-vs-rest AUC over `scores[i][k]`. Two classes reduce to the
/// binary AUC of class 1; classes lacking positives or negatives are left
/// out of the average.
pub fn auc(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    same_len(scores.len(), labels.len(), "auc")?;
    let k = scores[0].len();
    if scores.iter().any(|s| s.len() != k) || labels.iter().any(|&l| l >= k) {
        return Err(Error::dim("auc: ragged scores or label out of range"));
    }
    let column = |c: usize| -> Result<f64> {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        auc_binary(&s, &pos)
    };
    if k == 2 {
        return column(1);
    }
    let mut vals = Vec::new();
    for c in 0..k {
        match column(c) {
            Ok(v) => vals.push(v),
            Err(Error::Undefined(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if vals.is_empty() {
        return Err(undefined("auc needs at least two classes present"));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}
