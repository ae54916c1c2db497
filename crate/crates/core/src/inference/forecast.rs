use serde::{Deserialize, Serialize};

use crate::codec::{compute_visible_stats, denormalize, encode_with_stats, NormStats, PadSide, RawSeries};
use crate::error::{Error, Result};
use crate::model::{forward, forward_cached, KvCache, ModelConfig, ModelParams, SequenceLayout};
use crate::objectives::{quantile_head, QuantileGrid};
use crate::tensor::{Graph, Tensor};
use crate::tokenizer::BpeVocab;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForecastRequest {
    /// One channel; NaN marks a missing value.
    pub context: Vec<f64>,
    pub horizon: usize,
    /// Text placed before the series.
    pub text: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    /// `H x Q` in data units, ascending within each step.
    pub quantiles: Vec<Vec<f64>>,
    pub median: Vec<f64>,
    pub levels: Vec<f64>,
}

/// Per-step record of what the decoder saw, for inspection in tests.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForecastTrace {
    pub stats: Vec<NormStats>,
    /// Normalized median patches fed back as context.
    pub fed_back: Vec<Vec<f32>>,
    pub prefix_len: usize,
    pub context_patches: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Decode {
    /// Each step extends a KV cache by one patch.
    #[default]
    Cached,
    /// Each step reruns the whole sequence.
    Recompute,
}

pub struct Forecaster<'a> {
    pub params: &'a ModelParams<Tensor<f32>>,
    pub cfg: &'a ModelConfig,
    pub tokenizer: Option<&'a BpeVocab>,
    pub decode: Decode,
    grid: QuantileGrid,
}

/// Token prefix for a text-conditioned series: BOS, the text, TS_BEGIN.
/// Empty or absent text gives no prefix at all.
pub fn text_prefix(tok: Option<&BpeVocab>, text: Option<&str>) -> Result<Vec<u32>> {
    let Some(text) = text.filter(|t| !t.is_empty()) else {
        return Ok(Vec::new());
    };
    let tok = tok.ok_or_else(|| Error::config("a text prefix needs a tokenizer"))?;
    let mut ids = vec![tok.bos()];
    ids.extend(tok.encode(text.as_bytes()));
    ids.push(tok.ts_begin());
    Ok(ids)
}

fn generated_row(p: usize, start: usize, l: usize, values: &[f32]) -> Vec<f32> {
    let lf = l as f64;
    let mut f = Vec::with_capacity(4 * p);
    f.extend((0..p).map(|j| ((start + j + 1) as f64 - lf) as f32 / lf as f32));
    f.extend_from_slice(values);
    f.extend(std::iter::repeat_n(1.0f32, p));
    f.extend(std::iter::repeat_n(0.0f32, p));
    f
}

impl<'a> Forecaster<'a> {
    pub fn new(params: &'a ModelParams<Tensor<f32>>, cfg: &'a ModelConfig) -> Result<Self> {
        Ok(Self {
            params,
            cfg,
            tokenizer: None,
            decode: Decode::Cached,
            grid: QuantileGrid::uniform(cfg.n_quantiles)?,
        })
    }

    pub fn with_tokenizer(mut self, tok: Option<&'a BpeVocab>) -> Self {
        self.tokenizer = tok;
        self
    }

    pub fn with_decode(mut self, d: Decode) -> Self {
        self.decode = d;
        self
    }

    pub fn forecast(&self, req: &ForecastRequest) -> Result<ForecastResult> {
        self.forecast_traced(req).map(|(r, _)| r)
    }

    pub fn forecast_traced(&self, req: &ForecastRequest) -> Result<(ForecastResult, ForecastTrace)> {
        let p = self.cfg.patch_size;
        let q = self.grid.len();
        if req.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        let steps = req.horizon.div_ceil(p);
        let prefix = text_prefix(self.tokenizer, req.text.as_deref())?;
        let budget = self.cfg.max_seq as i64 - prefix.len() as i64 - (steps as i64 - 1);
        if budget < 1 {
            return Err(Error::Config(format!(
                "horizon {} with a {}-token prefix does not fit in max_seq {}",
                req.horizon,
                prefix.len(),
                self.cfg.max_seq
            )));
        }
        // Keep the most recent observations that fit.
        let keep = req.context.len().min(budget as usize * p);
        let ctx = &req.context[req.context.len() - keep..];
        if ctx.is_empty() {
            return Err(Error::InvalidSeries("empty context".into()));
        }
        let stats = compute_visible_stats(ctx)?;
        let enc = encode_with_stats(&RawSeries::univariate(ctx.to_vec()), &[stats], p, PadSide::Left)?;
        let mut layout = SequenceLayout::from_tokens(&prefix);
        for t in 0..enc.num_patches() {
            layout.push_patch(enc.feature_row(t));
        }
        let mut trace = ForecastTrace {
            prefix_len: prefix.len(),
            context_patches: enc.num_patches(),
            ..Default::default()
        };
        let median_idx = self.median_level();
        let mut cache = KvCache::<f32>::new(self.cfg);
        let mut pending = layout.clone();
        let mut normed: Vec<Vec<f32>> = Vec::with_capacity(steps * p);
        for k in 0..steps {
            trace.stats.push(stats);
            let mut g = Graph::<f32>::new();
            let pv = self.params.register(&mut g, false);
            let hidden = match self.decode {
                Decode::Cached => {
                    let start = cache.len();
                    forward_cached(&mut g, &pv, self.cfg, &pending, &mut cache, start)?
                }
                Decode::Recompute => forward(&mut g, &pv, self.cfg, std::slice::from_ref(&layout))?,
            };
            let last = g.value(hidden).rows() - 1;
            let qh = quantile_head(&mut g, &pv, self.cfg, hidden, Some(&[last]))?;
            let out = g.value(qh).data();
            let mut med = Vec::with_capacity(p);
            for j in 0..p {
                let mut row = out[j * q..(j + 1) * q].to_vec();
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite quantile at step {k}")));
                }
                row.sort_by(f32::total_cmp);
                med.push(row[median_idx]);
                normed.push(row);
            }
            if k + 1 < steps {
                let row = generated_row(p, ctx.len() + k * p, ctx.len(), &med);
                layout.push_patch(&row);
                pending = SequenceLayout::default();
                pending.push_patch(&row);
            }
            trace.fed_back.push(med);
        }
        normed.truncate(req.horizon);
        let quantiles: Vec<Vec<f64>> = normed
            .iter()
            .map(|row| denormalize(&row.iter().map(|&v| v as f64).collect::<Vec<_>>(), stats))
            .collect();
        if quantiles.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("forecast overflowed after denormalization".into()));
        }
        let median = quantiles.iter().map(|r| r[median_idx]).collect();
        Ok((
            ForecastResult {
                quantiles,
                median,
                levels: self.grid.levels().to_vec(),
            },
            trace,
        ))
    }

    /// The 0.5 level, or the level closest to it on an even grid.
    fn median_level(&self) -> usize {
        self.grid.median_index().unwrap_or_else(|| {
            let l = self.grid.levels();
            (0..l.len())
                .min_by(|&a, &b| (l[a] - 0.5).abs().total_cmp(&(l[b] - 0.5).abs()))
                .unwrap_or(0)
        })
    }
}
