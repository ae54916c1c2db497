use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{Modality, TextCorpus, TrainBatch};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{forward, init_params, ModelConfig, ModelParams, SequenceLayout};
use crate::objectives::{
    combined_loss, lm_logits, lm_loss, masked_quantile_loss, quantile_head, LossWeights, QuantileGrid,
};
use crate::optim::{OptimConfig, Optimizer, Schedule};
use crate::tensor::{Graph, Tensor};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub modality: Modality,
    pub ce: f64,
    pub ql: f64,
    pub combined: f64,
    pub lr: f64,
    pub tokens_seen: u64,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    config: ModelConfig,
    optimizer: serde_json::Value,
    schedule: Schedule,
    step: u64,
    tokens_seen: u64,
    rng: RngState,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Parameters, optimizer state, schedule and the data RNG of one run.
pub struct Trainer {
    pub model: ModelConfig,
    pub params: ModelParams<Tensor<f32>>,
    pub opt: Optimizer,
    pub schedule: Schedule,
    /// Completed updates.
    pub step: u64,
    pub tokens_seen: u64,
    pub rng: ChaCha8Rng,
    grid: QuantileGrid,
}

impl Trainer {
    pub fn new(model: ModelConfig, optim: OptimConfig, schedule: Schedule, seed: u64) -> Result<Self> {
        let params = init_params(&model, seed)?;
        Self::from_params(model, params, optim, schedule, seed)
    }

    pub fn from_params(
        model: ModelConfig,
        params: ModelParams<Tensor<f32>>,
        optim: OptimConfig,
        schedule: Schedule,
        seed: u64,
    ) -> Result<Self> {
        let opt = Optimizer::new(optim, &params, model.d_model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep the data stream apart from the init stream.
        rng.set_stream(1);
        Ok(Self {
            grid: QuantileGrid::uniform(model.n_quantiles)?,
            model,
            params,
            opt,
            schedule,
            step: 0,
            tokens_seen: 0,
            rng,
        })
    }

    pub fn grid(&self) -> &QuantileGrid {
        &self.grid
    }

    /// Forward, combined loss, backward and one grouped update. Returns
    /// `None` without touching any state if the batch has no supervised
    /// position.
    pub fn train_step(&mut self, batch: &TrainBatch, w: LossWeights) -> Result<Option<StepMetrics>> {
        if !batch.is_supervised() {
            return Ok(None);
        }
        let mut g = Graph::<f32>::new();
        let pv = self.params.register(&mut g, true);
        let hidden = forward(&mut g, &pv, &self.model, &batch.seqs)?;
        let (text_rows, text_targets) = batch.text_rows();
        let ce = if text_rows.is_empty() {
            None
        } else {
            let logits = lm_logits(&mut g, &pv, &self.model, hidden, Some(&text_rows))?;
            Some(lm_loss(&mut g, logits, &text_targets)?)
        };
        let (ts_rows, y, z) = batch.ts_rows();
        let ql = if ts_rows.is_empty() {
            None
        } else {
            let q = quantile_head(&mut g, &pv, &self.model, hidden, Some(&ts_rows))?;
            Some(masked_quantile_loss(&mut g, q, &y, &z, &self.grid)?)
        };
        let loss = match (ce, ql) {
            (Some(c), Some(q)) => combined_loss(&mut g, c, q, w)?,
            (Some(c), None) => g.scale(c, w.text as f32),
            (None, Some(q)) => g.scale(q, w.ts as f32),
            (None, None) => unreachable!("supervised batch has a loss term"),
        };
        let scalar = |v: Option<crate::tensor::Var>| v.map_or(0.0, |v| g.value(v).data()[0] as f64);
        let (ce_v, ql_v, total) = (scalar(ce), scalar(ql), scalar(Some(loss)));
        if !total.is_finite() {
            return Err(Error::Numeric(format!("loss became {total} at step {}", self.step + 1)));
        }
        g.backward(loss)?;
        let grads: HashMap<String, Tensor<f32>> = pv
            .named()
            .into_iter()
            .filter_map(|(n, v)| g.grad_tensor(*v).map(|t| (n, t)))
            .collect();
        let lr = self.schedule.lr_at(self.step + 1);
        self.opt.step(&mut self.params, &grads, lr)?;
        self.step += 1;
        self.tokens_seen += batch.positions() as u64;
        Ok(Some(StepMetrics {
            step: self.step,
            modality: batch.modality,
            ce: ce_v,
            ql: ql_v,
            combined: total,
            lr,
            tokens_seen: self.tokens_seen,
        }))
    }

    /// Writes parameters, optimizer state, RNG position and counters.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let (opt_meta, opt_tensors) = self.opt.export()?;
        let meta = serde_json::to_value(TrainerMeta {
            config: self.model.clone(),
            optimizer: opt_meta,
            schedule: self.schedule,
            step: self.step,
            tokens_seen: self.tokens_seen,
            rng: RngState::capture(&self.rng),
            extra,
        })?;
        let mut entries = checkpoint::model_entries(&self.params);
        entries.extend(opt_tensors.iter().map(|(n, t)| (n.clone(), t)));
        checkpoint::write(path, &meta, &entries)
    }

    /// Inverse of [`Trainer::save`]; also returns the stored `extra`.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let file = checkpoint::read(path)?;
        let (model, params) = checkpoint::model_from_file(&file)?;
        let meta: TrainerMeta = serde_json::from_value(file.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("not a training checkpoint: {e}")))?;
        let map = file.into_map();
        let opt = Optimizer::import(&meta.optimizer, &map, &params)?;
        Ok((
            Self {
                grid: QuantileGrid::uniform(model.n_quantiles)?,
                model,
                params,
                opt,
                schedule: meta.schedule,
                step: meta.step,
                tokens_seen: meta.tokens_seen,
                rng: meta.rng.restore()?,
            },
            meta.extra,
        ))
    }
}

/// Token-weighted next-token CE over the whole packed stream. Windows
/// overlap by half so every token after the first window is scored with
/// at least `seq_len / 2` tokens of context; each token is scored once.
pub fn eval_text_ce(params: &ModelParams<Tensor<f32>>, cfg: &ModelConfig, corpus: &TextCorpus, seq_len: usize) -> Result<f64> {
    let stream = &corpus.stream;
    let stride = (seq_len / 2).max(1);
    let (mut total, mut count) = (0.0, 0usize);
    let mut start = 0;
    while start + 1 < stream.len() {
        let w = &stream[start..(start + seq_len + 1).min(stream.len())];
        let n = w.len() - 1;
        let skip = if start == 0 { 0 } else { seq_len - stride };
        if skip < n {
            let mut g = Graph::<f32>::new();
            let pv = params.register(&mut g, false);
            let h = forward(&mut g, &pv, cfg, &[SequenceLayout::from_tokens(&w[..n])])?;
            let logits = lm_logits(&mut g, &pv, cfg, h, None)?;
            let targets: Vec<Option<usize>> = (0..n).map(|i| (i >= skip).then_some(w[i + 1] as usize)).collect();
            let l = lm_loss(&mut g, logits, &targets)?;
            total += g.value(l).data()[0] as f64 * (n - skip) as f64;
            count += n - skip;
        }
        if start + seq_len + 1 >= stream.len() {
            break;
        }
        start += stride;
    }
    if count == 0 {
        return Err(Error::Data("text corpus has no next-token pairs".into()));
    }
    Ok(total / count as f64)
}
