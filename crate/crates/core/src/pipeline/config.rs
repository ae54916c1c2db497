use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use crate::optim::{OptimConfig, Schedule};
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    /// Positions per sequence.
    pub seq_len: usize,
    /// Sequences per step.
    pub micro_batch: usize,
    pub text_prob: f64,
    /// Share of time-series sequences replaced by interleaved
    /// text + series samples.
    pub alignment_frac: f64,
    pub total_steps: u64,
    pub loss: LossWeights,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            seq_len: 256,
            micro_batch: 8,
            text_prob: 0.92,
            alignment_frac: 0.0,
            total_steps: 2000,
            loss: LossWeights::default(),
        }
    }

    pub fn stage2() -> Self {
        Self {
            seq_len: 512,
            alignment_frac: 0.05,
            total_steps: 500,
            ..Self::stage1()
        }
    }

    pub fn ts_prob(&self) -> f64 {
        1.0 - self.text_prob
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.seq_len == 0 || self.seq_len > model.max_seq {
            return Err(Error::Config(format!(
                "seq_len {} must lie in 1..={}",
                self.seq_len, model.max_seq
            )));
        }
        if self.micro_batch == 0 {
            return Err(Error::config("micro_batch must be positive"));
        }
        for (name, p) in [("text_prob", self.text_prob), ("alignment_frac", self.alignment_frac)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// One document per non-empty line.
    pub text: Option<PathBuf>,
    /// Series JSONL; without it every time-series batch is synthetic.
    pub series: Option<PathBuf>,
    /// Trained on `text` when absent.
    pub tokenizer: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub checkpoint_every: u64,
    pub warmup_steps: u64,
    pub decay_fraction: f64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub stage1: StageConfig,
    pub stage2: Option<StageConfig>,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            checkpoint_every: 500,
            warmup_steps: 40,
            decay_fraction: 0.65,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            stage1: StageConfig::stage1(),
            stage2: None,
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.text, &mut cfg.data.series, &mut cfg.data.tokenizer]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.synth.validate()?;
        self.stage1.validate(&self.model)?;
        if let Some(s) = &self.stage2 {
            s.validate(&self.model)?;
        }
        if !(0.0..=1.0).contains(&self.decay_fraction) {
            return Err(Error::config("decay_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.stage1.total_steps + self.stage2.as_ref().map_or(0, |s| s.total_steps)
    }

    /// One schedule spanning both stages, so stage 2 continues the decay
    /// where stage 1 left off.
    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps(),
            decay_fraction: self.decay_fraction,
        }
    }

    /// Stage active at 1-based global step `step`.
    pub fn stage_at(&self, step: u64) -> (u8, &StageConfig) {
        match &self.stage2 {
            Some(s2) if step > self.stage1.total_steps => (2, s2),
            _ => (1, &self.stage1),
        }
    }
}
