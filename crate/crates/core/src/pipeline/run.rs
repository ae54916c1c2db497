use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::batch::{sample_modality, Modality};
use super::config::RunConfig;
use super::data::DataSources;
use super::trainer::{StepMetrics, Trainer};
use crate::error::{Error, Result};

/// Run state stored next to the trainer in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub stage: u8,
    pub synth_next: u64,
}

/// Trains until `until` updates (capped at the configured total), logging
/// one JSON line per update and checkpointing every `checkpoint_every`
/// updates into `ckpt_dir` when given.
pub fn run_steps(
    cfg: &RunConfig,
    trainer: &mut Trainer,
    data: &mut DataSources,
    until: u64,
    log: &mut dyn Write,
    ckpt_dir: Option<&Path>,
) -> Result<Vec<StepMetrics>> {
    let p = cfg.model.patch_size;
    let until = until.min(cfg.total_steps());
    let mut out = Vec::new();
    while trainer.step < until {
        let (stage_no, stage) = cfg.stage_at(trainer.step + 1);
        let text_prob = if data.text.is_some() { stage.text_prob } else { 0.0 };
        let modality = sample_modality(&mut trainer.rng, text_prob);
        let batch = data.batch(modality, stage, p, &mut trainer.rng)?;
        let Some(m) = trainer.train_step(&batch, stage.loss)? else {
            continue;
        };
        writeln!(log, "{}", serde_json::to_string(&m)?)?;
        out.push(m);
        if let Some(dir) = ckpt_dir {
            if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 {
                save_run(trainer, data, stage_no, &dir.join("latest.ckpt"))?;
            }
        }
    }
    Ok(out)
}

pub fn save_run(trainer: &Trainer, data: &DataSources, stage: u8, path: &Path) -> Result<()> {
    let state = RunState {
        stage,
        synth_next: data.synth_next,
    };
    trainer.save(path, serde_json::to_value(state)?)
}

/// Full two-stage run from `cfg`, or resumed from a checkpoint. Writes
/// `metrics.jsonl`, `tokenizer.json` (when text is used) and
/// `final.ckpt` under `cfg.out_dir`; returns the final checkpoint path.
pub fn run_training(cfg: &RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let mut data = DataSources::from_config(cfg)?;
    let mut trainer = match resume {
        Some(path) => {
            let (t, extra) = Trainer::load(path)?;
            if t.model != cfg.model {
                return Err(Error::Config("checkpoint model config differs from the run config".into()));
            }
            let state: RunState = serde_json::from_value(extra)
                .map_err(|e| Error::Checkpoint(format!("checkpoint lacks run state: {e}")))?;
            data.synth_next = state.synth_next;
            t
        }
        None => Trainer::new(cfg.model.clone(), cfg.optim.clone(), cfg.schedule(), cfg.seed)?,
    };
    trainer.schedule = cfg.schedule();
    std::fs::create_dir_all(&cfg.out_dir)?;
    if let Some(tok) = &data.tokenizer {
        tok.save(&cfg.out_dir.join("tokenizer.json"))?;
    }
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(cfg.out_dir.join("metrics.jsonl"))?;
    run_steps(cfg, &mut trainer, &mut data, cfg.total_steps(), &mut log, Some(&cfg.out_dir))?;
    let final_path = cfg.out_dir.join("final.ckpt");
    let stage = cfg.stage_at(trainer.step.max(1)).0;
    save_run(&trainer, &data, stage, &final_path)?;
    Ok(final_path)
}

/// Count of updates per modality in a metrics log.
pub fn modality_counts(metrics: &[StepMetrics]) -> (usize, usize) {
    let text = metrics.iter().filter(|m| m.modality == Modality::Text).count();
    (text, metrics.len() - text)
}
