//! Two-stage training: modality sampling, batch construction, the update
//! step, checkpoints and the run loop.

pub mod batch;
pub mod config;
pub mod data;
pub mod run;
pub mod trainer;

pub use batch::{
    build_interleaved_batch, build_text_batch, build_ts_batch, sample_modality, InterleavedSample, Modality, Segment,
    Target, TextCorpus, TrainBatch,
};
pub use config::{DataConfig, RunConfig, StageConfig};
pub use data::{describe, DataSources};
pub use run::{run_steps, run_training, save_run, RunState};
pub use trainer::{eval_text_ce, StepMetrics, Trainer};
