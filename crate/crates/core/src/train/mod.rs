//! Optimizer, checkpoints, and the training and evaluation loops.

mod adam;
mod checkpoint;
mod config;
mod run;

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use run::{
    evaluate, evaluate_traces, fresh_checkpoint, prepare_clip, prepare_dataset, train, ClipResult, EvalReport,
    LossRow, PreparedClip, TrainOutcome,
};
