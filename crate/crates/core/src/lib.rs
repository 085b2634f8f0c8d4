#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod autodiff;
pub mod config;
pub mod error;
pub mod model;
pub mod params;
pub mod signal;
pub mod synth;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{BatchNormStats, Gradients, NormMode, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamStore, Session};
pub use config::KeyValue;
pub use model::{ModelConfig, PhysMamba};
pub use signal::{HrEstimate, MetricsReport};
pub use synth::{ClipMeta, ClipRecord, SynthConfig};
pub use tensor::Tensor;
pub use train::{Checkpoint, EvalReport, TrainConfig};
