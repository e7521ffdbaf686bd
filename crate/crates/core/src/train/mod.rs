//! Optimizer, learning-rate schedule, ablations and the training loop.

pub mod ablation;
pub mod optim;
pub mod trainer;

pub use ablation::Ablation;
pub use optim::{adamw_step, cosine_warmup_lr, warmup_steps, AdamState, AdamWConfig};
pub use trainer::{
    load_params, log_to_csv, params_to_tensors, EpochEnd, LogRow, TrainConfig, TrainData, TrainState, TrainSummary, Trainer, CSV_HEADER,
};
