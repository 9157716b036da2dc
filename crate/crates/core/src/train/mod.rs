//! Losses, optimizer, learning-rate schedule and training loops.

mod adam;
mod loss;
mod schedule;
mod trainer;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use loss::{
    compute_missing_mask, mask_channels_last, mask_weights, masked_mse_loss, mse_loss,
    sigmoid_ce_loss, LossKind, LossSpec, MaskRule,
};
pub use schedule::{Phase, ScheduleConfig, ScheduleState};
pub use trainer::{
    stacked_input, train_base, train_ensemble, validate_bases, LogEntry, TrainConfig, TrainOptions,
    TrainingLog, TrainingOutcome,
};
