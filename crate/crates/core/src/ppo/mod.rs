//! Policy-gradient training of discard policies with suffix key-rate
//! returns, clipped surrogate updates and a learned baseline.

mod buffer;
mod checkpoint;
mod config;
mod train;
mod update;

pub use buffer::{compute_advantages, group_values, suffix_returns, ExperienceBuffer};
pub use checkpoint::{Arch, Checkpoint, CheckpointDir};
pub use config::{Hyperparams, ReturnWindow, TrainConfig};
pub use train::{
    census, census_csv, collect, evaluate, policy_dims, read_epoch_log, train, train_with, Census,
    Control, EpochLog, TrainOutcome, CENSUS_HEADER, EPOCH_LOG_FILE, EPOCH_LOG_HEADER,
};
pub use update::{
    clipped_objective, evaluate_surrogate, policy_update, value_loss, value_update, PolicyScratch,
    PolicyStats, SurrogateEval,
};
