//! Offline training: behavior data, batches, the composite loss and
//! checkpoints.

mod behavior;
mod config;
mod dataset;
mod run;
mod trainer;

pub use behavior::{
    behavior_episode_seed, generate_behavior_data, log_episode, PerturbedPid, PidController,
};
pub use config::{BehaviorConfig, TrainConfig};
pub use dataset::{build_batch, sample_batch, TrainBatch, TrajectoryDataset};
pub use trainer::{
    build_loss, parameter_gradients, Checkpoint, CheckpointManifest, LossBreakdown, LossNodes,
    StepReport, Trainer,
};
pub use run::{train_run, RunConfig, TrainedRun, TARGET_RETURN_QUANTILE};
