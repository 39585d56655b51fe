//! Optimizers, training loops, run logs and checkpoints.

mod checkpoint;
mod config;
mod engine;
mod optim;
mod record;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{config_hash, DistillConfig, Method, OptimConfig, OptimizerKind, TargetRule, TaskLoss, TaskMode};
pub use engine::{
    build_and_distill_auxiliary, distill_auxiliary, distill_into, distill_student, intermediate_selections,
    train_supervised, TrainOutcome,
};
pub use optim::{adam_step, sgd_momentum_step, Optimizer, Slot, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use record::{EpochRecord, RunMetrics};
