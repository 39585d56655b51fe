//! Direct intermediate-layer knowledge distillation for small CNNs.
//!
//! The teacher (or an auxiliary model distilled from it) is pruned per layer by
//! filter L1 norm so that its feature maps have exactly the student's width;
//! the student then matches those maps one layer at a time on a curriculum,
//! finishing with a final-layer distillation loss.
//!
//! Everything runs on a small self-contained CPU tensor engine ([`tensor`]).

pub mod curriculum;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod prune;
pub mod tensor;
pub mod train;

pub use curriculum::{CurriculumSchedule, LossSelector, SchedulerMode};
pub use data::Dataset;
pub use error::{Error, Result};
pub use nn::{FeatureCapture, InputShape, LayerKind, LayerSpec, Model, ModelRole, ModelSpec};
pub use prune::{ChannelSelection, KernelView};
pub use tensor::{Scalar, Tape, Tensor, Var};
pub use train::{Checkpoint, DistillConfig, Method, RunMetrics};

/// Crate version recorded in checkpoints and ledgers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
