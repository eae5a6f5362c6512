//! Training objectives, loop-depth sampling and the optimizer.

mod batch;
mod loop_dist;
mod losses;
mod optim;
mod step;

pub use batch::Batch;
pub use loop_dist::{sample_loop_depth, LoopDistribution};
pub use losses::{jsrr_loss, l2_consistency_loss, sft_loss, Jsrr};
pub use optim::{clip_global_norm, learning_rate, optimizer_update, AdamW, OptimizerState, Schedule};
pub use step::{LossMask, ObjectiveForm, StepMetrics, TrainConfig, Trainer};
