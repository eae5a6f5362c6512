//! The looped language model: prelude, weight-shared recurrent block,
//! coda and output head.

mod block;
pub mod checkpoint;
mod config;
mod forward;
mod params;

pub use block::Bound;
pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, NormOperator, NormPlacement};
pub use forward::{embed, forward, head, recurrent_block, run_batch, Trajectory};
pub use params::{Layout, LayerIds, NormIds, Parameters};
