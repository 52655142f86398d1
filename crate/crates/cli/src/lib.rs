//! Run configuration, checkpoints, training loop, evaluation, inference
//! and the ablation harness behind the `hrvvs` binary.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod infer;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
