//! Driver: configuration, checkpoints, training and the command entry points.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{OptimizerConfig, OptimizerKind, ParsingSource, Stage, TrainConfig};
pub use train::{
    init_stage1, init_stage2, train_stage1, train_stage2, Stage1Batch, Stage1Record, Stage2Batch, Stage2Record,
};
