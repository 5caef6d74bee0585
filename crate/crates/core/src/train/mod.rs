//! Batch composition, SGD, and the staged optimization schedule.

mod batch;
mod cascade;
mod config;
mod sgd;

pub use batch::{compose_batch, stack_images, Batch, BatchPlan, Proposals};
pub use cascade::{cascaded_train, finetune, pretrain, run_stage, MetricLog, MetricRow, TrainOutcome};
pub use config::{lr_at, NetworkConfig, PretrainConfig, SamplingConfig, StageConfig, Stages, TrainConfig, TrainMode};
pub use sgd::Sgd;
