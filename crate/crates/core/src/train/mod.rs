//! Optimizer, metrics and the supervised training loop.

pub mod metrics;
pub mod optim;
pub mod trainer;

pub use metrics::{accuracy, auroc, MetricsReport};
pub use optim::{AdamW, CosineSchedule};
pub use trainer::{evaluate, train, EpochRecord, TrainOutcome};
