//! Toy-task training harness.

pub mod model;
pub mod optim;
pub mod task;
pub mod trainer;

pub use model::ToyModel;
pub use optim::{label_smoothed_ce, Adam, AdamConfig, LrSchedule};
pub use task::{generate_toy_batch, Batch, Dataset, Sample, TaskKind, ToyTaskSpec};
pub use trainer::{train, train_with_progress, validation_set, EvalRecord, TrainConfig, TrainOutcome};
