//! Configuration, training, checkpoints, experiment grids and reports.

pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod report;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Experiment, RunConfig};
pub use experiments::{evaluate, run_and_emit, run_experiment, Datasets, Job, Runner, ShiftRow, TrainedRun};
pub use train::{train, EpochLog, RunLog, TrainConfig, TrainOutcome};
