//! Experiment orchestration: configs, training loops, evaluation and
//! reporting.

pub mod config;
pub mod eval;
pub mod report;
pub mod train;

pub use config::{Arch, DataConfig, NetworkConfig, Objective, RunConfig, Splits, SweepConfig};
pub use eval::{compactness, evaluate, mean_box_width, transfer_eval, AccuracyRecord, CompactnessRecord};
pub use report::{report, run_sweep, run_to_dir, RunSummary};
pub use train::{train, MetricsRecord, TrainOutcome};
