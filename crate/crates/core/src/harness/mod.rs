//! Training, evaluation, experiments and parameter accounting.

pub mod accounting;
pub mod config;
pub mod experiments;
pub mod optim;
pub mod report;
pub mod train;

pub use accounting::{count_params_report, estimate_flops, ArchSpec, Scheme, SchemeKind};
pub use config::{Precision, RunConfig, TaskConfig, TrainConfig};
pub use experiments::{run_experiment, ExperimentName, ExperimentResult};
pub use optim::{Optimizer, OptimizerKind};
pub use train::{train, MetricsRecord, SeedPlan, TrainLog};
