//! Experiment orchestration: configuration, run records, forgetting
//! measures, metric persistence and the command line.

mod bench;
mod cli;
mod config;
mod gradcheck;
mod run;

pub use bench::{blob_bench, null_calibration, BenchConfig, BenchSummary, BenchTrial};
pub use cli::{cli, Cli};
pub use config::{Config, RunConfig};
pub use gradcheck::{gradcheck_suite, GradCheckLine, LOSS_TOLERANCE, UNROLLED_TOLERANCE};
pub use run::{
    compute_forgetting, run_baseline, run_experiment, write_outputs, BaselineKind, Forgetting, MetricsLog, Method,
    Reference, RunRecord,
};
