//! Experiment harness: configuration, the online loop, sweeps and reports.
//!
//! A run streams `steps` samples from a problem through a learner,
//! prequentially: each sample's loss is recorded before the learner updates
//! on it. Metrics are averaged over fixed-size bins.

pub mod config;
pub mod output;
pub mod run;
pub mod sweep;

pub use config::{
    AlgorithmConfig, AlgorithmKind, ExperimentConfig, LearnerConfig, MetricToggles,
    MnistProblemConfig, OptimizerKind, ProblemConfig, MNIST_DIR_ENV,
};
pub use output::{build_report, read_results, report_dir, write_results, Manifest, Report};
pub use run::{
    input_grad_magnitude, run_online, saturation_fraction, BinMetrics, Learner, Resources,
    RunMetrics, SATURATION_THRESHOLD,
};
pub use sweep::{
    aggregate, aggregate_by, best_cell, mean_stderr, run_many, run_sweep, total_loss_table,
    CellResult, Curve, GridCell, SweepSpec,
};
