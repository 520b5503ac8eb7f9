//! Experiment harness: configuration, simulated clusters, workloads, oracles
//! and the metrics report.

pub mod cluster;
pub mod config;
pub mod experiments;
pub mod oracle;
pub mod report;
pub mod workload;

pub use cluster::{Cluster, Route, Workload};
pub use config::{ConfigError, ExperimentConfig, ExperimentKind, FuzzObject, MiddleboxKind};
pub use experiments::{run_experiment, simulate, HarnessError, RunOutput, Setup, Simulation};
pub use report::MetricsReport;
