//! Experiment configuration, data sources, sweeps and CSV/JSON output.

pub mod config;
pub mod data;
pub mod experiments;
pub mod output;

pub use config::{ExperimentConfig, ExperimentKind, ModelSpec, StepRule};
pub use data::{parse_libsvm, parse_libsvm_str, simulate_logistic_dataset, LibsvmData};
pub use experiments::run_experiment;
pub use output::{emit_csv, emit_json, read_csv, write_csv, MetricRow, RunRecord};
