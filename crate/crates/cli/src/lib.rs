//! Experiment driver for weight-shared sub-network ensembles: config
//! parsing, joint training, stacking, evaluation and run comparison.

pub mod alloc;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod report;
pub mod train;

pub use alloc::{thread_cpu_seconds, tune_allocator};
pub use config::{parse_config, parse_config_str, CombinerKind, DatasetFormat, TrainConfig};
pub use error::{CliError, Result};
pub use metrics::{read_metrics, MetricsRecord, METRICS_HEADER};
pub use train::{prepare_data, run_training, EvalSummary, PreparedData, TrainOutcome};
