//! Synthetic continual-learning tasks, metrics, experiment orchestration,
//! configuration, record output and the CLI commands.

pub mod cli;
mod config;
mod evaluate;
mod experiment;
mod metrics;
mod records;
mod tasks;
pub mod verify;

pub use config::{parse_config, parse_config_str, ExperimentConfig, ExperimentSection};
pub use evaluate::{evaluate, median, per_sample_errors, Metric, MetricKind};
pub use experiment::{
    dominant_slots, final_routing_entropy, prepare, routing_overlap, run_arm, run_experiment, ArmOutput, Prepared,
    Summary,
};
pub use metrics::{average_accuracy, forgetting_first_task, AccuracyMatrix};
pub use records::{null_writer, RecordWriter, SCHEMA_VERSION};
pub use tasks::{generate_tasks, tasks_checksum, SyntheticTaskSpec, TaskConfig};
