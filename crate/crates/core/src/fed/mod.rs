//! Federated simulation: data partitions, rounds, baselines and full runs.

pub mod baseline;
pub mod experiment;
pub mod oracle;
pub mod partition;
pub mod round;

pub use baseline::run_fedavg_baseline;
pub use experiment::{
    evaluate, pruning_rows, read_metrics, run_experiment, run_pruning_phase, CsvMetricsWriter, ExperimentOutcome,
    MetricsSink, Phase, RoundMetrics, Trainer, METRICS_HEADER,
};
pub use oracle::{full_vector_estimate, run_full_vector_round};
pub use partition::{dirichlet_partition, ClientPartition};
pub use round::{
    aggregation_weights, apply_update, device_step, run_training_round, DeviceUpload, RoundOutcome,
    RoundPlan, ServerState, TrainSettings,
};
