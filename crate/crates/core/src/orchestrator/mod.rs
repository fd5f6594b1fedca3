//! The round loop: schedule, train locally, collect over the pipelined
//! uplink, aggregate per cluster, then grow or freeze the cluster tree.

mod config;
mod engine;
mod record;
mod report;

pub use config::ExperimentConfig;
pub use engine::{run, run_with_observer, RunOutcome};
pub use record::{ClusterEvent, ClusterStats, RoundRecord, StopReason};
pub use report::{
    accuracy_report, audit, final_models, first_split_round, metric_rows, read_events, summarize, write_event,
    write_metrics_csv, AccuracyReport, RunSummary, Violation,
};
