//! Experiment harness: configuration, cohort runs, traces and metrics.

pub mod config;
pub mod metrics;
pub mod run;
pub mod trace;

pub use config::{CohortConfig, Mode, RunConfig, TraceLevel};
pub use metrics::{compute_metrics, fmt_sig6, ConfidenceHistogram, Metrics, TrajectoryMetrics};
pub use run::{execute, run, run_id, Artifacts, RunOutcome, HISTOGRAM_FILE, METRICS_FILE, TRACE_FILE};
pub use trace::{format_record, parse_record, TRACE_FIELDS};
