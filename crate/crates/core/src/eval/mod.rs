//! Baseline controller, metrics, and the small tasks used to check the
//! learners in isolation.

mod fcfs;
mod metrics;
mod run;
mod synthetic;
pub mod toy;

pub use fcfs::FcfsState;
pub use metrics::{average, compute_metrics, csv_row, EpisodeLog, MetricsReport, StepLog, CSV_HEADER};
pub use run::{evaluate_fcfs, evaluate_policy};
pub use synthetic::synthetic_sequence_task;
