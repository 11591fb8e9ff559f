//! Configuration, run orchestration, snapshot and metrics files.

pub mod config;
pub mod metrics;
pub mod run;
pub mod snapshot;

pub use config::{load_config, save_config, Mode, RunConfig};
pub use metrics::{axis_difference, error_norms, principal_axis, AxisFit, ErrorNorms, RunMetrics, SnapshotMetrics};
pub use run::{compare_dirs, run, snapshot_axis, snapshot_fields, ComparisonRow, RunOutput};
pub use snapshot::Snapshot;
