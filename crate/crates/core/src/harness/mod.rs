//! Dataset ingestion, folds, metrics, synthetic fixtures, ablation grids and
//! reports.

pub mod ablation;
pub mod config;
pub mod fixture;
pub mod folds;
pub mod manifest;
pub mod metrics;
pub mod report;

pub use ablation::{run_ablation_grid, AblationCell, CellResult, Grid};
pub use config::RunConfig;
pub use fixture::{make_fixture, make_synthetic_fixture, FixtureSpec};
pub use folds::{make_iemocap_folds, Fold};
pub use manifest::{load_manifest, validate_meld_splits, DatasetKind, DatasetManifest, UtteranceRecord};
pub use metrics::{compute_metrics, MetricsReport};
pub use report::{emit_report, render_text, Report, ReportFormat};
