//! Experiment configuration, orchestration and report output.

pub mod config;
pub mod report;
pub mod study;
pub mod tv;

pub use config::{load_config, parse_config, ConfigError, Experiment, ExperimentConfig, Violation};
pub use report::{emit_report, load_summary, ReportError};
pub use study::{
    limit_marginals, run_convergence_study, ComparisonReport, ComparisonRow, LimitMarginals,
    LimitMethod, StudyError, StudyOptions, Trend,
};
pub use tv::{tv_distance, TvError};
