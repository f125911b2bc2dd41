//! Closed-loop experiments driven by a JSON config.

mod compare;
mod config;
mod run;

pub use compare::{compare_reports, compare_runs, Comparison, Dominance, ParsedReport};
pub use config::{
    CameraConfig, ExcitationConfig, ExperimentConfig, FlowConfig, OutputConfig, SceneConfig,
    ServoBlock, Thresholds, WarpConfig, Waypoint,
};
pub use run::{run_experiment, CheckResult, DeadlineError, FrameMetrics, RunReport, REPORT_HEADER};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("report schema mismatch: {0}")]
    SchemaMismatch(String),
}

impl ExperimentError {
    /// Process exit code: 2 for configuration problems, 3 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::SchemaMismatch(_) => 2,
            ExperimentError::Io(_) | ExperimentError::Runtime(_) => 3,
        }
    }
}
