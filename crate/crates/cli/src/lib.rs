//! Configuration-driven experiment pipeline behind the `uma` binary.
//!
//! A run goes through `gen-data → train → unlearn → attack → verify → defend
//! → report`, writing every artifact under the output directory and recording
//! its SHA-256 in `manifest.json`.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
pub use manifest::Manifest;
pub use pipeline::{run_experiment, sweep, Pipeline, Stage, SweepParam};
pub use report::render_report;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {cause}")]
    Stage { stage: String, cause: String },
    #[error("integrity error: {0}")]
    Integrity(String),
}

impl CliError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Stage { .. } => 3,
            Self::Integrity(_) => 4,
        }
    }

    pub(crate) fn stage(stage: &str, cause: impl ToString) -> Self {
        Self::Stage { stage: stage.to_string(), cause: cause.to_string() }
    }
}

impl From<uma_core::Error> for CliError {
    fn from(e: uma_core::Error) -> Self {
        match e {
            uma_core::Error::Config(m) => Self::Config(m),
            uma_core::Error::Integrity(m) => Self::Integrity(m),
            other => Self::stage("core", other),
        }
    }
}
