//! Batch evaluation: suite runs with resumable result storage, perturbation
//! sweeps, and human demonstration logs.

mod demo;
mod suite;
mod sweep;

pub use demo::{compare_human, replay_demo, trace_digest, verify_demo, ComparisonRow, DemoTick, DemonstrationLog, HumanComparison};
pub use suite::{
    discover_scenarios, episode_digest, load_records, load_suite_config, rebuild_report, run_suite, scenario_digest, BuiltinSuite, EpisodeRecord,
    RunOptions, Selector, SuiteConfig, SuiteOutcome, TransportFactory,
};
pub use sweep::{run_sweep, SweepGrid, SweepPoint, SweepReport, SweepRow};

use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScenarioProblem {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid suite config: {0}")]
    Config(String),
    #[error("{} scenario(s) could not be loaded:\n{}", .0.len(), .0.iter().map(|p| format!("  {}: {}", p.path.display(), p.message)).collect::<Vec<_>>().join("\n"))]
    Scenarios(Vec<ScenarioProblem>),
    #[error("episode {scenario} failed to start: {message}")]
    Episode { scenario: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sweep grid must contain the clean point (latency 0, no noise)")]
    NoCleanPoint,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("demonstration log: {0}")]
    Demo(String),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a temporary sibling and a rename so readers never see a partial file.
pub(crate) fn write_atomic(path: &std::path::Path, contents: &[u8]) -> Result<(), BenchError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}
