//! Scenario files, runs and reports.

mod report;
mod scenario;

pub use report::{emit_report, FaultEvent, LossRow, MetricsReport, ReportFormat};
pub use scenario::{
    build_sim, emit_scenario, heldout, initial_model, parse_scenario, pooled_data, resolve_layout, shards, validate,
    DataConfig, MetricsOptions, ScenarioConfig, Timing,
};

use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::archetypes::ConformanceReport;
use crate::netsim::{NetError, RunStatus, Sim};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid {path}: {message}")]
    Config { path: String, message: String },
    #[error("conformance: {0}")]
    Conformance(ConformanceReport),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("scenario {scenario}: {source}")]
    Run {
        scenario: String,
        #[source]
        source: NetError,
    },
    #[error(transparent)]
    Net(#[from] NetError),
}

impl HarnessError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Parse { .. } | HarnessError::Config { .. } | HarnessError::Conformance(_) => 2,
            _ => 1,
        }
    }
}

/// Exit code for a finished run.
pub fn status_exit_code(status: RunStatus) -> i32 {
    match status {
        RunStatus::Completed | RunStatus::Converged | RunStatus::Quiescent | RunStatus::TickLimit => 0,
        RunStatus::AbortedViability => 3,
        RunStatus::AbortedDeadlock => 4,
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub report: MetricsReport,
    pub sim: Sim,
}

/// Builds and runs a scenario to its stop rule.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioRun, HarnessError> {
    let started = Instant::now();
    let mut sim = build_sim(cfg)?;
    sim.run_until(&cfg.stop).map_err(|source| HarnessError::Run {
        scenario: cfg.name.clone(),
        source,
    })?;
    let threshold = cfg.metrics.loss_threshold.or(cfg.stop.loss_below);
    let mut report = MetricsReport::from_sim(&cfg.name, cfg.seed, &sim, threshold);
    if cfg.metrics.wall_time {
        report.wall_time_ms = Some(started.elapsed().as_secs_f64() * 1e3);
    }
    Ok(ScenarioRun { report, sim })
}

/// Writes the report and, when asked, the trace into `dir`.
pub fn write_outputs(
    run: &ScenarioRun,
    format: ReportFormat,
    trace: bool,
    dir: &Path,
) -> Result<Vec<std::path::PathBuf>, HarnessError> {
    let mut written = emit_report(&run.report, format, dir)?;
    if trace {
        let path = dir.join("trace.jsonl");
        std::fs::write(&path, run.sim.trace.to_jsonl()).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        written.push(path);
    }
    Ok(written)
}
