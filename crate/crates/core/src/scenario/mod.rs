//! Scenario front end: deployments for either execution mode, config
//! files, scenario runs and reports.

mod config;
mod deploy;
mod experiment;
mod run;

pub use run::{
    backend, compare_runs, cost_function, dias_config, dynamics_summary, epos_config, execute_dynamics, load_plans, report_from_metrics, run_scenario,
    steering, Comparison, DynamicsOutcome, ScenarioOutcome, ABORT_MARKER, METRICS_FILE, MONITORING_DIR, REPORT_FILE, TRACE_FILE,
};
use thiserror::Error;

use crate::runtime::RuntimeError;

pub use config::{profile, CostKind, DiasSettings, DynamicsSettings, EposSettings, LiveSettings, ScenarioConfig, ServiceKind, TraceLevel, DEFAULT_CONFIG};
pub use deploy::{deploy_dias, deploy_epos, Deployed, IdBlock, Monitor, Net, DIAS_IDS, EPOS_IDS, LOG_GATEWAY_ID};
pub use experiment::{
    collect_epos, dias_estimates, run_dias_sim, run_epos_monitored, run_epos_once, Backend, EposOutcome, Finished, Session, MONITOR_TOKEN,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}:{line}: {message}")]
    Config { path: String, line: usize, message: String },
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

impl ScenarioError {
    /// Process exit code: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Config { .. } | ScenarioError::MissingFile(_) => 2,
            _ => 3,
        }
    }
}
