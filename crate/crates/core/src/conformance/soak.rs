use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use crate::dynamics::{metrics_csv, Level, MetricsRecord};
use crate::scenario::{execute_dynamics, DynamicsOutcome, ScenarioConfig, ScenarioError, ServiceKind, TraceLevel};

/// Counts and series gathered by a soak run.
#[derive(Debug, Clone, Default)]
pub struct SoakReport {
    pub duration_ms: u64,
    pub elapsed_ms: u64,
    pub parameter_changes: u64,
    pub joins: u64,
    pub leaves: u64,
    pub messages: u64,
    pub crashes: usize,
    pub protocol_violations: usize,
    pub injectivity_violations: u64,
    pub rejoins: usize,
    pub rejoins_running: usize,
    pub driver_timeouts: u64,
    pub aborted_runs: usize,
    /// Mean latency and WAT per intensity level over dynamic runs.
    pub per_level: Vec<(Level, Option<f64>, Option<f64>)>,
    pub records: Vec<MetricsRecord>,
    /// Reasons the soak failed; empty on success.
    pub failures: Vec<String>,
}

impl SoakReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn latency(&self, level: Level) -> Option<f64> {
        self.per_level.iter().find(|(l, ..)| *l == level).and_then(|(_, lat, _)| *lat)
    }

    pub fn wat(&self, level: Level) -> Option<f64> {
        self.per_level.iter().find(|(l, ..)| *l == level).and_then(|(.., w)| *w)
    }

    pub fn csv(&self) -> String {
        metrics_csv(&self.records)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "soak: {} ms scheduled, {} ms elapsed", self.duration_ms, self.elapsed_ms);
        let _ = writeln!(s, "parameter changes: {}", self.parameter_changes);
        let _ = writeln!(s, "joins: {}, leaves: {}", self.joins, self.leaves);
        let _ = writeln!(s, "messages: {}", self.messages);
        let _ = writeln!(s, "crashes: {}", self.crashes);
        let _ = writeln!(s, "protocol violations: {}, injectivity violations: {}", self.protocol_violations, self.injectivity_violations);
        let _ = writeln!(s, "rejoins checked: {} ({} running again)", self.rejoins, self.rejoins_running);
        let _ = writeln!(s, "driver timeouts: {}, aborted runs: {}", self.driver_timeouts, self.aborted_runs);
        for (level, lat, wat) in &self.per_level {
            let f = |v: &Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{level}: mean latency {}, mean WAT {}", f(lat), f(wat));
        }
        if self.passed() {
            s.push_str("result: pass\n");
        } else {
            for f in &self.failures {
                let _ = writeln!(s, "failure: {f}");
            }
            s.push_str("result: fail\n");
        }
        s
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = v.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(out: &DynamicsOutcome, duration_ms: u64) -> SoakReport {
    let mut r = SoakReport {
        duration_ms,
        elapsed_ms: out.finished.elapsed_ms,
        messages: out.finished.peers.iter().map(|p| p.messages_sent()).sum(),
        crashes: out.finished.crashes,
        protocol_violations: out.conformance.iter().map(|c| c.violations.len()).sum(),
        injectivity_violations: out.injectivity_violations,
        rejoins: out.conformance.iter().map(|c| c.rejoins).sum(),
        rejoins_running: out.conformance.iter().map(|c| c.rejoins_running).sum(),
        records: out.records(),
        ..SoakReport::default()
    };
    if let Some(d) = out.epos_driver() {
        r.parameter_changes += d.parameter_changes();
        r.joins += d.joins;
        r.leaves += d.leaves;
        r.driver_timeouts += d.timeouts;
        r.aborted_runs = d.records.iter().filter(|x| x.aborted).count();
    }
    if let Some(d) = out.dias_driver() {
        r.parameter_changes += d.selected_changes + d.states_changes;
        r.joins += d.joins;
        r.leaves += d.leaves;
    }
    let epos_rows: Vec<&MetricsRecord> = r.records.iter().filter(|x| x.run_id.starts_with("epos-")).collect();
    for level in Level::ALL {
        let rows = || epos_rows.iter().filter(|x| x.intensity == Some(level));
        r.per_level.push((level, mean(rows().filter_map(|x| x.latency)), mean(rows().filter_map(|x| x.wat).filter(|w| w.is_finite()))));
    }
    for m in &out.missing {
        r.failures.push(format!("{m} not raised before the deadline"));
    }
    if r.crashes > 0 {
        r.failures.push(format!("{} peers crashed", r.crashes));
    }
    for (i, c) in out.conformance.iter().enumerate() {
        for v in c.violations.iter().take(10) {
            r.failures.push(format!("protocol order [{i}]: {v}"));
        }
    }
    if r.injectivity_violations > 0 {
        r.failures.push(format!("{} injectivity violations", r.injectivity_violations));
    }
    r
}

/// Runs both services under the configured intensity cycle for
/// `duration_ms` and checks that nothing crashed and no invariant fired.
/// A panic inside the run is reported as a crash.
pub fn soak(cfg: &ScenarioConfig, duration_ms: u64, monitor_dir: Option<&Path>) -> Result<SoakReport, ScenarioError> {
    let mut cfg = cfg.clone();
    cfg.dynamics.enabled = true;
    cfg.dynamics.duration_ms = duration_ms;
    cfg.service = ServiceKind::Both;
    if cfg.trace == TraceLevel::Off {
        cfg.trace = TraceLevel::Protocol;
    }
    match catch_unwind(AssertUnwindSafe(|| execute_dynamics(&cfg, monitor_dir))) {
        Ok(out) => Ok(summarize(&out?, duration_ms)),
        Err(panic) => {
            let why = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            Ok(SoakReport { duration_ms, crashes: 1, failures: vec![format!("panic: {why}")], ..SoakReport::default() })
        }
    }
}
