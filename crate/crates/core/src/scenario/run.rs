use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use super::{
    collect_epos, Backend, CostKind, Deployed, EposSettings, Finished, ScenarioConfig, ScenarioError, Session, TraceLevel, DIAS_IDS,
    EPOS_IDS,
};
use crate::bootstrap::{check_protocol_order, ConformanceReport, GatewayPeerlet};
use crate::data::{generate_plans, night_steering, Horizon, PlanDatasetSpec};
use crate::dias::DiasConfig;
use crate::dynamics::{
    metrics_csv, parse_metrics_csv, relative_difference, DiasDriver, DiasDriverConfig, DiasWorkload, EposDriver, EposDriverConfig,
    IntensitySchedule, Level, MetricsRecord,
};
use crate::epos::{read_plan_file, AgentPreferences, EposConfig, GlobalCostFunction, PlanSet};
use crate::runtime::{ExecutionMode, LiveConfig, PeerId, SimConfig, TraceFilter};

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const TRACE_FILE: &str = "trace.txt";
pub const MONITORING_DIR: &str = "monitoring";
pub const ABORT_MARKER: &str = "ABORTED";

/// Plan sets from `plan_dir`, or generated from the seed.
pub fn load_plans(e: &EposSettings, seed: u64) -> Result<Vec<PlanSet>, ScenarioError> {
    let sets = match &e.plan_dir {
        None => generate_plans(&PlanDatasetSpec { num_agents: e.agents, plans_per_agent: e.plans, horizon: e.horizon, seed })
            .map_err(|err| ScenarioError::Other(err.to_string()))?,
        Some(dir) => (0..e.agents)
            .map(|i| {
                let path = dir.join(format!("agent-{i:04}.plans"));
                if !path.is_file() {
                    return Err(ScenarioError::MissingFile(path.display().to_string()));
                }
                read_plan_file(&path).map_err(|err| ScenarioError::Other(err.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?,
    };
    if let Some(bad) = sets.iter().position(|s| s.dim() != e.horizon.dim()) {
        return Err(ScenarioError::Other(format!(
            "plans of agent {bad} have dimension {}, horizon {} needs {}",
            sets[bad].dim(),
            e.horizon,
            e.horizon.dim()
        )));
    }
    Ok(sets)
}

/// Night-time target carrying the expected total demand: the sum over
/// agents of their mean plan energy, spread evenly over the night minutes,
/// and zero during the day.
pub fn steering(plans: &[PlanSet], horizon: Horizon) -> Vec<f64> {
    let total: f64 = plans
        .iter()
        .map(|s| s.plans().iter().map(|p| p.values.iter().sum::<f64>()).sum::<f64>() / s.len() as f64)
        .sum();
    let shape = night_steering(horizon, 1.0);
    let night = shape.iter().filter(|v| **v > 0.0).count().max(1);
    shape.iter().map(|v| v * total / night as f64).collect()
}

pub fn cost_function(kind: CostKind, plans: &[PlanSet], horizon: Horizon) -> GlobalCostFunction {
    match kind {
        CostKind::MinVar => GlobalCostFunction::MinVar,
        CostKind::MinRmse => GlobalCostFunction::MinRmse(steering(plans, horizon)),
    }
}

pub fn epos_config(e: &EposSettings, plans: &[PlanSet]) -> EposConfig {
    EposConfig {
        iterations: e.iterations,
        cost: cost_function(e.cost, plans, e.horizon),
        tree_seed: e.tree_seed,
        mode: e.mode,
        straggler_timeout_ms: e.straggler_ms,
        runs: 1,
        driver: None,
        normalize: false,
    }
}

pub fn dias_config(cfg: &ScenarioConfig) -> DiasConfig {
    let d = &cfg.dias;
    DiasConfig {
        view_size: d.view_size,
        gossip_period_ms: d.gossip_period_ms,
        dissemination_period_ms: d.dissemination_period_ms,
        bloom_m: d.bloom_m,
        bloom_h: d.bloom_h,
        k: d.k,
        driver: None,
    }
}

/// Backend for repetition `rep`.
pub fn backend(cfg: &ScenarioConfig, rep: u32) -> Backend {
    let seed = cfg.seed.wrapping_add(rep as u64);
    match cfg.mode {
        ExecutionMode::Sim => {
            let trace = match cfg.trace {
                TraceLevel::Off => TraceFilter::Off,
                TraceLevel::Protocol => TraceFilter::Messages { min_type: 1, max_type: 11 },
                TraceLevel::All => TraceFilter::All,
            };
            Backend::Sim(SimConfig { seed, trace, ..SimConfig::default() })
        }
        ExecutionMode::Live => Backend::Live(
            LiveConfig { base_port: Some(cfg.live.base_port), seed, ..LiveConfig::default() },
            Duration::from_secs(cfg.live.timeout_s),
        ),
    }
}

fn cost_row(run_id: String, t: u64, g: f64, l: f64, mode: ExecutionMode) -> MetricsRecord {
    let live = mode == ExecutionMode::Live;
    MetricsRecord {
        run_id,
        t,
        g_s: (!live).then_some(g),
        g_l: live.then_some(g),
        l_s: (!live).then_some(l),
        l_l: live.then_some(l),
        ..Default::default()
    }
}

/// Protocol conformance of every deployed service over the trace.
fn conformance(fin: &Finished, deployed: &[&Deployed]) -> Vec<ConformanceReport> {
    let Some(trace) = &fin.trace else { return Vec::new() };
    if trace.is_empty() {
        return Vec::new();
    }
    deployed.iter().map(|d| check_protocol_order(trace, d.gateway, &d.pairs())).collect()
}

fn injectivity_violations(fin: &Finished, deployed: &[&Deployed]) -> u64 {
    deployed
        .iter()
        .filter_map(|d| fin.peers.iter().find(|p| p.id() == d.gateway))
        .filter_map(|p| p.peerlet::<GatewayPeerlet>())
        .map(|g| g.injectivity_violations)
        .sum()
}

fn write_conformance(report: &mut String, checks: &[ConformanceReport]) {
    for (i, c) in checks.iter().enumerate() {
        let _ = writeln!(
            report,
            "protocol conformance [{i}]: {} pairs, {} running, {} rejoins ({} running again), {} violations",
            c.pairs,
            c.running,
            c.rejoins,
            c.rejoins_running,
            c.violations.len()
        );
        for v in c.violations.iter().take(5) {
            let _ = writeln!(report, "  violation: {v}");
        }
    }
}

/// Outcome of a scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub report: String,
}

/// Runs the configured scenario and writes its artifacts to the output
/// directory. On an abort the partial metrics, the report and an abort
/// marker are still written.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutcome, ScenarioError> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let marker = dir.join(ABORT_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let mut records = Vec::new();
    let mut report = format!("scenario: {}\n", cfg.summary());
    let result = if cfg.dynamics.enabled {
        run_dynamic(cfg, &dir, &mut records, &mut report).map(|_| ())
    } else {
        run_static(cfg, &dir, &mut records, &mut report)
    };
    fs::write(dir.join(METRICS_FILE), metrics_csv(&records))?;
    report.push_str(&report_from_metrics(&records));
    match result {
        Ok(()) => {
            report.push_str("status: ok\n");
            fs::write(dir.join(REPORT_FILE), &report)?;
            Ok(ScenarioOutcome { dir, records, report })
        }
        Err(e) => {
            let _ = writeln!(report, "status: aborted: {e}");
            fs::write(dir.join(REPORT_FILE), &report)?;
            fs::write(&marker, format!("{e}\n"))?;
            Err(e)
        }
    }
}

fn sim_deadline(cfg: &ScenarioConfig) -> u64 {
    let epos = (cfg.epos.iterations as u64 + 1) * 40 * (cfg.epos.agents as u64).max(1);
    600_000 + epos + cfg.dias.duration_ms + cfg.dias.warmup_ms
}

fn run_static(cfg: &ScenarioConfig, dir: &Path, records: &mut Vec<MetricsRecord>, report: &mut String) -> Result<(), ScenarioError> {
    if cfg.service.epos() {
        let plans = load_plans(&cfg.epos, cfg.seed)?;
        let prefs = vec![AgentPreferences::new(cfg.epos.alpha, cfg.epos.beta).map_err(|e| ScenarioError::Other(e.to_string()))?; plans.len()];
        let argmin: Vec<usize> = plans.iter().map(|s| s.local_argmin()).collect();
        let mut finals = Vec::new();
        for rep in 0..cfg.repetitions {
            let mut ec = epos_config(&cfg.epos, &plans);
            ec.tree_seed = cfg.epos.tree_seed.wrapping_add(rep as u64);
            let monitor_dir = dir.join(MONITORING_DIR).join(format!("epos-rep-{rep}"));
            let mut s = Session::new(&backend(cfg, rep), Some(&monitor_dir))?;
            let dep = s.deploy_epos(&plans, &prefs, ec, None)?;
            let missing = s.wait_for(&["service_done"], sim_deadline(cfg))?;
            let fin = s.finish();
            let (history, selections) = collect_epos(&fin.peers, &dep);
            for r in &history {
                records.push(cost_row(format!("rep-{rep}"), r.t as u64, r.global_cost, r.local_cost, cfg.mode));
            }
            if rep == 0 {
                if let Some(t) = &fin.trace {
                    fs::write(dir.join(TRACE_FILE), t.to_text())?;
                }
                write_conformance(report, &conformance(&fin, &[&dep]));
            }
            if !missing.is_empty() {
                let why = fin.signals.iter().find(|s| s.name.ends_with("aborted")).map(|s| format!("{}: {}", s.name, s.value));
                return Err(ScenarioError::Aborted(format!("epos repetition {rep}: {}", why.unwrap_or_else(|| "no completion".into()))));
            }
            let hits = selections.iter().zip(&argmin).filter(|(s, a)| **s == Some(**a)).count();
            let last = history.last();
            let _ = writeln!(
                report,
                "epos rep {rep}: iterations {}, final global cost {}, final local cost {}, local-cost argmin selections {hits}/{}, {} log records, {} ms",
                history.len(),
                last.map(|r| r.global_cost.to_string()).unwrap_or_default(),
                last.map(|r| r.local_cost.to_string()).unwrap_or_default(),
                selections.len(),
                fin.logged,
                fin.elapsed_ms
            );
            if let Some(r) = last {
                finals.push(r.global_cost);
            }
        }
        if !finals.is_empty() {
            let _ = writeln!(report, "epos mean final global cost: {}", finals.iter().sum::<f64>() / finals.len() as f64);
        }
    }
    if cfg.service.dias() {
        let n = cfg.dias.agents;
        let workload = DiasWorkload::new(n, cfg.dias.k, cfg.seed);
        let initial: Vec<_> = (0..n).map(|i| (workload.raw(i), workload.states(i).clone())).collect();
        let driver = dias_driver_config(cfg, false);
        let mut s = Session::new(&backend(cfg, 0), Some(&dir.join(MONITORING_DIR).join("dias")))?;
        let dep = s.deploy_dias(&initial, dias_config(cfg), Some(driver))?;
        let missing = s.wait_for(&["dias_driver_done"], sim_deadline(cfg))?;
        let fin = s.finish();
        if !cfg.service.epos() {
            if let Some(t) = &fin.trace {
                fs::write(dir.join(TRACE_FILE), t.to_text())?;
            }
        }
        write_conformance(report, &conformance(&fin, &[&dep]));
        let d = find_driver::<DiasDriver>(&fin, DIAS_IDS.driver);
        if let Some(d) = d {
            records.extend(d.metrics());
            let last = d.samples.last();
            let _ = writeln!(
                report,
                "dias: {} samples, true sum {}, final mean estimate {}, final error {}",
                d.samples.len(),
                last.map(|s| s.true_sum).unwrap_or_default(),
                last.map(|s| s.mean_estimate).unwrap_or_default(),
                last.map(|s| s.instant).unwrap_or_default()
            );
        }
        if !missing.is_empty() {
            return Err(ScenarioError::Aborted("dias driver did not finish".into()));
        }
    }
    Ok(())
}

fn find_driver<T: crate::runtime::Peerlet>(fin: &Finished, id: u64) -> Option<&T> {
    fin.peers.iter().find(|p| p.id() == PeerId(id)).and_then(|p| p.peerlet::<T>())
}

fn schedule(cfg: &ScenarioConfig) -> Result<IntensitySchedule, ScenarioError> {
    IntensitySchedule::from_levels(&cfg.dynamics.levels, cfg.dynamics.period_ms, cfg.dynamics.minute_ms)
        .map_err(|e| ScenarioError::Other(e.to_string()))
}

fn dias_driver_config(cfg: &ScenarioConfig, inject: bool) -> DiasDriverConfig {
    DiasDriverConfig {
        agents: Vec::new(),
        schedule: schedule(cfg).expect("validated levels"),
        seed: cfg.seed,
        k: cfg.dias.k,
        warmup_ms: cfg.dias.warmup_ms,
        duration_ms: if inject { cfg.dynamics.duration_ms } else { cfg.dias.duration_ms },
        churn: cfg.dias.churn,
        sample_period_ms: cfg.dias.sample_period_ms,
        window: cfg.dias.window,
        inject,
    }
}

/// Result of a run under injected dynamics.
pub struct DynamicsOutcome {
    pub finished: Finished,
    pub epos: Option<Deployed>,
    pub dias: Option<Deployed>,
    pub conformance: Vec<ConformanceReport>,
    pub injectivity_violations: u64,
    /// Drivers that did not report completion.
    pub missing: Vec<String>,
}

impl DynamicsOutcome {
    pub fn epos_driver(&self) -> Option<&EposDriver> {
        self.epos.as_ref().and_then(|_| find_driver(&self.finished, EPOS_IDS.driver))
    }

    pub fn dias_driver(&self) -> Option<&DiasDriver> {
        self.dias.as_ref().and_then(|_| find_driver(&self.finished, DIAS_IDS.driver))
    }

    pub fn records(&self) -> Vec<MetricsRecord> {
        let mut out = Vec::new();
        if let Some(d) = self.epos_driver() {
            out.extend(d.metrics());
        }
        if let Some(d) = self.dias_driver() {
            out.extend(d.metrics());
        }
        out
    }

    pub fn violations(&self) -> usize {
        self.conformance.iter().map(|c| c.violations.len()).sum::<usize>() + self.injectivity_violations as usize
    }
}

/// Deploys the configured services with their drivers and runs the
/// intensity schedule for the configured duration.
pub fn execute_dynamics(cfg: &ScenarioConfig, monitor_dir: Option<&Path>) -> Result<DynamicsOutcome, ScenarioError> {
    let mut s = Session::new(&backend(cfg, 0), monitor_dir)?;
    let mut waits = Vec::new();
    let epos = if cfg.service.epos() {
        let plans = load_plans(&cfg.epos, cfg.seed)?;
        let prefs = vec![AgentPreferences::new(cfg.epos.alpha, cfg.epos.beta).map_err(|e| ScenarioError::Other(e.to_string()))?; plans.len()];
        let mut ec = epos_config(&cfg.epos, &plans);
        ec.runs = 0;
        let n = plans.len();
        let driver = EposDriverConfig {
            agents: Vec::new(),
            schedule: schedule(cfg)?,
            seed: cfg.seed,
            iterations: cfg.epos.iterations,
            static_runs: cfg.dynamics.static_runs,
            end_ms: cfg.dynamics.duration_ms,
            max_runs: None,
            min_present: ((n as f64) * cfg.dynamics.min_present_fraction).ceil() as usize,
            steering: steering(&plans, cfg.epos.horizon),
            initial_cost: ec.cost.clone(),
            step_timeout_ms: cfg.dynamics.step_timeout_ms,
        };
        waits.push("epos_driver_done");
        Some(s.deploy_epos(&plans, &prefs, ec, Some(driver))?)
    } else {
        None
    };
    let dias = if cfg.service.dias() {
        let n = cfg.dias.agents;
        let workload = DiasWorkload::new(n, cfg.dias.k, cfg.seed);
        let initial: Vec<_> = (0..n).map(|i| (workload.raw(i), workload.states(i).clone())).collect();
        waits.push("dias_driver_done");
        Some(s.deploy_dias(&initial, dias_config(cfg), Some(dias_driver_config(cfg, true)))?)
    } else {
        None
    };
    let deadline = cfg.dynamics.duration_ms * 2 + sim_deadline(cfg);
    let missing = s.wait_for(&waits, deadline)?;
    let finished = s.finish();
    let deployed: Vec<&Deployed> = epos.iter().chain(dias.iter()).collect();
    let conformance = conformance(&finished, &deployed);
    let injectivity_violations = injectivity_violations(&finished, &deployed);
    Ok(DynamicsOutcome { conformance, injectivity_violations, missing, finished, epos, dias })
}

/// Per-level means of latency, WAT and aggregation error, plus change
/// counts, as report lines.
pub fn dynamics_summary(out: &DynamicsOutcome) -> String {
    let mut report = String::new();
    if let Some(d) = out.epos_driver() {
        let aborted = d.records.iter().filter(|r| r.aborted).count();
        let _ = writeln!(
            report,
            "epos dynamics: {} runs ({} aborted), {} plan, {} weight, {} cost-function changes, {} joins, {} leaves, {} skipped, {} timeouts",
            d.records.len(),
            aborted,
            d.plan_changes,
            d.weight_changes,
            d.gcf_changes,
            d.joins,
            d.leaves,
            d.skipped,
            d.timeouts
        );
    }
    if let Some(d) = out.dias_driver() {
        let rec = d.recovery(0.05, 10 * 200);
        let ok = rec.iter().filter(|(_, h)| h.is_some()).count();
        let _ = writeln!(
            report,
            "dias dynamics: {} samples, {} selected-state and {} possible-state updates, {} joins, {} leaves, {} of {} bursts recovered",
            d.samples.len(),
            d.selected_changes,
            d.states_changes,
            d.joins,
            d.leaves,
            ok,
            rec.len()
        );
    }
    let _ = writeln!(
        report,
        "crashes: {}, invariant violations: {}, log records: {}, elapsed {} ms",
        out.finished.crashes,
        out.violations(),
        out.finished.logged,
        out.finished.elapsed_ms
    );
    write_conformance(&mut report, &out.conformance);
    report
}

fn run_dynamic(cfg: &ScenarioConfig, dir: &Path, records: &mut Vec<MetricsRecord>, report: &mut String) -> Result<DynamicsOutcome, ScenarioError> {
    let out = execute_dynamics(cfg, Some(&dir.join(MONITORING_DIR)))?;
    records.extend(out.records());
    if let Some(t) = &out.finished.trace {
        fs::write(dir.join(TRACE_FILE), t.to_text())?;
    }
    report.push_str(&dynamics_summary(&out));
    if !out.missing.is_empty() {
        return Err(ScenarioError::Aborted(format!("drivers did not finish: {}", out.missing.join(", "))));
    }
    if out.finished.crashes > 0 {
        return Err(ScenarioError::Aborted(format!("{} peers crashed", out.finished.crashes)));
    }
    Ok(out)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

/// Summary of a metrics file: per-iteration mean costs, relative
/// differences, and per-intensity latency, WAT and aggregation error.
pub fn report_from_metrics(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    let mut by_t: BTreeMap<u64, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.run_id.starts_with("rep-")) {
        by_t.entry(r.t).or_default().push(r);
    }
    if !by_t.is_empty() {
        out.push_str("iteration,mean_g_s,mean_g_l,mean_l_s,mean_l_l,mean_rel_g,mean_abs_rel_g,mean_rel_l\n");
        for (t, rows) in &by_t {
            let col = |f: fn(&MetricsRecord) -> Option<f64>| -> Vec<f64> { rows.iter().filter_map(|r| f(r)).collect() };
            let rel_g = col(|r| r.rel_g);
            let abs: Vec<f64> = rel_g.iter().map(|v| v.abs()).collect();
            let _ = writeln!(
                out,
                "{t},{},{},{},{},{},{},{}",
                fmt_opt(mean(&col(|r| r.g_s))),
                fmt_opt(mean(&col(|r| r.g_l))),
                fmt_opt(mean(&col(|r| r.l_s))),
                fmt_opt(mean(&col(|r| r.l_l))),
                fmt_opt(mean(&rel_g)),
                fmt_opt(mean(&abs)),
                fmt_opt(mean(&col(|r| r.rel_l)))
            );
        }
    }
    for level in Level::ALL {
        let rows: Vec<&MetricsRecord> = records.iter().filter(|r| r.intensity == Some(level)).collect();
        if rows.is_empty() {
            continue;
        }
        let latency: Vec<f64> = rows.iter().filter_map(|r| r.latency).collect();
        let wat: Vec<f64> = rows.iter().filter_map(|r| r.wat).filter(|w| w.is_finite()).collect();
        let err: Vec<f64> = rows.iter().filter_map(|r| r.dias_err).collect();
        let _ = writeln!(
            out,
            "{level}: {} epos runs, mean latency {}, mean WAT {}, {} dias samples, mean dias error {}",
            latency.len(),
            fmt_opt(mean(&latency)),
            fmt_opt(mean(&wat)),
            err.len(),
            fmt_opt(mean(&err))
        );
    }
    out
}

/// Per-iteration comparison of a SIM and a LIVE metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// One row per (run, iteration) with both modes and their relative
    /// differences.
    pub rows: Vec<MetricsRecord>,
    /// Mean relative global and local difference per iteration.
    pub per_iteration: Vec<(u64, f64, f64)>,
    pub mean_rel_g: f64,
    pub mean_rel_l: f64,
}

/// Joins cost rows of a SIM run and a LIVE run on (run, iteration) and
/// computes the relative differences.
pub fn compare_runs(sim_csv: &str, live_csv: &str) -> Result<Comparison, ScenarioError> {
    let parse = |t: &str| parse_metrics_csv(t).map_err(|e| ScenarioError::Other(e.to_string()));
    let sim: BTreeMap<(String, u64), MetricsRecord> =
        parse(sim_csv)?.into_iter().filter(|r| r.g_s.is_some()).map(|r| ((r.run_id.clone(), r.t), r)).collect();
    let live: BTreeMap<(String, u64), MetricsRecord> =
        parse(live_csv)?.into_iter().filter(|r| r.g_l.is_some()).map(|r| ((r.run_id.clone(), r.t), r)).collect();
    if sim.is_empty() || live.is_empty() {
        return Err(ScenarioError::Shape(format!("{} SIM and {} LIVE cost rows", sim.len(), live.len())));
    }
    if sim.len() != live.len() || !sim.keys().eq(live.keys()) {
        let only_sim = sim.keys().find(|k| !live.contains_key(*k));
        let only_live = live.keys().find(|k| !sim.contains_key(*k));
        return Err(ScenarioError::Shape(format!(
            "{} SIM rows vs {} LIVE rows; first unmatched SIM {:?}, LIVE {:?}",
            sim.len(),
            live.len(),
            only_sim,
            only_live
        )));
    }
    let undefined = |e: crate::dynamics::DynamicsError| ScenarioError::Other(e.to_string());
    let mut rows = Vec::new();
    let mut per_t: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((run, t), s) in &sim {
        let l = &live[&(run.clone(), *t)];
        let (gs, gl) = (s.g_s.expect("filtered"), l.g_l.expect("filtered"));
        let rel_g = relative_difference(gs, gl).or_else(|e| if gs == gl { Ok(0.0) } else { Err(undefined(e)) })?;
        let rel_l = match (s.l_s, l.l_l) {
            (Some(a), Some(b)) if a == b => Some(0.0),
            (Some(a), Some(b)) => relative_difference(a, b).ok(),
            _ => None,
        };
        let e = per_t.entry(*t).or_default();
        e.0.push(rel_g);
        if let Some(v) = rel_l {
            e.1.push(v);
        }
        rows.push(MetricsRecord {
            run_id: run.clone(),
            t: *t,
            g_s: Some(gs),
            g_l: Some(gl),
            l_s: s.l_s,
            l_l: l.l_l,
            rel_g: Some(rel_g),
            rel_l,
            ..Default::default()
        });
    }
    let per_iteration: Vec<(u64, f64, f64)> =
        per_t.into_iter().map(|(t, (g, l))| (t, mean(&g).unwrap_or(0.0), mean(&l).unwrap_or(0.0))).collect();
    let all_g: Vec<f64> = rows.iter().filter_map(|r| r.rel_g).collect();
    let all_l: Vec<f64> = rows.iter().filter_map(|r| r.rel_l).collect();
    Ok(Comparison { rows, per_iteration, mean_rel_g: mean(&all_g).unwrap_or(0.0), mean_rel_l: mean(&all_l).unwrap_or(0.0) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epos::Plan;

    fn rows(mode: ExecutionMode, g: &[f64]) -> String {
        let r: Vec<MetricsRecord> = g.iter().enumerate().map(|(t, v)| cost_row("rep-0".into(), t as u64 + 1, *v, 1.0, mode)).collect();
        metrics_csv(&r)
    }

    #[test]
    fn identical_runs_compare_to_zero() {
        let c = compare_runs(&rows(ExecutionMode::Sim, &[3.0, 2.0]), &rows(ExecutionMode::Live, &[3.0, 2.0])).unwrap();
        assert_eq!(c.per_iteration, vec![(1, 0.0, 0.0), (2, 0.0, 0.0)]);
        assert_eq!((c.mean_rel_g, c.mean_rel_l), (0.0, 0.0));
    }

    #[test]
    fn known_pair_gives_a_tenth() {
        let c = compare_runs(&rows(ExecutionMode::Sim, &[10.0]), &rows(ExecutionMode::Live, &[9.0])).unwrap();
        assert!((c.rows[0].rel_g.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(c.rows[0].g_s, Some(10.0));
        assert_eq!(c.rows[0].g_l, Some(9.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let e = compare_runs(&rows(ExecutionMode::Sim, &[1.0, 2.0]), &rows(ExecutionMode::Live, &[1.0])).unwrap_err();
        assert!(matches!(e, ScenarioError::Shape(_)));
        let e = compare_runs(&rows(ExecutionMode::Sim, &[1.0]), &rows(ExecutionMode::Sim, &[1.0])).unwrap_err();
        assert!(matches!(e, ScenarioError::Shape(_)));
    }

    #[test]
    fn steering_spreads_total_energy_over_the_night() {
        let set = PlanSet::new(vec![Plan::new(vec![1.0; 24], 0.0).unwrap(), Plan::new(vec![3.0; 24], 0.0).unwrap()]).unwrap();
        let s = steering(&[set.clone(), set], Horizon::Reduced(24));
        // Mean energy per agent is 48, so 96 in total over 8 night hours.
        assert_eq!(s.iter().filter(|v| **v > 0.0).count(), 8);
        assert!((s.iter().sum::<f64>() - 96.0).abs() < 1e-9);
        assert_eq!(s[12], 0.0);
        assert_eq!(s[0], 12.0);
    }
}
