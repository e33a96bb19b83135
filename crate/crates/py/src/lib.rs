//! Python bindings for agentbed.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::agentbed::conformance;
use ::agentbed::data::{self, Horizon, PlanDatasetSpec};
use ::agentbed::dias;
use ::agentbed::dynamics;
use ::agentbed::epos::{self, AgentPreferences, EposConfig, GlobalCostFunction, IterationMode, Plan, PlanSet};
use ::agentbed::runtime::{LiveConfig, SimConfig, TraceFilter};
use ::agentbed::scenario::{self, Backend, ScenarioConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn cost_fn(cost: &str, steering: Option<Vec<f64>>) -> PyResult<GlobalCostFunction> {
    match (cost.to_ascii_uppercase().as_str(), steering) {
        ("MIN_VAR", _) => Ok(GlobalCostFunction::MinVar),
        ("MIN_RMSE", Some(s)) => Ok(GlobalCostFunction::MinRmse(s)),
        ("MIN_RMSE", None) => Err(PyValueError::new_err("MIN_RMSE needs a steering signal")),
        (other, _) => Err(PyValueError::new_err(format!("unknown cost function {other}"))),
    }
}

/// Plan sets from Python: one list per agent of `(local_cost, values)`.
fn plan_sets(plans: Vec<Vec<(f64, Vec<f64>)>>) -> PyResult<Vec<PlanSet>> {
    plans
        .into_iter()
        .map(|set| {
            let ps = set.into_iter().map(|(c, v)| Plan::new(v, c)).collect::<Result<Vec<_>, _>>().map_err(value_err)?;
            PlanSet::new(ps).map_err(value_err)
        })
        .collect()
}

fn plans_out(sets: &[PlanSet]) -> Vec<Vec<(f64, Vec<f64>)>> {
    sets.iter().map(|s| s.plans().iter().map(|p| (p.local_cost, p.values.clone())).collect()).collect()
}

/// Global cost of a response vector: `MIN_VAR` or `MIN_RMSE` with a steering signal.
#[pyfunction]
#[pyo3(signature = (total, cost="MIN_VAR", steering=None))]
fn global_cost(total: Vec<f64>, cost: &str, steering: Option<Vec<f64>>) -> PyResult<f64> {
    epos::global_cost(&cost_fn(cost, steering)?, &total).map_err(value_err)
}

/// Standard deviation of local costs from their running moments.
#[pyfunction]
fn unfairness(total: f64, total_sq: f64, count: u64) -> PyResult<f64> {
    epos::unfairness(total, total_sq, count).map_err(value_err)
}

/// Parent of every agent `0..n` in the seeded balanced binary tree; `None` for the root.
#[pyfunction]
fn build_tree(n: usize, seed: u64) -> PyResult<Vec<Option<usize>>> {
    let ids: Vec<usize> = (0..n).collect();
    let t = epos::build_tree(&ids, seed).map_err(value_err)?;
    Ok(ids.iter().map(|i| t.parent(i).copied()).collect())
}

/// Synthetic plan sets: one list per agent of `(local_cost, values)`.
#[pyfunction]
#[pyo3(signature = (agents, plans=4, horizon="reduced:64", seed=0))]
fn generate_plans(agents: usize, plans: usize, horizon: &str, seed: u64) -> PyResult<Vec<Vec<(f64, Vec<f64>)>>> {
    let horizon: Horizon = horizon.parse().map_err(value_err)?;
    let sets = data::generate_plans(&PlanDatasetSpec { num_agents: agents, plans_per_agent: plans, horizon, seed }).map_err(value_err)?;
    Ok(plans_out(&sets))
}

/// Runs one collective-learning run over deployed agents and returns the
/// root history and every agent's selection.
#[pyfunction]
#[pyo3(signature = (plans, alpha=0.0, beta=0.0, iterations=50, cost="MIN_VAR", steering=None, seed=0, live=false, base_port=None))]
#[allow(clippy::too_many_arguments)]
fn run_epos<'py>(
    py: Python<'py>,
    plans: Vec<Vec<(f64, Vec<f64>)>>,
    alpha: f64,
    beta: f64,
    iterations: usize,
    cost: &str,
    steering: Option<Vec<f64>>,
    seed: u64,
    live: bool,
    base_port: Option<u16>,
) -> PyResult<Bound<'py, PyDict>> {
    let sets = plan_sets(plans)?;
    let prefs = vec![AgentPreferences::new(alpha, beta).map_err(value_err)?; sets.len()];
    let cfg = EposConfig { iterations, cost: cost_fn(cost, steering)?, tree_seed: seed, mode: IterationMode::Lockstep, ..EposConfig::default() };
    let backend = if live {
        Backend::Live(LiveConfig { base_port, seed, ..LiveConfig::default() }, std::time::Duration::from_secs(120))
    } else {
        Backend::Sim(SimConfig { seed, trace: TraceFilter::Off, ..SimConfig::default() })
    };
    let out = py.detach(|| scenario::run_epos_once(&backend, &sets, &prefs, cfg, 3_600_000)).map_err(runtime_err)?;
    let d = PyDict::new(py);
    let history: Vec<(usize, f64, f64, bool)> = out.history.iter().map(|r| (r.t, r.global_cost, r.local_cost, r.accepted)).collect();
    d.set_item("history", history)?;
    d.set_item("selections", out.selections)?;
    d.set_item("elapsed_ms", out.elapsed_ms)?;
    Ok(d)
}

/// Exhaustive optimum of a tiny instance: `(cost, selection, combinations)`.
#[pyfunction]
#[pyo3(signature = (plans, cost="MIN_VAR", steering=None))]
fn epos_oracle(plans: Vec<Vec<(f64, Vec<f64>)>>, cost: &str, steering: Option<Vec<f64>>) -> PyResult<(f64, Vec<usize>, u64)> {
    let o = conformance::epos_oracle(&plan_sets(plans)?, &cost_fn(cost, steering)?).map_err(value_err)?;
    Ok((o.cost, o.selection, o.combinations))
}

/// Exact `(t_ms, sum, count, min, max)` series from a text event log.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn dias_oracle(log: &str) -> PyResult<Vec<(u64, f64, usize, Option<f64>, Option<f64>)>> {
    let events = conformance::parse_event_log(log).map_err(value_err)?;
    let series = conformance::dias_oracle(&events).map_err(value_err)?;
    Ok(series.into_iter().map(|a| (a.t_ms, a.sum, a.count, a.min, a.max)).collect())
}

/// Bloom filter over byte strings.
#[pyclass]
struct BloomFilter {
    inner: dias::BloomFilter,
}

#[pymethods]
impl BloomFilter {
    #[new]
    #[pyo3(signature = (m=2048, h=4))]
    fn new(m: usize, h: u32) -> Self {
        BloomFilter { inner: dias::BloomFilter::new(m, h) }
    }

    fn insert(&mut self, item: &[u8]) {
        self.inner.insert(item);
    }

    fn contains(&self, item: &[u8]) -> bool {
        self.inner.contains(item)
    }

    fn expected_fpr(&self, n: usize) -> f64 {
        self.inner.expected_fpr(n)
    }
}

#[pyfunction]
fn relative_difference(sim_value: f64, live_value: f64) -> PyResult<f64> {
    dynamics::relative_difference(sim_value, live_value).map_err(value_err)
}

#[pyfunction]
fn latency(varying_ms: f64, static_ms: f64) -> PyResult<f64> {
    dynamics::latency(varying_ms, static_ms).map_err(value_err)
}

#[pyfunction]
fn wat(working_ms: f64, adaptivity_ms: f64) -> PyResult<f64> {
    dynamics::wat(working_ms, adaptivity_ms).map_err(value_err)
}

/// Per-iteration `(t, mean_rel_g, mean_rel_l)` of two metrics files' contents.
#[pyfunction]
fn compare_runs(sim_csv: &str, live_csv: &str) -> PyResult<Vec<(u64, f64, f64)>> {
    Ok(scenario::compare_runs(sim_csv, live_csv).map_err(value_err)?.per_iteration)
}

/// Documented default configuration.
#[pyfunction]
fn default_config() -> &'static str {
    scenario::DEFAULT_CONFIG
}

/// Runs a scenario from configuration text, writing artifacts to `out`;
/// returns the report.
#[pyfunction]
#[pyo3(signature = (config, out))]
fn run_scenario(py: Python<'_>, config: &str, out: PathBuf) -> PyResult<String> {
    let mut cfg = ScenarioConfig::parse(config, "<python>").map_err(value_err)?;
    cfg.output_dir = out;
    let r = py.detach(|| scenario::run_scenario(&cfg)).map_err(runtime_err)?;
    Ok(r.report)
}

/// Soak under cycling intensities; returns the text report and whether it passed.
#[pyfunction]
#[pyo3(signature = (duration_ms, config=None))]
fn soak(py: Python<'_>, duration_ms: u64, config: Option<&str>) -> PyResult<(String, bool)> {
    let cfg = match config {
        Some(text) => ScenarioConfig::parse(text, "<python>").map_err(value_err)?,
        None => ScenarioConfig::defaults(),
    };
    let r = py.detach(|| conformance::soak(&cfg, duration_ms, None)).map_err(runtime_err)?;
    Ok((r.to_text(), r.passed()))
}

#[pymodule]
fn agentbed(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(global_cost, m)?)?;
    m.add_function(wrap_pyfunction!(unfairness, m)?)?;
    m.add_function(wrap_pyfunction!(build_tree, m)?)?;
    m.add_function(wrap_pyfunction!(generate_plans, m)?)?;
    m.add_function(wrap_pyfunction!(run_epos, m)?)?;
    m.add_function(wrap_pyfunction!(epos_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(dias_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(relative_difference, m)?)?;
    m.add_function(wrap_pyfunction!(latency, m)?)?;
    m.add_function(wrap_pyfunction!(wat, m)?)?;
    m.add_function(wrap_pyfunction!(compare_runs, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(soak, m)?)?;
    m.add_class::<BloomFilter>()?;
    Ok(())
}
