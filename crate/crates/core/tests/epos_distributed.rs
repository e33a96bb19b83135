use std::time::Duration;

use agentbed::data::{generate_plans, Horizon, PlanDatasetSpec};
use agentbed::epos::{build_tree, run_iteration, AgentPreferences, EposAgent, EposConfig, GlobalCostFunction, IterationMode, IterationState};
use agentbed::runtime::{LiveConfig, SimConfig, TraceFilter};
use agentbed::scenario::{run_epos_once, Backend};

fn instance(n: usize, d: usize, seed: u64) -> (Vec<agentbed::epos::PlanSet>, Vec<AgentPreferences>) {
    let plans = generate_plans(&PlanDatasetSpec { num_agents: n, plans_per_agent: 4, horizon: Horizon::Reduced(d), seed }).unwrap();
    let prefs = (0..n).map(|i| AgentPreferences::new(0.1 * (i % 3) as f64, 0.2 * (i % 2) as f64).unwrap()).collect();
    (plans, prefs)
}

fn sim() -> Backend {
    Backend::Sim(SimConfig { trace: TraceFilter::Off, ..SimConfig::default() })
}

fn engine(plans: &[agentbed::epos::PlanSet], prefs: &[AgentPreferences], cfg: &EposConfig) -> IterationState {
    let agents: Vec<EposAgent> = plans.iter().zip(prefs).map(|(p, a)| EposAgent { plans: p.clone(), prefs: *a }).collect();
    let ids: Vec<usize> = (0..agents.len()).collect();
    let topo = build_tree(&ids, cfg.tree_seed).unwrap();
    let mut st = IterationState::new(agents.len(), plans[0].dim(), cfg.iterations);
    while st.t < cfg.iterations {
        run_iteration(&mut st, &topo, &agents, &cfg.cost, cfg.normalize).unwrap();
    }
    st
}

#[test]
fn distributed_sim_matches_in_process_engine() {
    for seed in [1u64, 7] {
        let (plans, prefs) = instance(13, 16, seed);
        let cfg = EposConfig { iterations: 12, tree_seed: seed, ..EposConfig::default() };
        let out = run_epos_once(&sim(), &plans, &prefs, cfg.clone(), 60_000).unwrap();
        let st = engine(&plans, &prefs, &cfg);
        assert_eq!(out.history, st.history, "seed {seed}");
        let expected: Vec<Option<usize>> = st.selected.clone();
        assert_eq!(out.selections, expected, "seed {seed}");
    }
}

#[test]
fn sim_runs_are_repeatable() {
    let (plans, prefs) = instance(9, 8, 3);
    let cfg = EposConfig { iterations: 8, cost: GlobalCostFunction::MinVar, ..EposConfig::default() };
    let a = run_epos_once(&Backend::Sim(SimConfig::default()), &plans, &prefs, cfg.clone(), 60_000).unwrap();
    let b = run_epos_once(&Backend::Sim(SimConfig::default()), &plans, &prefs, cfg, 60_000).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.trace.unwrap().to_bytes(), b.trace.unwrap().to_bytes());
}

#[test]
fn lockstep_live_matches_sim() {
    let (plans, prefs) = instance(8, 8, 11);
    let cfg = EposConfig { iterations: 10, tree_seed: 4, mode: IterationMode::Lockstep, ..EposConfig::default() };
    let s = run_epos_once(&sim(), &plans, &prefs, cfg.clone(), 60_000).unwrap();
    let live = Backend::Live(LiveConfig { base_port: Some(23_310), ..LiveConfig::default() }, Duration::from_secs(30));
    let l = run_epos_once(&live, &plans, &prefs, cfg, 0).unwrap();
    assert_eq!(s.history, l.history);
    assert_eq!(s.selections, l.selections);
}
