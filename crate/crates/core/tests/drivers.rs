use agentbed::data::{generate_plans, night_steering, Horizon, PlanDatasetSpec};
use agentbed::dias::DiasConfig;
use agentbed::dynamics::{
    DiasChurn, DiasDriver, DiasDriverConfig, DiasWorkload, EposDriver, EposDriverConfig, IntensitySchedule, Level, DESK_MINUTE_MS,
    DESK_PERIOD_MS,
};
use agentbed::epos::{AgentPreferences, EposConfig, GlobalCostFunction};
use agentbed::runtime::{PeerId, SimConfig, Simulation, TraceFilter};
use agentbed::scenario::{deploy_dias, deploy_epos, Net, DIAS_IDS, EPOS_IDS};

fn sim() -> Simulation {
    Simulation::new(SimConfig { trace: TraceFilter::Off, ..SimConfig::default() })
}

#[test]
fn epos_driver_applies_changes_between_runs() {
    let n = 16;
    let horizon = Horizon::Reduced(16);
    let plans = generate_plans(&PlanDatasetSpec { num_agents: n, plans_per_agent: 4, horizon, seed: 5 }).unwrap();
    let prefs = vec![AgentPreferences::new(0.0, 0.0).unwrap(); n];
    let schedule = IntensitySchedule::from_levels(&[Level::High], DESK_PERIOD_MS, DESK_MINUTE_MS).unwrap();
    let driver = EposDriverConfig {
        agents: Vec::new(),
        schedule,
        seed: 9,
        iterations: 10,
        static_runs: 2,
        end_ms: 20_000,
        max_runs: Some(12),
        min_present: n * 3 / 4,
        steering: night_steering(horizon, 20.0),
        initial_cost: GlobalCostFunction::MinVar,
        step_timeout_ms: 2_000,
    };
    let cfg = EposConfig { iterations: 10, runs: 0, ..EposConfig::default() };
    let mut net = Net::Sim(sim());
    deploy_epos(&mut net, EPOS_IDS, &plans, &prefs, cfg, Some(driver), None).unwrap();
    let Net::Sim(mut s) = net else { unreachable!() };
    assert!(s.run_until_signal("epos_driver_done", 200_000).is_some());
    let d = s.peer(PeerId(EPOS_IDS.driver)).unwrap().peerlet::<EposDriver>().unwrap();
    assert_eq!(d.records.len(), 12);
    assert!(d.records.iter().all(|r| !r.aborted), "{:?}", d.records);
    assert!(d.records.iter().all(|r| r.final_global.is_some()));
    assert!(d.parameter_changes() > 10, "{}", d.parameter_changes());
    assert!(d.leaves > 0 && d.joins > 0, "{} {}", d.leaves, d.joins);
    assert_eq!(d.timeouts, 0);
    assert!(d.present() >= n * 3 / 4);
    let m = d.metrics();
    assert!(m[0].wat.is_none() && m[2].wat.is_some());
    assert!(m.iter().all(|r| r.latency.unwrap() > 0.0));
}

#[test]
fn dias_driver_tracks_true_sum_under_churn() {
    let n = 12;
    let w = DiasWorkload::new(n, 9, 3);
    let initial: Vec<_> = (0..n).map(|i| (w.raw(i), w.states(i).clone())).collect();
    let schedule = IntensitySchedule::from_levels(&[Level::High], DESK_PERIOD_MS, DESK_MINUTE_MS).unwrap();
    let driver = DiasDriverConfig {
        agents: Vec::new(),
        schedule,
        seed: 3,
        k: 9,
        warmup_ms: 3_000,
        duration_ms: 20_000,
        churn: DiasChurn::Synchronous,
        sample_period_ms: 200,
        window: 20,
        inject: true,
    };
    let mut net = Net::Sim(sim());
    deploy_dias(&mut net, DIAS_IDS, &initial, DiasConfig::default(), Some(driver), None).unwrap();
    let Net::Sim(mut s) = net else { unreachable!() };
    assert!(s.run_until_signal("dias_driver_done", 120_000).is_some());
    let d = s.peer(PeerId(DIAS_IDS.driver)).unwrap().peerlet::<DiasDriver>().unwrap();
    assert!(d.leaves > 0 && d.joins > 0);
    assert!(d.selected_changes > 0);
    assert!(d.samples.len() > 50);
    let rec = d.recovery(0.05, 2_000);
    let hit = rec.iter().filter(|(_, h)| h.is_some()).count();
    eprintln!("bursts {} recovered {} last rolling {:?}", rec.len(), hit, d.samples.last());
    assert_eq!(hit, rec.len());
}
