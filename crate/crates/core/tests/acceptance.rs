//! Acceptance run: one line per criterion, non-zero exit if any fails.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use agentbed::bootstrap::{
    check_protocol_order, AgentLink, AgentPair, AgentSlot, ApplicationAgent, DeviceInfo, GatewayPeerlet, GatewayState, NoticeEvent, Operator,
    Service, ServiceAgent, ServiceMetadata, ServiceRequest, StaticDevice,
};
use agentbed::conformance::{aggregate_at, dias_oracle, epos_oracle, soak, SupplierChange, SupplierEvent};
use agentbed::data::{generate_plans, Horizon, PlanDatasetSpec};
use agentbed::dias::{BloomFilter, DiasConfig};
use agentbed::dynamics::{latency, relative_difference, wat, DiasChurn, DiasDriver, DiasDriverConfig, DiasWorkload, IntensitySchedule, Level};
use agentbed::epos::{AgentPreferences, EposConfig, GlobalCostFunction, IterationMode, Plan, PlanSet};
use agentbed::messaging::NetworkAddress;
use agentbed::runtime::{create_peer, Context, ExecutionMode, PeerId, Peerlet, SimConfig, Simulation, TraceFilter};
use agentbed::scenario::{
    compare_runs, dias_estimates, deploy_dias, run_epos_once, run_scenario, Backend, Net, ScenarioConfig, Session, DIAS_IDS, METRICS_FILE,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sim_backend(seed: u64) -> Backend {
    Backend::Sim(SimConfig { seed, trace: TraceFilter::Off, ..SimConfig::default() })
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

fn total_of(plans: &[PlanSet], pick: &[usize]) -> Vec<f64> {
    let mut t = vec![0.0; plans[0].dim()];
    for (s, j) in plans.iter().zip(pick) {
        for (a, v) in t.iter_mut().zip(&s.plans()[*j].values) {
            *a += v;
        }
    }
    t
}

fn profile_one(out: &Path, mode: ExecutionMode, iteration: IterationMode, base_port: u16) -> ScenarioConfig {
    let mut c = ScenarioConfig::defaults();
    c.mode = mode;
    c.seed = 11;
    c.repetitions = 20;
    c.output_dir = out.to_path_buf();
    c.epos.agents = 50;
    c.epos.plans = 4;
    c.epos.horizon = Horizon::Reduced(64);
    c.epos.iterations = 50;
    c.epos.alpha = 0.0;
    c.epos.beta = 0.0;
    c.epos.mode = iteration;
    c.epos.straggler_ms = (iteration == IterationMode::Async).then_some(2_000);
    c.live.base_port = base_port;
    c.live.timeout_s = 60;
    c
}

fn criterion_1(tmp: &Path) -> Outcome {
    let started = Instant::now();
    let sim = profile_one(&tmp.join("c1-sim"), ExecutionMode::Sim, IterationMode::Lockstep, 0);
    let lock = profile_one(&tmp.join("c1-lock"), ExecutionMode::Live, IterationMode::Lockstep, 24_000);
    let asy = profile_one(&tmp.join("c1-async"), ExecutionMode::Live, IterationMode::Async, 25_000);
    for c in [&sim, &lock, &asy] {
        run_scenario(c).map_err(|e| format!("{e}"))?;
    }
    let csv = |c: &ScenarioConfig| fs::read_to_string(c.output_dir.join(METRICS_FILE)).unwrap();
    let mean_abs = |live: &ScenarioConfig, from: u64| -> Result<f64, String> {
        let cmp = compare_runs(&csv(&sim), &csv(live)).map_err(|e| e.to_string())?;
        let v: Vec<f64> = cmp.rows.iter().filter(|r| r.t >= from).filter_map(|r| r.rel_g).map(f64::abs).collect();
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    };
    let lockstep = mean_abs(&lock, 1)?;
    let async_ = mean_abs(&asy, 10)?;
    let secs = started.elapsed().as_secs_f64();
    check(
        lockstep == 0.0 && async_ < 0.02 && secs < 120.0,
        format!("lockstep mean |rel_g| {lockstep} (need 0), async mean |rel_g| at t>=10 {async_:.6} (need < 0.02), {secs:.1} s (need < 120)"),
    )
}

fn criterion_2() -> Outcome {
    let horizon = Horizon::Reduced(64);
    let mut argmin_hits = 0;
    let mut agents_total = 0;
    let mut monotone = 0;
    let mut beats_random = 0;
    for seed in 0..20u64 {
        let plans = generate_plans(&PlanDatasetSpec { num_agents: 50, plans_per_agent: 4, horizon, seed: 100 + seed }).unwrap();
        let cfg = EposConfig { iterations: 50, tree_seed: seed, ..EposConfig::default() };

        let selfish = vec![AgentPreferences::new(0.0, 1.0).unwrap(); plans.len()];
        let out = run_epos_once(&sim_backend(seed), &plans, &selfish, cfg.clone(), 600_000).map_err(|e| e.to_string())?;
        for (s, sel) in plans.iter().zip(&out.selections) {
            let best = (0..s.len()).fold(0, |b, j| if s.plans()[j].local_cost < s.plans()[b].local_cost { j } else { b });
            agents_total += 1;
            argmin_hits += usize::from(*sel == Some(best));
        }

        let social = vec![AgentPreferences::new(0.0, 0.0).unwrap(); plans.len()];
        let out = run_epos_once(&sim_backend(seed), &plans, &social, cfg, 600_000).map_err(|e| e.to_string())?;
        let costs: Vec<f64> = out.history.iter().map(|r| r.global_cost).collect();
        monotone += usize::from(costs.windows(2).all(|w| w[1] <= w[0]));
        let mut rng = ChaCha8Rng::seed_from_u64(7_000 + seed);
        let random: Vec<usize> = plans.iter().map(|s| rng.random_range(0..s.len())).collect();
        let baseline = variance(&total_of(&plans, &random));
        beats_random += usize::from(*costs.last().unwrap() <= baseline);
    }
    check(
        argmin_hits == agents_total && monotone == 20 && beats_random >= 19,
        format!(
            "beta=1 argmin selections {argmin_hits}/{agents_total} (need all), non-increasing cost {monotone}/20 (need 20), below random baseline {beats_random}/20 (need >= 19)"
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut gaps = Vec::new();
    let mut violations = 0;
    for i in 0..50u64 {
        let n = rng.random_range(2..=6);
        let k = rng.random_range(2..=3);
        let d = rng.random_range(2..=4);
        let plans: Vec<PlanSet> = (0..n)
            .map(|_| {
                let ps = (0..k)
                    .map(|_| Plan::new((0..d).map(|_| rng.random_range(0..6) as f64).collect(), rng.random_range(0.0..1.0)).unwrap())
                    .collect();
                PlanSet::new(ps).unwrap()
            })
            .collect();
        let cost = if i % 2 == 0 {
            GlobalCostFunction::MinVar
        } else {
            GlobalCostFunction::MinRmse((0..d).map(|_| rng.random_range(0..10) as f64).collect())
        };
        let oracle = epos_oracle(&plans, &cost).map_err(|e| e.to_string())?;
        let prefs = vec![AgentPreferences::new(0.0, 0.0).unwrap(); n];
        let cfg = EposConfig { iterations: 20, cost, tree_seed: i, ..EposConfig::default() };
        let out = run_epos_once(&sim_backend(i), &plans, &prefs, cfg, 60_000).map_err(|e| e.to_string())?;
        let system = out.history.last().unwrap().global_cost;
        if system < oracle.cost - 1e-9 * oracle.cost.abs().max(1.0) {
            violations += 1;
        }
        gaps.push(if oracle.cost == 0.0 { system } else { (system - oracle.cost) / oracle.cost });
    }
    gaps.sort_by(f64::total_cmp);
    let median = (gaps[24] + gaps[25]) / 2.0;
    let optimal = gaps.iter().filter(|g| **g <= 1e-12).count();
    check(violations == 0, format!("50 instances, bound violations {violations} (need 0), median relative gap {median:.4}, optimal in {optimal}/50"))
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let n = 20;
    let w = DiasWorkload::new(n, 9, 4);
    let initial: Vec<_> = (0..n).map(|i| (w.raw(i), w.states(i).clone())).collect();
    let log: Vec<SupplierEvent> = (0..n).map(|i| SupplierEvent::new(0, format!("agent-{i}"), SupplierChange::Join(w.value(i)))).collect();
    let series = dias_oracle(&log).map_err(|e| e.to_string())?;
    let cfg = DiasConfig::default();
    let period = cfg.gossip_period_ms;
    let mut net = Net::Sim(Simulation::new(SimConfig { seed: 4, trace: TraceFilter::Off, ..SimConfig::default() }));
    let dep = deploy_dias(&mut net, DIAS_IDS, &initial, cfg, None, None).map_err(|e| e.to_string())?;
    let Net::Sim(mut sim) = net else { unreachable!() };
    let mut first_exact = None;
    let mut stable = true;
    for p in 1..=100u64 {
        sim.run_until(p * period);
        let want = aggregate_at(&series, sim.now_ms()).unwrap().sum;
        let exact = dias_estimates(&sim, &dep).iter().all(|e| *e == Some(want));
        match (first_exact, exact) {
            (None, true) => first_exact = Some(p),
            (Some(_), false) => stable = false,
            _ => {}
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let sum = series[0].sum;
    check(
        first_exact.is_some_and(|p| p <= 50) && stable && secs < 30.0,
        format!("oracle sum {sum}, all 20 estimates exact after {first_exact:?} gossip periods (need <= 50), stable through 100: {stable}, {secs:.1} s (need < 30)"),
    )
}

fn criterion_5() -> Outcome {
    let n = 20;
    let w = DiasWorkload::new(n, 9, 5);
    let initial: Vec<_> = (0..n).map(|i| (w.raw(i), w.states(i).clone())).collect();
    let cfg = DiasConfig::default();
    let dissemination = cfg.dissemination_period_ms;
    let schedule = IntensitySchedule::from_levels(&[Level::High], 60_000, 2_000).unwrap();
    let driver = DiasDriverConfig {
        agents: Vec::new(),
        schedule,
        seed: 5,
        k: 9,
        warmup_ms: 3_000,
        duration_ms: 300_000,
        churn: DiasChurn::Synchronous,
        sample_period_ms: 200,
        window: 20,
        inject: true,
    };
    let mut s = Session::new(&sim_backend(5), None).map_err(|e| e.to_string())?;
    s.deploy_dias(&initial, cfg, Some(driver)).map_err(|e| e.to_string())?;
    let missing = s.wait_for(&["dias_driver_done"], 1_000_000).map_err(|e| e.to_string())?;
    let fin = s.finish();
    let d = fin.peers.iter().find(|p| p.id() == PeerId(DIAS_IDS.driver)).and_then(|p| p.peerlet::<DiasDriver>()).ok_or("driver missing")?;
    let rec = d.recovery(0.05, 10 * dissemination);
    let hit = rec.iter().filter(|(_, h)| h.is_some()).count();
    let worst = rec.iter().filter_map(|(_, h)| *h).max().unwrap_or(0);
    check(
        missing.is_empty() && fin.crashes == 0 && !rec.is_empty() && hit == rec.len(),
        format!(
            "{} bursts, {hit} recovered to <= 5% within {} ms (need all), slowest {worst} ms, {} joins, {} leaves, {} crashes",
            rec.len(),
            10 * dissemination,
            d.joins,
            d.leaves,
            fin.crashes
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut fp, mut negatives, mut fneg) = (0u64, 0u64, 0u64);
    let mut expected = 0.0;
    for _ in 0..20 {
        let mut f = BloomFilter::new(2048, 4);
        let items: HashSet<u64> = (0..100).map(|_| rng.random()).collect();
        for i in &items {
            f.insert(&i.to_be_bytes());
        }
        expected = f.expected_fpr(items.len());
        fneg += items.iter().filter(|i| !f.contains(&i.to_be_bytes())).count() as u64;
        let mut drawn = 0;
        while drawn < 5_000 {
            let x: u64 = rng.random();
            if items.contains(&x) {
                continue;
            }
            drawn += 1;
            fp += u64::from(f.contains(&x.to_be_bytes()));
        }
        negatives += drawn;
    }
    let rate = fp as f64 / negatives as f64;
    check(
        negatives == 100_000 && rate <= 0.005 && fneg == 0,
        format!("{negatives} negatives, false-positive rate {rate:.5} (need <= 0.005, analytic {expected:.5}), false negatives {fneg} (need 0)"),
    )
}

struct Quiet;
impl Service for Quiet {
    fn validate(&self, _md: &ServiceMetadata) -> bool {
        false
    }
    fn on_run(&mut self, _ctx: &mut Context<'_>, _link: &mut AgentLink) {}
}

struct Done;
impl Service for Done {
    fn on_run(&mut self, ctx: &mut Context<'_>, link: &mut AgentLink) {
        link.complete(ctx).unwrap();
    }
}

fn silent_agent_round() -> Result<(u64, NoticeEvent, bool, usize), String> {
    let n = 5u64;
    let mut sim = Simulation::new(SimConfig { seed: 7, ..SimConfig::default() });
    let gw = NetworkAddress::sim(PeerId(0));
    let mut pool = Vec::new();
    let mut apps = Vec::new();
    let mut pairs = Vec::new();
    for i in 0..n {
        let (app, agent) = (PeerId(100 + i), PeerId(1000 + i));
        pool.push(AgentSlot::at(NetworkAddress::sim(agent), format!("loc-{i}")));
        apps.push(NetworkAddress::sim(app));
        pairs.push(AgentPair { app, app_addr: NetworkAddress::sim(app).to_string(), agent, agent_addr: NetworkAddress::sim(agent).to_string() });
    }
    let state = GatewayState::new(gw.clone(), "svc", pool);
    let add = |sim: &mut Simulation, id: u64, p: Box<dyn Peerlet>| sim.add_peer(create_peer(PeerId(id), ExecutionMode::Sim, vec![p]).unwrap()).unwrap();
    add(&mut sim, 0, Box::new(GatewayPeerlet::new(state, apps)));
    let req = ServiceRequest { serv_info: "svc".into(), serv_md: ServiceMetadata::new(n as usize) };
    add(&mut sim, 1, Box::new(Operator::new(gw, req, 50)));
    for i in 0..n {
        let info = DeviceInfo { device_type: "sensor".into(), location: format!("loc-{i}") };
        add(&mut sim, 100 + i, Box::new(ApplicationAgent::new(None, "svc", info, StaticDevice(vec![1]))));
        let svc: Box<dyn Peerlet> = if i == 2 { Box::new(ServiceAgent::new("svc", Quiet)) } else { Box::new(ServiceAgent::new("svc", Done)) };
        add(&mut sim, 1000 + i, svc);
    }
    sim.run_until(10_000);
    let g = sim.peer(PeerId(0)).unwrap().peerlet::<GatewayPeerlet>().unwrap();
    let op = sim.peer(PeerId(1)).unwrap().peerlet::<Operator>().unwrap();
    let notice = op.notices.first().map(|x| x.1.clone()).ok_or("no notice")?;
    let report = check_protocol_order(sim.trace(), PeerId(0), &pairs);
    Ok((g.aborts, notice, report.ok(), report.running))
}

fn criterion_7() -> Outcome {
    let n = 100;
    let plans = generate_plans(&PlanDatasetSpec { num_agents: n, plans_per_agent: 2, horizon: Horizon::Reduced(4), seed: 7 }).unwrap();
    let prefs = vec![AgentPreferences::new(0.0, 0.0).unwrap(); n];
    let cfg = EposConfig { iterations: 3, ..EposConfig::default() };
    let mut s = Session::new(&Backend::Sim(SimConfig { seed: 7, trace: TraceFilter::Messages { min_type: 1, max_type: 11 }, ..SimConfig::default() }), None)
        .map_err(|e| e.to_string())?;
    let dep = s.deploy_epos(&plans, &prefs, cfg, None).map_err(|e| e.to_string())?;
    let missing = s.wait_for(&["service_done"], 600_000).map_err(|e| e.to_string())?;
    let fin = s.finish();
    let report = check_protocol_order(fin.trace.as_ref().ok_or("no trace")?, dep.gateway, &dep.pairs());
    let gw = fin.peers.iter().find(|p| p.id() == dep.gateway).and_then(|p| p.peerlet::<GatewayPeerlet>()).ok_or("gateway missing")?;
    let injective = gw.injectivity_violations == 0 && gw.state().is_injective();
    let (aborts, notice, silent_ok, silent_running) = silent_agent_round()?;
    check(
        missing.is_empty() && report.ok() && report.running == n && injective && aborts == 1 && notice == NoticeEvent::Aborted && silent_ok && silent_running == 0,
        format!(
            "{} of {n} agents reached running, {} order violations (need 0), injective {injective}; silent agent: {aborts} abort, operator notice {notice:?}, trace conforms {silent_ok}",
            report.running,
            report.violations.len()
        ),
    )
}

fn criterion_8() -> Outcome {
    let r = relative_difference(10.0, 9.0).map_err(|e| e.to_string())?;
    let l = latency(1500.0, 1000.0).map_err(|e| e.to_string())?;
    let w = wat(40000.0, 10000.0).map_err(|e| e.to_string())?;
    check(r == 0.1 && l == 1.5 && w == 4.0, format!("relative difference (10,9) = {r}, latency (1500,1000) = {l}, WAT (40000,10000) = {w}"))
}

fn criterion_9(tmp: &Path) -> Outcome {
    let started = Instant::now();
    let mut cfg = ScenarioConfig::defaults();
    cfg.seed = 9;
    cfg.dynamics.levels = vec![Level::Low, Level::Medium, Level::High];
    let rep = soak(&cfg, 600_000, Some(&tmp.join("c9-monitoring"))).map_err(|e| e.to_string())?;
    let (lo, me, hi) = (rep.latency(Level::Low), rep.latency(Level::Medium), rep.latency(Level::High));
    let increasing = matches!((lo, me, hi), (Some(a), Some(b), Some(c)) if a < b && b < c);
    let wat_low = rep.wat(Level::Low);
    let violations = rep.protocol_violations as u64 + rep.injectivity_violations;
    check(
        rep.passed() && rep.parameter_changes >= 1000 && rep.joins + rep.leaves >= 100 && increasing && wat_low.is_some_and(|w| w > 1.0),
        format!(
            "{} parameter changes (need >= 1000), {} joins/leaves (need >= 100), {} crashes, {violations} violations, latency L/M/H {lo:.4?}/{me:.4?}/{hi:.4?} (need increasing), WAT LOW {wat_low:.3?} (need > 1), {} rejoins conform, {:.1} s",
            rep.parameter_changes,
            rep.joins + rep.leaves,
            rep.crashes,
            rep.rejoins_running,
            started.elapsed().as_secs_f64()
        ),
    )
}

fn digest(path: &Path) -> String {
    let bytes = fs::read(path).unwrap();
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn criterion_10(tmp: &Path) -> Outcome {
    let mut static_cfg = ScenarioConfig::defaults();
    static_cfg.service = agentbed::scenario::ServiceKind::Both;
    static_cfg.repetitions = 3;
    static_cfg.dias.duration_ms = 10_000;
    let mut dynamic = ScenarioConfig::defaults();
    dynamic.service = agentbed::scenario::ServiceKind::Both;
    dynamic.dynamics.enabled = true;
    dynamic.dynamics.duration_ms = 120_000;
    let mut lines = Vec::new();
    let mut same = true;
    for (name, base) in [("static", static_cfg), ("dynamic", dynamic)] {
        let mut hashes = Vec::new();
        for run in 0..2 {
            let mut c = base.clone();
            c.output_dir = tmp.join(format!("c10-{name}-{run}"));
            run_scenario(&c).map_err(|e| e.to_string())?;
            hashes.push(digest(&c.output_dir.join(METRICS_FILE)));
        }
        same &= hashes[0] == hashes[1];
        lines.push(format!("{name} {} / {}", &hashes[0][..16], &hashes[1][..16]));
    }
    check(same, format!("sha256 of metrics.csv: {}", lines.join(", ")))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("sim/live equivalence", Box::new(|| criterion_1(tmp.path()))),
        ("preference reductions", Box::new(criterion_2)),
        ("tiny-instance oracle gap", Box::new(criterion_3)),
        ("aggregation exact convergence", Box::new(criterion_4)),
        ("aggregation under churn", Box::new(criterion_5)),
        ("bloom filter", Box::new(criterion_6)),
        ("protocol conformance", Box::new(criterion_7)),
        ("metrics formulas", Box::new(criterion_8)),
        ("soak", Box::new(|| criterion_9(tmp.path()))),
        ("determinism", Box::new(|| criterion_10(tmp.path()))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = run();
        let secs = Duration::as_secs_f64(&t.elapsed());
        match outcome {
            Ok(detail) => println!("criterion {} PASS {name}: {detail} [{secs:.1} s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {detail} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
