use std::path::Path;
use std::time::{Duration, Instant};

use super::{deploy_dias, deploy_epos, Deployed, Monitor, Net, ScenarioError, DIAS_IDS, EPOS_IDS, LOG_GATEWAY_ID};
use crate::bootstrap::ServiceAgent;
use crate::dias::{DiasConfig, DiasService, PossibleStates};
use crate::dynamics::{DiasDriverConfig, EposDriverConfig};
use crate::epos::{AgentPreferences, EposConfig, EposService, IterationRecord, PlanSet};
use crate::monitoring::{FileStore, LogGateway, LogGatewayPeerlet};
use crate::runtime::{EventTrace, LiveConfig, LiveNetwork, Peer, SimConfig, Signal, Simulation};

pub const MONITOR_TOKEN: &str = "agentbed";

/// Execution backend for a single experiment.
#[derive(Debug, Clone)]
pub enum Backend {
    Sim(SimConfig),
    /// Live network plus the wall-clock budget for the run.
    Live(LiveConfig, Duration),
}

/// A network under construction or running, with optional monitoring.
pub struct Session {
    net: Net,
    monitor: Option<Monitor>,
    budget: Duration,
    started: Option<Instant>,
    seen: Vec<Signal>,
    peers_added: usize,
}

/// Everything left after a session ends.
pub struct Finished {
    pub peers: Vec<Peer>,
    pub trace: Option<EventTrace>,
    pub signals: Vec<Signal>,
    /// Virtual time in SIM, wall-clock time since start in LIVE.
    pub elapsed_ms: u64,
    /// Peers whose executor died.
    pub crashes: usize,
    /// Records persisted by the log gateway.
    pub logged: u64,
}

impl Session {
    /// Opens a network; with `monitor_dir`, a log gateway persisting to that
    /// directory is deployed first.
    pub fn new(backend: &Backend, monitor_dir: Option<&Path>) -> Result<Session, ScenarioError> {
        let (net, budget) = match backend {
            Backend::Sim(sc) => (Net::Sim(Simulation::new(sc.clone())), Duration::ZERO),
            Backend::Live(lc, budget) => (Net::Live(LiveNetwork::new(lc.clone())), *budget),
        };
        let mut s = Session { net, monitor: None, budget, started: None, seen: Vec::new(), peers_added: 0 };
        if let Some(dir) = monitor_dir {
            if dir.exists() {
                std::fs::remove_dir_all(dir)?;
            }
            let store = FileStore::open(dir)?;
            let gw = LogGateway::new(Box::new(store), LogGateway::DEFAULT_COMMIT_BATCH, [MONITOR_TOKEN.to_string()]);
            let addr = s.net.address(LOG_GATEWAY_ID)?;
            let mode = s.net.mode();
            let peerlet = LogGatewayPeerlet::new(gw).with_commit_period(500);
            s.net.add(Peer::new(LOG_GATEWAY_ID, mode, addr.clone(), vec![Box::new(peerlet)])?)?;
            s.peers_added += 1;
            s.monitor = Some(Monitor { gateway: addr, token: MONITOR_TOKEN.into() });
        }
        Ok(s)
    }

    pub fn deploy_epos(
        &mut self,
        plans: &[PlanSet],
        prefs: &[AgentPreferences],
        cfg: EposConfig,
        driver: Option<EposDriverConfig>,
    ) -> Result<Deployed, ScenarioError> {
        let extra = usize::from(driver.is_some());
        let dep = deploy_epos(&mut self.net, EPOS_IDS, plans, prefs, cfg, driver, self.monitor.clone())?;
        self.peers_added += 2 + 2 * plans.len() + extra;
        Ok(dep)
    }

    pub fn deploy_dias(
        &mut self,
        initial: &[(f64, PossibleStates)],
        cfg: DiasConfig,
        driver: Option<DiasDriverConfig>,
    ) -> Result<Deployed, ScenarioError> {
        let extra = usize::from(driver.is_some());
        let dep = deploy_dias(&mut self.net, DIAS_IDS, initial, cfg, driver, self.monitor.clone())?;
        self.peers_added += 2 + 2 * initial.len() + extra;
        Ok(dep)
    }

    fn raised(&self, name: &str) -> bool {
        match &self.net {
            Net::Sim(sim) => sim.signals().iter().any(|s| s.name == name),
            Net::Live(_) => self.seen.iter().any(|s| s.name == name),
        }
    }

    /// Runs until every named signal has been raised; SIM stops at
    /// `deadline_ms` of virtual time, LIVE after the wall-clock budget.
    /// Returns the names still missing.
    pub fn wait_for(&mut self, names: &[&str], deadline_ms: u64) -> Result<Vec<String>, ScenarioError> {
        for name in names {
            if self.raised(name) {
                continue;
            }
            match &mut self.net {
                Net::Sim(sim) => {
                    sim.run_until_signal(name, deadline_ms);
                }
                Net::Live(live) => {
                    let started = match self.started {
                        Some(t) => t,
                        None => {
                            live.start()?;
                            *self.started.insert(Instant::now())
                        }
                    };
                    let left = self.budget.saturating_sub(started.elapsed());
                    if let Some(s) = live.wait_signal(name, left, &mut self.seen) {
                        self.seen.push(s);
                    }
                }
            }
        }
        Ok(names.iter().filter(|n| !self.raised(n)).map(|n| n.to_string()).collect())
    }

    pub fn finish(self) -> Finished {
        let (mut peers, trace, signals, elapsed_ms) = match self.net {
            Net::Sim(sim) => {
                let now = sim.now_ms();
                let (peers, trace, signals) = sim.into_parts();
                (peers, Some(trace), signals, now)
            }
            Net::Live(live) => {
                let elapsed = self.started.map(|s| s.elapsed().as_millis() as u64).unwrap_or(0);
                let mut signals = self.seen;
                signals.extend(live.drain_signals());
                (live.shutdown_with_last(&[LOG_GATEWAY_ID], Duration::from_millis(100)), None, signals, elapsed)
            }
        };
        let crashes = self.peers_added.saturating_sub(peers.len());
        let mut logged = 0;
        if let Some(g) = peers.iter_mut().find(|p| p.id() == LOG_GATEWAY_ID).and_then(|p| p.peerlet_mut::<LogGatewayPeerlet>()) {
            g.gateway_mut().flush();
            logged = g.gateway().store().len();
        }
        Finished { peers, trace, signals, elapsed_ms, crashes, logged }
    }
}

/// Result of one collective-learning run.
#[derive(Debug, Clone)]
pub struct EposOutcome {
    /// Per-iteration records kept by the root.
    pub history: Vec<IterationRecord>,
    /// Selected plan per agent, in plan-set order.
    pub selections: Vec<Option<usize>>,
    pub trace: Option<EventTrace>,
    pub elapsed_ms: u64,
    pub logged: u64,
}

/// Root history and selections of the first run of each deployed agent.
pub fn collect_epos(peers: &[Peer], dep: &Deployed) -> (Vec<IterationRecord>, Vec<Option<usize>>) {
    let mut history = Vec::new();
    let mut selections = Vec::with_capacity(dep.agents.len());
    for h in &dep.agents {
        let outcome = peers
            .iter()
            .find(|p| p.id() == h.agent)
            .and_then(|p| p.peerlet::<ServiceAgent<EposService>>())
            .and_then(|a| a.service().outcomes.first());
        selections.push(outcome.map(|o| o.selected));
        if let Some(o) = outcome {
            if o.history.len() > history.len() {
                history = o.history.clone();
            }
        }
    }
    (history, selections)
}

fn failure(signals: &[Signal]) -> Option<String> {
    signals
        .iter()
        .find(|s| s.name == "service_aborted" || s.name == "epos_aborted")
        .map(|s| format!("{} at {} ms: {}", s.name, s.t_ms, s.value))
}

/// Deploys the plan sets, runs one collective-learning run to completion and
/// gathers the root history and every selection.
pub fn run_epos_once(
    backend: &Backend,
    plans: &[PlanSet],
    prefs: &[AgentPreferences],
    cfg: EposConfig,
    deadline_ms: u64,
) -> Result<EposOutcome, ScenarioError> {
    run_epos_monitored(backend, plans, prefs, cfg, deadline_ms, None)
}

/// [`run_epos_once`] with logs persisted under `monitor_dir`.
pub fn run_epos_monitored(
    backend: &Backend,
    plans: &[PlanSet],
    prefs: &[AgentPreferences],
    mut cfg: EposConfig,
    deadline_ms: u64,
    monitor_dir: Option<&Path>,
) -> Result<EposOutcome, ScenarioError> {
    cfg.runs = 1;
    let mut s = Session::new(backend, monitor_dir)?;
    let dep = s.deploy_epos(plans, prefs, cfg, None)?;
    let missing = s.wait_for(&["service_done"], deadline_ms)?;
    let fin = s.finish();
    if !missing.is_empty() {
        let why = failure(&fin.signals).unwrap_or_else(|| format!("no completion after {} ms", fin.elapsed_ms));
        return Err(ScenarioError::Aborted(why));
    }
    let (history, selections) = collect_epos(&fin.peers, &dep);
    Ok(EposOutcome { history, selections, trace: fin.trace, elapsed_ms: fin.elapsed_ms, logged: fin.logged })
}

/// Deploys aggregation in SIM and runs it until `until_ms`.
pub fn run_dias_sim(sc: SimConfig, initial: &[(f64, PossibleStates)], cfg: DiasConfig, until_ms: u64) -> Result<(Simulation, Deployed), ScenarioError> {
    let mut net = Net::Sim(Simulation::new(sc));
    let dep = deploy_dias(&mut net, DIAS_IDS, initial, cfg, None, None)?;
    let Net::Sim(mut sim) = net else { unreachable!() };
    sim.run_until(until_ms);
    Ok((sim, dep))
}

/// Estimated sum held by each deployed agent at the current time, `None`
/// before its first aggregate.
pub fn dias_estimates(sim: &Simulation, dep: &Deployed) -> Vec<Option<f64>> {
    let now = sim.now_ms();
    dep.agents
        .iter()
        .map(|h| {
            sim.peer(h.agent)
                .and_then(|p| p.peerlet::<ServiceAgent<DiasService>>())
                .and_then(|a| a.service().estimate(now))
                .map(|e| e.sum)
        })
        .collect()
}
