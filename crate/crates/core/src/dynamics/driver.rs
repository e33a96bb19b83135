use std::collections::{BTreeSet, VecDeque};

use super::{
    dias_events, metrics::MetricsRecord, wat, ChangeEvent, ChangeKind, DiasChurn, EposInjector, IntensitySchedule, Level,
    RollingError, Target,
};
use crate::data::{derive_possible_states, SyntheticNews};
use crate::dias::{summarize, PossibleStates, MSG_DIAS_CHANGE, MSG_DIAS_ESTIMATE, MSG_DIAS_JOINED, MSG_DIAS_QUERY};
use crate::epos::{cost_text, GlobalCostFunction, RunReport, MSG_EPOS_ACK, MSG_EPOS_CHANGE, MSG_EPOS_JOINED, MSG_EPOS_REPORT, MSG_EPOS_START};
use crate::messaging::{Envelope, NetworkAddress};
use crate::monitoring::LogKind;
use crate::runtime::{Context, Control, ExecutionMode, PeerId, Peerlet, TimerId};

/// Peers making up one agent: the device side and the service side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentHandle {
    pub app: PeerId,
    pub agent: PeerId,
    pub addr: NetworkAddress,
}

fn index_of(agents: &[AgentHandle], addr: &NetworkAddress) -> Option<usize> {
    agents.iter().position(|a| a.addr == *addr)
}

fn leave(ctx: &mut Context<'_>, h: &AgentHandle) {
    ctx.control(Control::Stop(h.agent));
    ctx.control(Control::Stop(h.app));
}

fn rejoin(ctx: &mut Context<'_>, h: &AgentHandle) {
    ctx.control(Control::Restart(h.agent));
    ctx.control(Control::Restart(h.app));
}

#[derive(Debug, Clone)]
pub struct EposDriverConfig {
    pub agents: Vec<AgentHandle>,
    pub schedule: IntensitySchedule,
    pub seed: u64,
    pub iterations: usize,
    /// Leading runs without injected changes; they give the static
    /// execution time.
    pub static_runs: u64,
    /// No run starts at or after this time.
    pub end_ms: u64,
    pub max_runs: Option<u64>,
    pub min_present: usize,
    /// Target of the RMSE cost function.
    pub steering: Vec<f64>,
    pub initial_cost: GlobalCostFunction,
    /// Longest wait for one acknowledgement, join or run.
    pub step_timeout_ms: u64,
}

/// Timing and outcome of one driven run.
#[derive(Debug, Clone, PartialEq)]
pub struct EposRunRecord {
    pub run: u64,
    pub started_ms: u64,
    pub level: Level,
    pub is_static: bool,
    pub adaptivity_ms: u64,
    pub working_ms: u64,
    pub members: usize,
    pub changes: usize,
    pub final_global: Option<f64>,
    pub final_local: Option<f64>,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq)]
enum Step {
    Event(ChangeEvent),
    SyncCost(usize),
}

#[derive(Debug, Clone, PartialEq)]
enum Wait {
    Nothing,
    Joined(usize),
    Acks(BTreeSet<NetworkAddress>),
    Finished { run: u64, pending: BTreeSet<NetworkAddress>, report: Option<RunReport>, aborted: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Bootstrap,
    Adapting,
    Running,
    Done,
}

/// Drives collective-learning runs: applies one run's changes one at a
/// time, rebuilds the tree after membership changes, starts the run and
/// waits until every member has finished.
pub struct EposDriver {
    cfg: EposDriverConfig,
    injector: EposInjector,
    phase: Phase,
    wait: Wait,
    watchdog: Option<TimerId>,
    steps: VecDeque<Step>,
    present: Vec<bool>,
    joined: BTreeSet<usize>,
    cost: GlobalCostFunction,
    rebuild: bool,
    run: u64,
    run_changes: usize,
    adapt_start: u64,
    run_start: u64,
    adaptivity: u64,
    level: Level,
    mode: ExecutionMode,
    pub records: Vec<EposRunRecord>,
    pub plan_changes: u64,
    pub weight_changes: u64,
    pub gcf_changes: u64,
    pub joins: u64,
    pub leaves: u64,
    pub skipped: u64,
    pub timeouts: u64,
}

impl EposDriver {
    pub fn new(cfg: EposDriverConfig) -> Self {
        let n = cfg.agents.len();
        EposDriver {
            injector: EposInjector::new(cfg.seed, cfg.min_present),
            cost: cfg.initial_cost.clone(),
            cfg,
            phase: Phase::Bootstrap,
            wait: Wait::Nothing,
            watchdog: None,
            steps: VecDeque::new(),
            present: vec![true; n],
            joined: BTreeSet::new(),
            rebuild: false,
            run: 0,
            run_changes: 0,
            adapt_start: 0,
            run_start: 0,
            adaptivity: 0,
            level: Level::Low,
            mode: ExecutionMode::Sim,
            records: Vec::new(),
            plan_changes: 0,
            weight_changes: 0,
            gcf_changes: 0,
            joins: 0,
            leaves: 0,
            skipped: 0,
            timeouts: 0,
        }
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn present(&self) -> usize {
        self.present.iter().filter(|p| **p).count()
    }

    pub fn parameter_changes(&self) -> u64 {
        self.plan_changes + self.weight_changes + self.gcf_changes
    }

    /// Mean execution time (adaptation plus work) of the static runs.
    pub fn static_time_ms(&self) -> Option<f64> {
        let s: Vec<f64> =
            self.records.iter().filter(|r| r.is_static && !r.aborted).map(|r| (r.adaptivity_ms + r.working_ms) as f64).collect();
        (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)
    }

    /// One row per run: final costs in the column of the execution mode,
    /// latency against the static runs and WAT.
    pub fn metrics(&self) -> Vec<MetricsRecord> {
        let base = self.static_time_ms();
        self.records
            .iter()
            .map(|r| {
                let live = self.mode == ExecutionMode::Live;
                let total = (r.adaptivity_ms + r.working_ms) as f64;
                MetricsRecord {
                    run_id: format!("epos-{}", r.run),
                    t: r.started_ms,
                    g_s: r.final_global.filter(|_| !live),
                    g_l: r.final_global.filter(|_| live),
                    l_s: r.final_local.filter(|_| !live),
                    l_l: r.final_local.filter(|_| live),
                    latency: base.and_then(|b| super::latency(total, b).ok()),
                    wat: (!r.is_static).then(|| wat(r.working_ms as f64, r.adaptivity_ms as f64).ok()).flatten(),
                    intensity: (!r.is_static).then_some(r.level),
                    ..Default::default()
                }
            })
            .collect()
    }

    fn set_wait(&mut self, ctx: &mut Context<'_>, wait: Wait) {
        if let Some(t) = self.watchdog.take() {
            ctx.cancel_timer(t);
        }
        if wait != Wait::Nothing {
            self.watchdog = ctx.schedule_timer(self.cfg.step_timeout_ms, false).ok();
        }
        self.wait = wait;
    }

    fn present_addrs(&self) -> BTreeSet<NetworkAddress> {
        self.cfg.agents.iter().zip(&self.present).filter(|(_, p)| **p).map(|(a, _)| a.addr.clone()).collect()
    }

    fn send_all(&self, ctx: &mut Context<'_>, to: &BTreeSet<NetworkAddress>, msg_type: u16, body: &str) {
        for a in to {
            let _ = ctx.send(a, msg_type, body.as_bytes().to_vec());
        }
    }

    fn begin_run(&mut self, ctx: &mut Context<'_>) {
        let now = ctx.now_ms();
        if now >= self.cfg.end_ms || self.cfg.max_runs.is_some_and(|m| self.run >= m) {
            self.phase = Phase::Done;
            self.set_wait(ctx, Wait::Nothing);
            ctx.signal("epos_driver_done", self.run.to_string());
            return;
        }
        self.phase = Phase::Adapting;
        self.adapt_start = now;
        self.run_changes = 0;
        let level = *self.cfg.schedule.level_at(now);
        self.level = level.level;
        if self.run >= self.cfg.static_runs {
            let events = self.injector.draw_run(now, &level.epos, &self.present);
            self.steps.extend(events.into_iter().map(Step::Event));
        }
        self.advance(ctx);
    }

    fn advance(&mut self, ctx: &mut Context<'_>) {
        while self.phase == Phase::Adapting && self.wait == Wait::Nothing {
            match self.steps.pop_front() {
                Some(Step::Event(e)) => self.apply(ctx, e),
                Some(Step::SyncCost(i)) => {
                    if self.present[i] {
                        let addr = self.cfg.agents[i].addr.clone();
                        let _ = ctx.send(&addr, MSG_EPOS_CHANGE, format!("cost={}", cost_text(&self.cost)).into_bytes());
                        self.set_wait(ctx, Wait::Acks(BTreeSet::from([addr])));
                    }
                }
                None if self.rebuild => {
                    self.rebuild = false;
                    let members = self.present_addrs();
                    let list = members.iter().map(|a| a.as_str()).collect::<Vec<_>>().join(" ");
                    self.send_all(ctx, &members, MSG_EPOS_CHANGE, &format!("members={list}"));
                    self.set_wait(ctx, Wait::Acks(members));
                }
                None => self.start_run(ctx),
            }
        }
    }

    fn skip(&mut self, ctx: &mut Context<'_>, e: &ChangeEvent) {
        self.skipped += 1;
        ctx.log(LogKind::Event, "change_skipped", format!("{:?} {:?}", e.kind, e.target));
    }

    fn apply(&mut self, ctx: &mut Context<'_>, e: ChangeEvent) {
        ctx.log(LogKind::Event, "change", format!("{:?} {:?} {}", e.kind, e.target, e.payload));
        let i = match e.target {
            Target::Agent(i) if i < self.present.len() => Some(i),
            Target::Agent(_) => return self.skip(ctx, &e),
            Target::System => None,
        };
        match (e.kind, i) {
            (ChangeKind::Leave, Some(i)) => {
                if !self.present[i] {
                    return self.skip(ctx, &e);
                }
                leave(ctx, &self.cfg.agents[i]);
                self.present[i] = false;
                self.joined.remove(&i);
                self.leaves += 1;
                self.rebuild = true;
            }
            (ChangeKind::Join, Some(i)) => {
                if self.present[i] {
                    return self.skip(ctx, &e);
                }
                rejoin(ctx, &self.cfg.agents[i]);
                self.present[i] = true;
                self.joins += 1;
                self.rebuild = true;
                self.set_wait(ctx, Wait::Joined(i));
            }
            (ChangeKind::PlanChange | ChangeKind::WeightChange, Some(i)) => {
                if !self.present[i] {
                    return self.skip(ctx, &e);
                }
                let body = if e.kind == ChangeKind::PlanChange {
                    self.plan_changes += 1;
                    format!("replan={}", e.payload)
                } else {
                    self.weight_changes += 1;
                    format!("weights={}", e.payload)
                };
                let addr = self.cfg.agents[i].addr.clone();
                let _ = ctx.send(&addr, MSG_EPOS_CHANGE, body.into_bytes());
                self.set_wait(ctx, Wait::Acks(BTreeSet::from([addr])));
            }
            (ChangeKind::GcfChange, None) => {
                self.cost = if e.payload == "MIN_RMSE" {
                    GlobalCostFunction::MinRmse(self.cfg.steering.clone())
                } else {
                    GlobalCostFunction::MinVar
                };
                self.gcf_changes += 1;
                let members = self.present_addrs();
                self.send_all(ctx, &members, MSG_EPOS_CHANGE, &format!("cost={}", cost_text(&self.cost)));
                self.set_wait(ctx, Wait::Acks(members));
            }
            _ => return self.skip(ctx, &e),
        }
        self.run_changes += 1;
    }

    fn start_run(&mut self, ctx: &mut Context<'_>) {
        let now = ctx.now_ms();
        self.phase = Phase::Running;
        self.adaptivity = now - self.adapt_start;
        self.run_start = now;
        let members = self.present_addrs();
        self.send_all(ctx, &members, MSG_EPOS_START, &format!("run={}\niterations={}", self.run, self.cfg.iterations));
        self.set_wait(ctx, Wait::Finished { run: self.run, pending: members, report: None, aborted: false });
    }

    fn complete_run(&mut self, ctx: &mut Context<'_>, report: Option<RunReport>, aborted: bool) {
        let now = ctx.now_ms();
        let last = report.as_ref().and_then(|r| r.final_record().cloned());
        let rec = EposRunRecord {
            run: self.run,
            started_ms: self.adapt_start,
            level: self.level,
            is_static: self.run < self.cfg.static_runs,
            adaptivity_ms: self.adaptivity,
            working_ms: now - self.run_start,
            members: self.present(),
            changes: self.run_changes,
            final_global: last.as_ref().map(|r| r.global_cost),
            final_local: last.as_ref().map(|r| r.local_cost),
            aborted,
        };
        if let Some(g) = rec.final_global {
            ctx.log(LogKind::Service, "final_global_cost", g);
        }
        ctx.log(LogKind::Service, "working_ms", rec.working_ms);
        ctx.log(LogKind::Service, "adaptivity_ms", rec.adaptivity_ms);
        self.records.push(rec);
        self.set_wait(ctx, Wait::Nothing);
        self.run += 1;
        self.begin_run(ctx);
    }

    fn on_finished(&mut self, ctx: &mut Context<'_>, from: &NetworkAddress, run: u64, was_aborted: bool) {
        let done = match &mut self.wait {
            Wait::Finished { run: r, pending, report, aborted } if *r == run => {
                pending.remove(from);
                *aborted |= was_aborted;
                pending.is_empty() && (report.is_some() || *aborted)
            }
            _ => false,
        };
        if done {
            self.finish_wait(ctx);
        }
    }

    fn finish_wait(&mut self, ctx: &mut Context<'_>) {
        if let Wait::Finished { report, aborted, .. } = std::mem::replace(&mut self.wait, Wait::Nothing) {
            self.complete_run(ctx, report, aborted);
        }
    }

    fn on_timeout(&mut self, ctx: &mut Context<'_>) {
        self.timeouts += 1;
        ctx.log(LogKind::Event, "driver_timeout", format!("{:?}", self.wait));
        match std::mem::replace(&mut self.wait, Wait::Nothing) {
            Wait::Joined(i) => {
                // Treat the silent agent as gone.
                leave(ctx, &self.cfg.agents[i]);
                self.present[i] = false;
            }
            Wait::Finished { report, .. } => {
                self.rebuild = true;
                return self.complete_run(ctx, report, true);
            }
            _ => {}
        }
        self.advance(ctx);
    }
}

impl Peerlet for EposDriver {
    fn start(&mut self, ctx: &mut Context<'_>) {
        self.mode = ctx.mode();
        self.watchdog = ctx.schedule_timer(self.cfg.step_timeout_ms.max(1) * 10, false).ok();
    }

    fn handle_message(&mut self, ctx: &mut Context<'_>, env: &Envelope) {
        let Some(i) = index_of(&self.cfg.agents, &env.sender) else { return };
        match env.msg_type {
            MSG_EPOS_JOINED => {
                self.joined.insert(i);
                if self.wait == Wait::Joined(i) {
                    if self.cost != self.cfg.initial_cost {
                        self.steps.push_front(Step::SyncCost(i));
                    }
                    self.set_wait(ctx, Wait::Nothing);
                    self.advance(ctx);
                } else if self.phase == Phase::Bootstrap && (0..self.present.len()).all(|j| self.joined.contains(&j)) {
                    self.set_wait(ctx, Wait::Nothing);
                    self.begin_run(ctx);
                }
            }
            MSG_EPOS_ACK => {
                let body = String::from_utf8_lossy(&env.body).to_string();
                if let Some(r) = body.strip_prefix("finished=").and_then(|r| r.parse().ok()) {
                    return self.on_finished(ctx, &env.sender, r, false);
                }
                if let Some(r) = body.strip_prefix("aborted=").and_then(|r| r.parse().ok()) {
                    return self.on_finished(ctx, &env.sender, r, true);
                }
                let done = match &mut self.wait {
                    Wait::Acks(pending) => {
                        pending.remove(&env.sender);
                        pending.is_empty()
                    }
                    _ => false,
                };
                if done {
                    self.set_wait(ctx, Wait::Nothing);
                    self.advance(ctx);
                }
            }
            MSG_EPOS_REPORT => {
                let Ok(rep) = RunReport::decode(&env.body) else { return };
                let done = match &mut self.wait {
                    Wait::Finished { run, pending, report, .. } if *run == rep.run => {
                        *report = Some(rep);
                        pending.is_empty()
                    }
                    _ => false,
                };
                if done {
                    self.finish_wait(ctx);
                }
            }
            _ => {}
        }
    }

    fn handle_timer(&mut self, ctx: &mut Context<'_>, timer: TimerId) {
        if self.watchdog.map(|t| t.id) != Some(timer.id) {
            return;
        }
        self.watchdog = None;
        if self.phase == Phase::Bootstrap {
            // Start with whoever made it.
            self.timeouts += 1;
            for j in 0..self.present.len() {
                if !self.joined.contains(&j) {
                    self.present[j] = false;
                    self.rebuild = true;
                }
            }
            return self.begin_run(ctx);
        }
        self.on_timeout(ctx);
    }
}

/// Per-agent news counts: each agent reports one source. The selected
/// reading is the latest count; possible states are sampled from the last
/// 27 counts of the same source.
#[derive(Debug, Clone)]
pub struct DiasWorkload {
    news: SyntheticNews,
    windows: Vec<VecDeque<f64>>,
    raw: Vec<f64>,
    states: Vec<PossibleStates>,
    k: usize,
    seed: u64,
    refreshes: u64,
}

const WINDOW: usize = 27;

impl DiasWorkload {
    pub fn new(n: usize, k: usize, seed: u64) -> Self {
        let mut w = DiasWorkload {
            news: SyntheticNews::new(n, seed),
            windows: vec![VecDeque::new(); n],
            raw: vec![0.0; n],
            states: Vec::new(),
            k,
            seed,
            refreshes: 0,
        };
        for _ in 0..WINDOW {
            w.tick();
        }
        w.refresh_states();
        w
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw(&self, i: usize) -> f64 {
        self.raw[i]
    }

    pub fn states(&self, i: usize) -> &PossibleStates {
        &self.states[i]
    }

    /// The selected state of agent `i`.
    pub fn value(&self, i: usize) -> f64 {
        self.states[i].get(summarize(self.raw[i], &self.states[i]))
    }

    /// Next news tick: new readings, windows slide by one.
    pub fn tick(&mut self) {
        let t = self.news.next_tick();
        for (i, c) in t.counts.into_iter().enumerate() {
            let w = &mut self.windows[i];
            if w.len() == WINDOW {
                w.pop_front();
            }
            w.push_back(c as f64);
            self.raw[i] = c as f64;
        }
    }

    /// Re-samples every agent's possible states from its window.
    pub fn refresh_states(&mut self) {
        self.refreshes += 1;
        self.states = self
            .windows
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let window: Vec<f64> = w.iter().copied().collect();
                let seed = self.seed ^ ((i as u64) << 20) ^ self.refreshes;
                derive_possible_states(&window, self.k, seed).expect("window is filled").0
            })
            .collect();
    }
}

#[derive(Debug, Clone)]
pub struct DiasDriverConfig {
    pub agents: Vec<AgentHandle>,
    pub schedule: IntensitySchedule,
    pub seed: u64,
    pub k: usize,
    /// Quiet time between bootstrap and the first change.
    pub warmup_ms: u64,
    pub duration_ms: u64,
    pub churn: DiasChurn,
    pub sample_period_ms: u64,
    /// Samples in the rolling error mean.
    pub window: usize,
    /// Apply the change schedule; off for static runs.
    pub inject: bool,
}

/// Estimation error at one sampling instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiasSample {
    pub t_ms: u64,
    pub true_sum: f64,
    pub mean_estimate: f64,
    pub instant: f64,
    pub rolling: f64,
    pub responders: usize,
    pub level: Level,
}

/// Drives aggregation dynamics on a fixed timetable and samples every
/// agent's estimate of the sum.
pub struct DiasDriver {
    cfg: DiasDriverConfig,
    workload: DiasWorkload,
    present: Vec<bool>,
    joined: BTreeSet<usize>,
    events: VecDeque<ChangeEvent>,
    event_timer: Option<TimerId>,
    sample_timer: Option<TimerId>,
    end_timer: Option<TimerId>,
    query: Option<(u64, f64, BTreeSet<NetworkAddress>, Vec<f64>)>,
    rolling: RollingError,
    started: bool,
    done: bool,
    pub samples: Vec<DiasSample>,
    pub bursts: Vec<u64>,
    pub selected_changes: u64,
    pub states_changes: u64,
    pub joins: u64,
    pub leaves: u64,
    pub skipped: u64,
    pub origin_ms: u64,
}

impl DiasDriver {
    pub fn new(cfg: DiasDriverConfig) -> Self {
        let n = cfg.agents.len();
        DiasDriver {
            workload: DiasWorkload::new(n, cfg.k, cfg.seed),
            rolling: RollingError::new(cfg.window),
            cfg,
            present: vec![true; n],
            joined: BTreeSet::new(),
            events: VecDeque::new(),
            event_timer: None,
            sample_timer: None,
            end_timer: None,
            query: None,
            started: false,
            done: false,
            samples: Vec::new(),
            bursts: Vec::new(),
            selected_changes: 0,
            states_changes: 0,
            joins: 0,
            leaves: 0,
            skipped: 0,
            origin_ms: 0,
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn workload(&self) -> &DiasWorkload {
        &self.workload
    }

    /// Sum of the selected states of the agents currently in the network.
    pub fn true_sum(&self) -> f64 {
        self.joined.iter().filter(|i| self.present[**i]).map(|i| self.workload.value(*i)).sum()
    }

    pub fn metrics(&self) -> Vec<MetricsRecord> {
        self.samples
            .iter()
            .map(|s| MetricsRecord {
                run_id: "dias".into(),
                t: s.t_ms,
                dias_err: Some(s.instant),
                intensity: self.cfg.inject.then_some(s.level),
                ..Default::default()
            })
            .collect()
    }

    /// For each burst, the delay until the rolling error first drops to
    /// `frac` of the true sum, looking no further than `within_ms`.
    pub fn recovery(&self, frac: f64, within_ms: u64) -> Vec<(u64, Option<u64>)> {
        self.bursts
            .iter()
            .map(|b| {
                let hit = self
                    .samples
                    .iter()
                    .filter(|s| s.t_ms > *b && s.t_ms <= b + within_ms)
                    .find(|s| s.rolling <= frac * s.true_sum.abs())
                    .map(|s| s.t_ms - b);
                (*b, hit)
            })
            .collect()
    }

    fn begin(&mut self, ctx: &mut Context<'_>) {
        self.started = true;
        let now = ctx.now_ms();
        self.origin_ms = now + self.cfg.warmup_ms;
        let end = self.origin_ms + self.cfg.duration_ms;
        if self.cfg.inject {
            let n = self.cfg.agents.len();
            self.events = dias_events(&self.cfg.schedule, n, self.origin_ms, end, self.cfg.churn, self.cfg.seed).into();
        }
        self.arm_next_event(ctx);
        self.sample_timer = ctx.schedule_timer(self.cfg.sample_period_ms, true).ok();
        self.end_timer = ctx.schedule_timer(end - now, false).ok();
    }

    fn arm_next_event(&mut self, ctx: &mut Context<'_>) {
        if let Some(e) = self.events.front() {
            let delay = e.t_ms.saturating_sub(ctx.now_ms()).max(1);
            self.event_timer = ctx.schedule_timer(delay, false).ok();
        }
    }

    /// A burst is a change that reaches the network; joins at one instant
    /// count once.
    fn mark_burst(&mut self, now: u64) {
        if self.present.iter().any(|p| *p) && self.bursts.last() != Some(&now) {
            self.bursts.push(now);
        }
    }

    fn send_change(&self, ctx: &mut Context<'_>, i: usize, body: String) {
        let _ = ctx.send(&self.cfg.agents[i].addr, MSG_DIAS_CHANGE, body.into_bytes());
    }

    fn active(&self) -> Vec<usize> {
        self.joined.iter().copied().filter(|i| self.present[*i]).collect()
    }

    fn apply(&mut self, ctx: &mut Context<'_>, e: ChangeEvent) {
        ctx.log(LogKind::Event, "change", format!("{:?} {:?}", e.kind, e.target));
        match (e.kind, e.target) {
            (ChangeKind::SelectedStateChange, _) => {
                self.workload.tick();
                self.mark_burst(ctx.now_ms());
                for i in self.active() {
                    self.send_change(ctx, i, format!("raw={}", self.workload.raw(i)));
                    self.selected_changes += 1;
                }
            }
            (ChangeKind::PossibleStatesChange, _) => {
                self.workload.refresh_states();
                self.mark_burst(ctx.now_ms());
                for i in self.active() {
                    self.send_change(ctx, i, format!("states={}", self.workload.states(i).to_text()));
                    self.states_changes += 1;
                }
            }
            (ChangeKind::Leave, Target::Agent(i)) if self.present.get(i) == Some(&true) => {
                leave(ctx, &self.cfg.agents[i]);
                self.present[i] = false;
                self.joined.remove(&i);
                self.leaves += 1;
            }
            (ChangeKind::Join, Target::Agent(i)) if self.present.get(i) == Some(&false) => {
                rejoin(ctx, &self.cfg.agents[i]);
                self.present[i] = true;
                self.joins += 1;
                self.mark_burst(ctx.now_ms());
            }
            _ => {
                self.skipped += 1;
                ctx.log(LogKind::Event, "change_skipped", format!("{:?} {:?}", e.kind, e.target));
            }
        }
    }

    fn close_query(&mut self) {
        let Some((t, true_sum, _, estimates)) = self.query.take() else { return };
        if let Ok(s) = self.rolling.record(true_sum, &estimates) {
            let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
            self.samples.push(DiasSample {
                t_ms: t,
                true_sum,
                mean_estimate: mean,
                instant: s.instant,
                rolling: s.rolling,
                responders: estimates.len(),
                level: self.cfg.schedule.level_at(t).level,
            });
        }
    }

    fn sample(&mut self, ctx: &mut Context<'_>) {
        self.close_query();
        let targets: BTreeSet<NetworkAddress> = self.active().into_iter().map(|i| self.cfg.agents[i].addr.clone()).collect();
        for a in &targets {
            let _ = ctx.send(a, MSG_DIAS_QUERY, Vec::new());
        }
        self.query = Some((ctx.now_ms(), self.true_sum(), targets, Vec::new()));
    }
}

impl Peerlet for DiasDriver {
    fn handle_message(&mut self, ctx: &mut Context<'_>, env: &Envelope) {
        match env.msg_type {
            MSG_DIAS_JOINED => {
                let Some(i) = index_of(&self.cfg.agents, &env.sender) else { return };
                if !self.present[i] {
                    return;
                }
                if self.started {
                    // The device restarts from its initial reading.
                    let body = format!("raw={}\nstates={}", self.workload.raw(i), self.workload.states(i).to_text());
                    self.send_change(ctx, i, body);
                }
                self.joined.insert(i);
                if !self.started && self.joined.len() == self.cfg.agents.len() {
                    self.begin(ctx);
                }
            }
            MSG_DIAS_ESTIMATE => {
                let Some((_, _, targets, estimates)) = self.query.as_mut() else { return };
                if !targets.remove(&env.sender) {
                    return;
                }
                let sum = String::from_utf8_lossy(&env.body)
                    .lines()
                    .find_map(|l| l.strip_prefix("sum=").and_then(|v| v.parse::<f64>().ok()));
                if let Some(sum) = sum {
                    estimates.push(sum);
                }
            }
            _ => {}
        }
    }

    fn handle_timer(&mut self, ctx: &mut Context<'_>, timer: TimerId) {
        if self.done {
            return;
        }
        if self.event_timer.map(|t| t.id) == Some(timer.id) {
            let now = ctx.now_ms();
            while self.events.front().is_some_and(|e| e.t_ms <= now) {
                let e = self.events.pop_front().expect("checked");
                self.apply(ctx, e);
            }
            self.arm_next_event(ctx);
        } else if self.sample_timer.map(|t| t.id) == Some(timer.id) {
            self.sample(ctx);
        } else if self.end_timer.map(|t| t.id) == Some(timer.id) {
            self.close_query();
            self.done = true;
            if let Some(t) = self.sample_timer.take() {
                ctx.cancel_timer(t);
            }
            if let Some(t) = self.event_timer.take() {
                ctx.cancel_timer(t);
            }
            ctx.signal("dias_driver_done", self.samples.len().to_string());
        }
    }
}
