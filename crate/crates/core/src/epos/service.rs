use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::engine::{accept, bottom_up, record, Contribution, EposAgent, IterationRecord};
use super::planfile::{parse_plans, render_plans};
use super::{build_tree, AgentPreferences, EposError, GlobalCostFunction, Moments, Plan, PlanSet, TreeTopology};
use crate::bootstrap::{AgentLink, Device, Service, ServiceMetadata};
use crate::messaging::{Envelope, NetworkAddress};
use crate::monitoring::LogKind;
use crate::runtime::{Context, TimerId};

/// Child to parent: subtree aggregate of one iteration.
pub const MSG_EPOS_UP: u16 = 20;
/// Parent to child: global response and acceptance of one iteration.
pub const MSG_EPOS_DOWN: u16 = 21;
/// Driver to agent: start a run.
pub const MSG_EPOS_START: u16 = 22;
/// Root to driver: per-iteration outcome of a finished run.
pub const MSG_EPOS_REPORT: u16 = 23;
/// Driver to agent: plan, preference, cost function or membership change.
pub const MSG_EPOS_CHANGE: u16 = 24;
/// Agent to driver: change applied.
pub const MSG_EPOS_ACK: u16 = 25;
/// Agent to driver: plans loaded, ready to take part in runs.
pub const MSG_EPOS_JOINED: u16 = 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterationMode {
    /// Parents wait for every child; a straggler timeout aborts the run.
    Lockstep,
    /// Parents wait up to the straggler timeout, then proceed with the last
    /// report received from each late child.
    Async,
}

/// Run parameters carried in the service request metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EposConfig {
    pub iterations: usize,
    pub cost: GlobalCostFunction,
    pub tree_seed: u64,
    pub mode: IterationMode,
    pub straggler_timeout_ms: Option<u64>,
    /// Runs started automatically after bootstrap; 0 leaves runs to the
    /// driver.
    pub runs: u64,
    pub driver: Option<NetworkAddress>,
    pub normalize: bool,
}

impl Default for EposConfig {
    fn default() -> Self {
        EposConfig {
            iterations: 50,
            cost: GlobalCostFunction::MinVar,
            tree_seed: 0,
            mode: IterationMode::Lockstep,
            straggler_timeout_ms: None,
            runs: 1,
            driver: None,
            normalize: false,
        }
    }
}

impl EposConfig {
    pub fn to_metadata(&self, md: ServiceMetadata) -> ServiceMetadata {
        let mut md = md
            .with_param("epos.iterations", self.iterations)
            .with_param("epos.cost", cost_text(&self.cost))
            .with_param("epos.tree_seed", self.tree_seed)
            .with_param("epos.mode", if self.mode == IterationMode::Lockstep { "lockstep" } else { "async" })
            .with_param("epos.runs", self.runs)
            .with_param("epos.normalize", self.normalize);
        if let Some(ms) = self.straggler_timeout_ms {
            md = md.with_param("epos.straggler_ms", ms);
        }
        if let Some(d) = &self.driver {
            md = md.with_param("epos.driver", d);
        }
        md
    }

    pub fn from_metadata(md: &ServiceMetadata) -> Result<EposConfig, EposError> {
        let d = EposConfig::default();
        let num = |k: &str, default: u64| -> Result<u64, EposError> {
            md.param(k).map(|v| v.parse::<u64>().map_err(|_| EposError::Malformed(format!("{k}={v}")))).unwrap_or(Ok(default))
        };
        let iterations = num("epos.iterations", d.iterations as u64)? as usize;
        if iterations == 0 {
            return Err(EposError::Malformed("epos.iterations=0".into()));
        }
        let mode = match md.param("epos.mode").unwrap_or("lockstep") {
            "lockstep" => IterationMode::Lockstep,
            "async" => IterationMode::Async,
            other => return Err(EposError::Malformed(format!("epos.mode={other}"))),
        };
        Ok(EposConfig {
            iterations,
            cost: md.param("epos.cost").map(str::parse).transpose()?.unwrap_or(d.cost),
            tree_seed: num("epos.tree_seed", 0)?,
            mode,
            straggler_timeout_ms: md.param("epos.straggler_ms").map(|_| num("epos.straggler_ms", 0)).transpose()?,
            runs: num("epos.runs", d.runs)?,
            driver: md.param("epos.driver").map(NetworkAddress::from_raw),
            normalize: md.param("epos.normalize") == Some("true"),
        })
    }
}

pub fn cost_text(c: &GlobalCostFunction) -> String {
    match c {
        GlobalCostFunction::MinVar => "MIN_VAR".into(),
        GlobalCostFunction::MinRmse(s) => format!("MIN_RMSE:{}", s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")),
    }
}

/// Per-iteration outcome of a run as reported by the root.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub run: u64,
    pub records: Vec<IterationRecord>,
}

impl RunReport {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("run={}\n", self.run);
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.t,
                r.global_cost,
                r.proposed_cost,
                r.local_cost,
                r.unfairness,
                u8::from(r.accepted)
            ));
        }
        out.into_bytes()
    }

    pub fn decode(body: &[u8]) -> Result<RunReport, EposError> {
        let text = std::str::from_utf8(body).map_err(|_| EposError::Malformed("report is not UTF-8".into()))?;
        let mut lines = text.lines();
        let bad = || EposError::Malformed("report".into());
        let run = lines.next().and_then(|l| l.strip_prefix("run=")).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let mut records = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            records.push(IterationRecord {
                t: f[0].parse().map_err(|_| bad())?,
                global_cost: num(1)?,
                proposed_cost: num(2)?,
                local_cost: num(3)?,
                unfairness: num(4)?,
                accepted: f[5] == "1",
            });
        }
        Ok(RunReport { run, records })
    }

    pub fn final_record(&self) -> Option<&IterationRecord> {
        self.records.last()
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    fn f64(&mut self, v: f64) -> &mut Self {
        self.u64(v.to_bits())
    }
    fn contribution(&mut self, c: &Contribution) -> &mut Self {
        self.f64(c.moments.sum).f64(c.moments.sumsq).u64(c.moments.count).u64(c.response.len() as u64);
        for v in &c.response {
            self.f64(*v);
        }
        self
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn u64(&mut self) -> Result<u64, EposError> {
        if self.0.len() < 8 {
            return Err(EposError::Malformed("truncated message".into()));
        }
        let (head, rest) = self.0.split_at(8);
        self.0 = rest;
        Ok(u64::from_be_bytes(head.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, EposError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn contribution(&mut self) -> Result<Contribution, EposError> {
        let moments = Moments { sum: self.f64()?, sumsq: self.f64()?, count: self.u64()? };
        let d = self.u64()? as usize;
        if d > self.0.len() / 8 {
            return Err(EposError::Malformed("response length".into()));
        }
        let response = (0..d).map(|_| self.f64()).collect::<Result<_, _>>()?;
        Ok(Contribution { response, moments })
    }
}

fn encode_up(run: u64, t: usize, c: &Contribution) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u64(run).u64(t as u64).contribution(c);
    w.0
}

fn decode_up(body: &[u8]) -> Result<(u64, usize, Contribution), EposError> {
    let mut r = Reader(body);
    Ok((r.u64()?, r.u64()? as usize, r.contribution()?))
}

struct Down {
    run: u64,
    t: usize,
    accepted: bool,
    last: bool,
    global: Contribution,
}

fn encode_down(d: &Down) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u64(d.run).u64(d.t as u64).u64(u64::from(d.accepted) | (u64::from(d.last) << 1)).contribution(&d.global);
    w.0
}

fn decode_down(body: &[u8]) -> Result<Down, EposError> {
    let mut r = Reader(body);
    let (run, t, flags) = (r.u64()?, r.u64()? as usize, r.u64()?);
    Ok(Down { run, t, accepted: flags & 1 == 1, last: flags & 2 == 2, global: r.contribution()? })
}

/// Sensing reply: `prefs:alpha,beta` followed by plan lines.
fn encode_plans(agent: &EposAgent) -> Vec<u8> {
    format!("prefs:{},{}\n{}", agent.prefs.alpha, agent.prefs.beta, render_plans(&agent.plans)).into_bytes()
}

fn decode_plans(body: &[u8]) -> Result<EposAgent, EposError> {
    let text = std::str::from_utf8(body).map_err(|_| EposError::Malformed("plans are not UTF-8".into()))?;
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let prefs = first.strip_prefix("prefs:").ok_or_else(|| EposError::Malformed("missing prefs line".into()))?;
    let (a, b) = prefs.split_once(',').ok_or_else(|| EposError::Malformed("prefs".into()))?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|_| EposError::Malformed("prefs".into()));
    Ok(EposAgent { prefs: AgentPreferences::new(num(a)?, num(b)?)?, plans: parse_plans(rest)? })
}

fn text_fields(body: &[u8]) -> BTreeMap<String, String> {
    String::from_utf8_lossy(body)
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Device holding a user's plans and preferences. A replan request rotates
/// every plan by a seed-derived offset and redraws its local cost.
#[derive(Debug, Clone)]
pub struct EposDevice {
    agent: EposAgent,
    pub applied: Vec<usize>,
    pub replans: u64,
}

impl EposDevice {
    pub fn new(plans: PlanSet, prefs: AgentPreferences) -> Self {
        EposDevice { agent: EposAgent { plans, prefs }, applied: Vec::new(), replans: 0 }
    }

    pub fn plans(&self) -> &PlanSet {
        &self.agent.plans
    }

    fn replan(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.agent.plans.dim();
        let plans = self
            .agent
            .plans
            .plans()
            .iter()
            .map(|p| {
                let mut values = p.values.clone();
                values.rotate_right(rng.random_range(0..d.max(1)));
                Plan { values, local_cost: rng.random_range(0.0..1.0) }
            })
            .collect();
        self.agent.plans = PlanSet::new(plans).expect("same shape");
        self.replans += 1;
    }
}

impl Device for EposDevice {
    fn sense(&mut self, _ctx: &mut Context<'_>, request: &[u8]) -> Vec<u8> {
        if let Some(seed) = std::str::from_utf8(request).ok().and_then(|r| r.strip_prefix("replan:")).and_then(|s| s.parse().ok()) {
            self.replan(seed);
        }
        encode_plans(&self.agent)
    }

    fn actuate(&mut self, _ctx: &mut Context<'_>, actuation: &[u8]) {
        if let Some(j) = text_fields(actuation).get("plan").and_then(|v| v.parse().ok()) {
            self.applied.push(j);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Up,
    WaitDown,
}

struct RunState {
    run: u64,
    t: usize,
    f: usize,
    phase: Phase,
    prev_global: Contribution,
    prev_subtree: Contribution,
    proposed: Option<(usize, Contribution)>,
    selected: Option<usize>,
    reports: BTreeMap<NetworkAddress, (usize, Contribution)>,
    timer: Option<TimerId>,
    timed_out: bool,
    last_cost: Option<f64>,
    history: Vec<IterationRecord>,
}

/// Selection an agent ended a run with; the root also keeps the history.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run: u64,
    pub selected: usize,
    pub history: Vec<IterationRecord>,
}

/// Distributed plan selection hosted by a service agent.
#[derive(Default)]
pub struct EposService {
    cfg: EposConfig,
    agent: Option<EposAgent>,
    members: Vec<NetworkAddress>,
    tree: Option<TreeTopology<NetworkAddress>>,
    run: Option<RunState>,
    next_auto: u64,
    buffered: Vec<Envelope>,
    deferred: Vec<Envelope>,
    pending_replan: Option<NetworkAddress>,
    pub outcomes: Vec<RunOutcome>,
    pub aborted_runs: u64,
    pub stale_reports: u64,
    pub rejected: u64,
}

impl EposService {
    pub fn new() -> Self {
        EposService::default()
    }

    pub fn config(&self) -> &EposConfig {
        &self.cfg
    }

    pub fn agent(&self) -> Option<&EposAgent> {
        self.agent.as_ref()
    }

    pub fn tree(&self) -> Option<&TreeTopology<NetworkAddress>> {
        self.tree.as_ref()
    }

    pub fn in_run(&self) -> bool {
        self.run.is_some()
    }

    fn set_members(&mut self, members: Vec<NetworkAddress>) -> Result<(), EposError> {
        self.tree = Some(build_tree(&members, self.cfg.tree_seed)?);
        self.members = members;
        Ok(())
    }

    fn start_run(&mut self, ctx: &mut Context<'_>, link: &mut AgentLink, run: u64, f: usize) {
        let Some(agent) = &self.agent else { return };
        let me = ctx.address().clone();
        if !self.tree.as_ref().is_some_and(|t| t.contains(&me)) {
            ctx.log(LogKind::Event, "epos_not_member", run as f64);
            return;
        }
        let d = agent.plans.dim();
        self.run = Some(RunState {
            run,
            t: 1,
            f,
            phase: Phase::Up,
            prev_global: Contribution::zero(d),
            prev_subtree: Contribution::zero(d),
            proposed: None,
            selected: None,
            reports: BTreeMap::new(),
            timer: None,
            timed_out: false,
            last_cost: None,
            history: Vec::new(),
        });
        for env in std::mem::take(&mut self.buffered) {
            self.on_message(ctx, link, &env);
        }
        self.try_up(ctx, link);
    }

    fn try_up(&mut self, ctx: &mut Context<'_>, link: &mut AgentLink) {
        let (Some(st), Some(tree), Some(agent)) = (self.run.as_mut(), self.tree.as_ref(), self.agent.as_ref()) else { return };
        if st.phase != Phase::Up {
            return;
        }
        let me = ctx.address().clone();
        let children = tree.children(&me);
        let fresh = children.iter().all(|c| st.reports.get(c).is_some_and(|(t, _)| *t == st.t));
        let proceed = fresh || (self.cfg.mode == IterationMode::Async && st.timed_out);
        if !proceed {
            if st.timer.is_none() {
                if let Some(ms) = self.cfg.straggler_timeout_ms {
                    st.timer = ctx.schedule_timer(ms, false).ok();
                }
            }
            return;
        }
        if let Some(timer) = st.timer.take() {
            ctx.cancel_timer(timer);
        }
        if !fresh {
            self.stale_reports += 1;
        }
        st.timed_out = false;
        let zero = Contribution::zero(agent.plans.dim());
        let kids: Vec<&Contribution> = children.iter().map(|c| st.reports.get(c).map(|(_, c)| c).unwrap_or(&zero)).collect();
        let (j, contrib) = match bottom_up(agent, &self.cfg.cost, self.cfg.normalize, &st.prev_global, &st.prev_subtree, &kids) {
            Ok(v) => v,
            Err(e) => {
                ctx.log(LogKind::Event, "epos_error", e.to_string());
                self.abort(ctx);
                self.drain_deferred(ctx, link);
                return;
            }
        };
        st.phase = Phase::WaitDown;
        match tree.parent(&me) {
            Some(parent) => {
                let body = encode_up(st.run, st.t, &contrib);
                st.proposed = Some((j, contrib));
                let _ = ctx.send(parent, MSG_EPOS_UP, body);
            }
            None => {
                let (accepted, proposed_cost) = match accept(&self.cfg.cost, &contrib.response, st.last_cost) {
                    Ok(v) => v,
                    Err(_) => {
                        self.abort(ctx);
                        return self.drain_deferred(ctx, link);
                    }
                };
                let global = if accepted { contrib.clone() } else { st.prev_global.clone() };
                let down = Down { run: st.run, t: st.t, accepted, last: st.t == st.f, global };
                if let Ok(rec) = record(st.t, &self.cfg.cost, &down.global, proposed_cost, accepted) {
                    ctx.log(LogKind::Service, "global_cost", rec.global_cost);
                    ctx.log(LogKind::Service, "local_cost", rec.local_cost);
                    ctx.log(LogKind::Service, "unfairness", rec.unfairness);
                    if accepted {
                        st.last_cost = Some(rec.global_cost);
                    }
                    st.history.push(rec);
                }
                st.proposed = Some((j, contrib));
                self.apply_down(ctx, link, down);
            }
        }
    }

    fn apply_down(&mut self, ctx: &mut Context<'_>, link: &mut AgentLink, down: Down) {
        let Some(st) = self.run.as_mut() else { return };
        if down.run != st.run || down.t != st.t {
            return;
        }
        if st.phase == Phase::Up {
            // Late in async mode: our proposal never reached the root.
            self.stale_reports += 1;
            if let Some(timer) = st.timer.take() {
                ctx.cancel_timer(timer);
            }
        } else if let Some((j, contrib)) = st.proposed.take() {
            if down.accepted {
                st.selected = Some(j);
                st.prev_subtree = contrib;
            }
        }
        st.prev_global = down.global.clone();
        let body = encode_down(&down);
        if let Some(tree) = &self.tree {
            for c in tree.children(ctx.address()) {
                let _ = ctx.send(c, MSG_EPOS_DOWN, body.clone());
            }
        }
        if down.last {
            self.finish_run(ctx, link);
        } else {
            st.t += 1;
            st.phase = Phase::Up;
            self.try_up(ctx, link);
        }
    }

    fn finish_run(&mut self, ctx: &mut Context<'_>, link: &mut AgentLink) {
        let Some(st) = self.run.take() else { return };
        let Some(selected) = st.selected else {
            self.aborted_runs += 1;
            if self.cfg.runs == 0 {
                self.ack(ctx, &format!("aborted={}", st.run));
            }
            self.drain_deferred(ctx, link);
            return;
        };
        let _ = link.actuate(ctx, format!("plan={selected}\nrun={}", st.run).as_bytes());
        let is_root = self.tree.as_ref().is_some_and(|t| t.root() == ctx.address());
        if is_root {
            let report = RunReport { run: st.run, records: st.history.clone() };
            if let Some(driver) = &self.cfg.driver {
                let _ = ctx.send(driver, MSG_EPOS_REPORT, report.encode());
            }
            ctx.signal("epos_run_done", st.run.to_string());
        }
        self.outcomes.push(RunOutcome { run: st.run, selected, history: st.history });
        if self.cfg.runs == 0 {
            self.ack(ctx, &format!("finished={}", st.run));
        }
        if self.cfg.runs > 0 {
            self.next_auto = st.run + 1;
            if self.next_auto < self.cfg.runs {
                self.start_run(ctx, link, self.next_auto, self.cfg.iterations);
            } else {
                let _ = link.complete(ctx);
            }
        }
        self.drain_deferred(ctx, link);
    }

    /// Replays driver messages that arrived while a run was in progress.
    fn drain_deferred(&mut self, ctx: &mut Context<'_>, link: &mut AgentLink) {
        if self.run.is_some() {
            return;
        }
        for env in std::mem::take(&mut self.deferred) {
            self.on_message(ctx, link, &env);
        }
    }

    fn abort(&mut self, ctx: &mut Context<'_>) {
        if let Some(st) = self.run.take() {
            if let Some(timer) = st.timer {
                ctx.cancel_timer(timer);
            }
            self.aborted_runs += 1;
            ctx.log(LogKind::Event, "epos_aborted", st.run as f64);
            ctx.signal("epos_aborted", format!("{} t={}", st.run, st.t));
            if self.cfg.runs == 0 {
                self.ack(ctx, &format!("aborted={}", st.run));
            }
        }
    }

    fn ack(&self, ctx: &mut Context<'_>, kind: &str) {
        if let Some(driver) = &self.cfg.driver {
            let _ = ctx.send(driver, MSG_EPOS_ACK, kind.as_bytes().to_vec());
        }
    }

    fn on_change(&mut self, ctx: &mut Context<'_>, link: &mut AgentLink, body: &[u8]) {
        let fields = text_fields(body);
        let mut applied = Vec::new();
        if let Some(w) = fields.get("weights") {
            let parsed = w.split_once(',').and_then(|(a, b)| Some((a.parse::<f64>().ok()?, b.parse::<f64>().ok()?)));
            match (parsed.map(|(a, b)| AgentPreferences::new(a, b)), self.agent.as_mut()) {
                (Some(Ok(p)), Some(agent)) => {
                    agent.prefs = p;
                    applied.push("weights");
                }
                _ => self.rejected += 1,
            }
        }
        if let Some(c) = fields.get("cost") {
            match c.parse::<GlobalCostFunction>() {
                Ok(cost) => {
                    self.cfg.cost = cost;
                    applied.push("cost");
                }
                Err(_) => self.rejected += 1,
            }
        }
        if let Some(m) = fields.get("members") {
            let members = m.split_whitespace().map(NetworkAddress::from_raw).collect();
            match self.set_members(members) {
                Ok(()) => applied.push("members"),
                Err(_) => self.rejected += 1,
            }
        }
        if let Some(seed) = fields.get("replan") {
            if link.request_sensing(ctx, format!("replan:{seed}").as_bytes()).is_ok() {
                self.pending_replan = self.cfg.driver.clone();
                // Acknowledged once the device answers.
                return;
            }
            self.rejected += 1;
        }
        if !applied.is_empty() {
            self.ack(ctx, &applied.join(","));
        }
    }
}

impl Service for EposService {
    fn validate(&self, serv_md: &ServiceMetadata) -> bool {
        EposConfig::from_metadata(serv_md).is_ok()
    }

    fn on_ready(&mut self, _ctx: &mut Context<'_>, link: &mut AgentLink) {
        if let Some(cfg) = link.metadata().and_then(|md| EposConfig::from_metadata(md).ok()) {
            self.cfg = cfg;
        }
        let members = link.members();
        if !members.is_empty() {
            let _ = self.set_members(members);
        }
    }

    fn on_run(&mut self, ctx: &mut Context<'_>, link: &mut AgentLink) {
        let _ = link.request_sensing(ctx, b"plans");
    }

    fn on_sensing(&mut self, ctx: &mut Context<'_>, link: &mut AgentLink, data: &[u8]) {
        let agent = match decode_plans(data) {
            Ok(a) => a,
            Err(e) => {
                self.rejected += 1;
                ctx.log(LogKind::Event, "epos_bad_plans", e.to_string());
                return;
            }
        };
        let first = self.agent.is_none();
        match &mut self.agent {
            // Preferences set by the driver survive a replan.
            Some(a) => a.plans = agent.plans,
            None => self.agent = Some(agent),
        }
        if let Some(driver) = self.pending_replan.take() {
            let _ = ctx.send(&driver, MSG_EPOS_ACK, b"replan".to_vec());
        }
        if first {
            if let Some(driver) = &self.cfg.driver {
                let _ = ctx.send(driver, MSG_EPOS_JOINED, ctx.address().as_str().as_bytes().to_vec());
            }
            if self.cfg.runs > 0 && self.run.is_none() {
                self.start_run(ctx, link, self.next_auto, self.cfg.iterations);
            }
        }
    }

    fn on_message(&mut self, ctx: &mut Context<'_>, link: &mut AgentLink, env: &Envelope) {
        match env.msg_type {
            MSG_EPOS_UP => {
                let Ok((run, t, contrib)) = decode_up(&env.body) else {
                    self.rejected += 1;
                    return;
                };
                match &mut self.run {
                    Some(st) if st.run == run => {
                        let newer = st.reports.get(&env.sender).is_none_or(|(old, _)| *old <= t);
                        if newer {
                            st.reports.insert(env.sender.clone(), (t, contrib));
                        }
                        self.try_up(ctx, link);
                    }
                    Some(st) if st.run > run => {}
                    _ => self.buffered.push(env.clone()),
                }
            }
            MSG_EPOS_DOWN => {
                let Ok(down) = decode_down(&env.body) else {
                    self.rejected += 1;
                    return;
                };
                let from_parent = self.tree.as_ref().and_then(|t| t.parent(ctx.address())) == Some(&env.sender);
                match &self.run {
                    Some(st) if st.run == down.run && from_parent => self.apply_down(ctx, link, down),
                    None if from_parent => self.buffered.push(env.clone()),
                    _ => {}
                }
            }
            MSG_EPOS_START | MSG_EPOS_CHANGE if self.run.is_some() => self.deferred.push(env.clone()),
            MSG_EPOS_START => {
                let fields = text_fields(&env.body);
                let run = fields.get("run").and_then(|v| v.parse().ok());
                let f = fields.get("iterations").and_then(|v| v.parse().ok()).unwrap_or(self.cfg.iterations);
                match run {
                    Some(run) if self.run.is_none() => self.start_run(ctx, link, run, f),
                    _ => self.rejected += 1,
                }
            }
            MSG_EPOS_CHANGE => self.on_change(ctx, link, &env.body),
            _ => {}
        }
    }

    fn on_timer(&mut self, ctx: &mut Context<'_>, link: &mut AgentLink, timer: TimerId) {
        let Some(st) = self.run.as_mut() else { return };
        if st.timer.map(|t| t.id) != Some(timer.id) {
            return;
        }
        st.timer = None;
        match self.cfg.mode {
            IterationMode::Lockstep => {
                self.abort(ctx);
                self.drain_deferred(ctx, link);
            }
            IterationMode::Async => {
                st.timed_out = true;
                self.try_up(ctx, link);
            }
        }
    }

    fn on_stop(&mut self, ctx: &mut Context<'_>, _link: &mut AgentLink) {
        if let Some(st) = self.run.take() {
            if let Some(timer) = st.timer {
                ctx.cancel_timer(timer);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn up_and_down_round_trip_bit_exact() {
        let c = Contribution { response: vec![0.1, 1.0 / 3.0, 7e300], moments: Moments { sum: 0.3, sumsq: 0.09, count: 3 } };
        let (run, t, back) = decode_up(&encode_up(4, 9, &c)).unwrap();
        assert_eq!((run, t), (4, 9));
        assert_eq!(back, c);
        let d = decode_down(&encode_down(&Down { run: 1, t: 2, accepted: false, last: true, global: c.clone() })).unwrap();
        assert!(!d.accepted && d.last);
        assert_eq!(d.global, c);
        assert!(decode_up(&[0, 1]).is_err());
    }

    #[test]
    fn config_round_trips_through_metadata() {
        let cfg = EposConfig {
            iterations: 7,
            cost: GlobalCostFunction::MinRmse(vec![1.0, 2.5]),
            tree_seed: 3,
            mode: IterationMode::Async,
            straggler_timeout_ms: Some(40),
            runs: 0,
            driver: Some(NetworkAddress::from_raw("sim:5")),
            normalize: true,
        };
        let md = cfg.to_metadata(ServiceMetadata::new(2));
        assert_eq!(EposConfig::from_metadata(&md).unwrap(), cfg);
        assert!(EposConfig::from_metadata(&ServiceMetadata::new(1).with_param("epos.mode", "fast")).is_err());
    }

    #[test]
    fn report_round_trip() {
        let r = RunReport {
            run: 2,
            records: vec![IterationRecord { t: 1, global_cost: 0.5, proposed_cost: 0.5, local_cost: 0.25, unfairness: 0.1, accepted: true }],
        };
        assert_eq!(RunReport::decode(&r.encode()).unwrap(), r);
    }

    #[test]
    fn plans_payload_round_trip() {
        let agent = EposAgent {
            plans: PlanSet::new(vec![Plan::new(vec![1.0, 2.0], 0.5).unwrap()]).unwrap(),
            prefs: AgentPreferences::new(0.25, 0.5).unwrap(),
        };
        assert_eq!(decode_plans(&encode_plans(&agent)).unwrap(), agent);
    }
}
