use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use super::{summarize, AggregateEstimate, AggregationState, DiasError, PeerView, PossibleStates, SelectedState, SessionMessage};
use crate::bootstrap::{AgentLink, Device, Service, ServiceMetadata};
use crate::messaging::{Envelope, NetworkAddress};
use crate::monitoring::LogKind;
use crate::runtime::{Context, TimerId};

/// Gossip push: view entries, one `address age` per line.
pub const MSG_DIAS_GOSSIP: u16 = 30;
pub const MSG_DIAS_GOSSIP_REPLY: u16 = 31;
/// Supplier to consumer: one aggregation session.
pub const MSG_DIAS_SESSION: u16 = 32;
/// Consumer to supplier: acknowledgment, carrying the consumer's own
/// session when the two have not met before.
pub const MSG_DIAS_ACK: u16 = 33;
/// Graceful departure of a supplier.
pub const MSG_DIAS_LEAVE: u16 = 34;
/// Consumer to supplier: current aggregate estimate.
pub const MSG_DIAS_ESTIMATE: u16 = 35;
/// Driver to agent: new raw reading or new possible states.
pub const MSG_DIAS_CHANGE: u16 = 36;
pub const MSG_DIAS_CHANGE_ACK: u16 = 37;
/// Agent to driver: first reading loaded.
pub const MSG_DIAS_JOINED: u16 = 38;
/// Driver to agent: request the current estimate, answered with
/// `MSG_DIAS_ESTIMATE`.
pub const MSG_DIAS_QUERY: u16 = 39;

#[derive(Debug, Clone, PartialEq)]
pub struct DiasConfig {
    pub view_size: usize,
    pub gossip_period_ms: u64,
    pub dissemination_period_ms: u64,
    pub bloom_m: usize,
    pub bloom_h: u32,
    pub k: usize,
    pub driver: Option<NetworkAddress>,
}

impl Default for DiasConfig {
    fn default() -> Self {
        DiasConfig {
            view_size: PeerView::DEFAULT_SIZE,
            gossip_period_ms: 100,
            dissemination_period_ms: 200,
            bloom_m: super::BloomFilter::DEFAULT_M,
            bloom_h: super::BloomFilter::DEFAULT_H,
            k: 9,
            driver: None,
        }
    }
}

impl DiasConfig {
    pub fn to_metadata(&self, md: ServiceMetadata) -> ServiceMetadata {
        let md = md
            .with_param("dias.view_size", self.view_size)
            .with_param("dias.gossip_period_ms", self.gossip_period_ms)
            .with_param("dias.dissemination_period_ms", self.dissemination_period_ms)
            .with_param("dias.bloom_m", self.bloom_m)
            .with_param("dias.bloom_h", self.bloom_h)
            .with_param("dias.k", self.k);
        match &self.driver {
            Some(d) => md.with_param("dias.driver", d),
            None => md,
        }
    }

    pub fn from_metadata(md: &ServiceMetadata) -> Result<DiasConfig, DiasError> {
        let d = DiasConfig::default();
        let num = |k: &str, default: u64| -> Result<u64, DiasError> {
            match md.param(k) {
                None => Ok(default),
                Some(v) => match v.parse::<u64>() {
                    Ok(n) if n > 0 => Ok(n),
                    _ => Err(DiasError::Malformed(format!("{k}={v}"))),
                },
            }
        };
        Ok(DiasConfig {
            view_size: num("dias.view_size", d.view_size as u64)? as usize,
            gossip_period_ms: num("dias.gossip_period_ms", d.gossip_period_ms)?,
            dissemination_period_ms: num("dias.dissemination_period_ms", d.dissemination_period_ms)?,
            bloom_m: num("dias.bloom_m", d.bloom_m as u64)? as usize,
            bloom_h: num("dias.bloom_h", u64::from(d.bloom_h))? as u32,
            k: num("dias.k", d.k as u64)? as usize,
            driver: md.param("dias.driver").map(NetworkAddress::from_raw),
        })
    }
}

fn fields(body: &[u8]) -> BTreeMap<String, String> {
    String::from_utf8_lossy(body)
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn encode_entries(entries: &[(NetworkAddress, u32)]) -> Vec<u8> {
    entries.iter().map(|(a, g)| format!("{a} {g}\n")).collect::<String>().into_bytes()
}

fn decode_entries(body: &[u8]) -> Vec<(NetworkAddress, u32)> {
    String::from_utf8_lossy(body)
        .lines()
        .filter_map(|l| {
            let (a, g) = l.rsplit_once(' ')?;
            Some((NetworkAddress::from_raw(a), g.parse().ok()?))
        })
        .collect()
}

/// Data source of a supplier: a raw reading and its possible states. The
/// service agent forwards driver changes as `set raw=..`/`set states=..`
/// sensing requests; every answer is `raw=..` and `states=..` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct DiasDevice {
    pub raw: f64,
    pub states: PossibleStates,
}

impl DiasDevice {
    pub fn new(raw: f64, states: PossibleStates) -> Self {
        DiasDevice { raw, states }
    }
}

impl Device for DiasDevice {
    fn sense(&mut self, _ctx: &mut Context<'_>, request: &[u8]) -> Vec<u8> {
        let f = fields(request.strip_prefix(b"set ").unwrap_or(request));
        if let Some(raw) = f.get("raw").and_then(|v| v.parse::<f64>().ok()).filter(|v| v.is_finite()) {
            self.raw = raw;
        }
        if let Some(states) = f.get("states").and_then(|v| PossibleStates::parse(v).ok()) {
            self.states = states;
        }
        format!("raw={}\nstates={}\n", self.raw, self.states.to_text()).into_bytes()
    }
}

/// Gossip-based aggregation hosted by a service agent. Every agent is both
/// supplier (of its device's summarized state) and consumer.
#[derive(Default)]
pub struct DiasService {
    cfg: DiasConfig,
    view: Option<PeerView>,
    consumer: Option<AggregationState>,
    states: Option<PossibleStates>,
    selected: Option<SelectedState>,
    prev: Option<(u64, f64)>,
    contacted: BTreeSet<NetworkAddress>,
    acked: BTreeMap<NetworkAddress, u64>,
    gossip_timer: Option<TimerId>,
    dissemination_timer: Option<TimerId>,
    pending_change: Option<NetworkAddress>,
    awaiting: Option<NetworkAddress>,
    joined: bool,
    pub received_estimate: Option<(NetworkAddress, f64, usize)>,
    pub sessions_sent: u64,
    pub sessions_received: u64,
    pub regressions: u64,
    pub rejected: u64,
}

impl DiasService {
    pub fn new() -> Self {
        DiasService::default()
    }

    pub fn config(&self) -> &DiasConfig {
        &self.cfg
    }

    pub fn view(&self) -> Option<&PeerView> {
        self.view.as_ref()
    }

    pub fn consumer(&self) -> Option<&AggregationState> {
        self.consumer.as_ref()
    }

    pub fn selected(&self) -> Option<SelectedState> {
        self.selected
    }

    pub fn estimate(&self, now_ms: u64) -> Option<AggregateEstimate> {
        self.consumer.as_ref().map(|c| c.estimate(now_ms))
    }

    fn session(&self, me: &NetworkAddress) -> Option<SessionMessage> {
        let s = self.selected?;
        Some(SessionMessage { supplier: me.to_string(), version: s.version, state_index: s.state_index, value: s.value, prev: self.prev })
    }

    fn push(&mut self, ctx: &mut Context<'_>, to: &NetworkAddress) {
        let Some(msg) = self.session(ctx.address()) else { return };
        if self.acked.get(to).is_some_and(|v| *v >= msg.version) {
            return;
        }
        if ctx.send(to, MSG_DIAS_SESSION, msg.encode()).is_ok() {
            self.sessions_sent += 1;
            self.contacted.insert(to.clone());
        }
    }

    fn push_all(&mut self, ctx: &mut Context<'_>) {
        let mut targets: BTreeSet<NetworkAddress> = self.contacted.clone();
        if let Some(v) = &self.view {
            targets.extend(v.addresses().cloned());
        }
        for t in targets {
            self.push(ctx, &t);
        }
    }

    fn apply_local(&mut self, ctx: &mut Context<'_>) {
        let Some(msg) = self.session(ctx.address()) else { return };
        if let Some(c) = self.consumer.as_mut() {
            let _ = c.apply(&msg);
        }
    }

    fn merge_view(&mut self, ctx: &mut Context<'_>, entries: Vec<(NetworkAddress, u32)>) {
        let me = ctx.address().clone();
        let fresh = match self.view.as_mut() {
            Some(v) => v.merge(&me, entries),
            None => return,
        };
        for a in fresh {
            self.push(ctx, &a);
        }
    }

    fn load_reading(&mut self, ctx: &mut Context<'_>, data: &[u8]) -> Result<bool, DiasError> {
        let f = fields(data);
        let raw: f64 = f.get("raw").and_then(|v| v.parse().ok()).ok_or_else(|| DiasError::Malformed("missing raw".into()))?;
        let states = PossibleStates::parse(f.get("states").map(String::as_str).unwrap_or(""))?;
        let index = summarize(raw, &states);
        let value = states.get(index);
        self.states = Some(states);
        let changed = self.selected.is_none_or(|s| s.value != value || s.state_index != index);
        if changed {
            let base = u64::from(ctx.incarnation()) << 32;
            let version = self.selected.map(|s| s.version + 1).unwrap_or(base + 1);
            self.prev = self.selected.map(|s| (s.version, s.value));
            self.selected = Some(SelectedState { state_index: index, value, version });
            ctx.log(LogKind::Event, "selected_state", value);
        }
        Ok(changed)
    }
}

impl Service for DiasService {
    fn validate(&self, serv_md: &ServiceMetadata) -> bool {
        DiasConfig::from_metadata(serv_md).is_ok()
    }

    fn on_ready(&mut self, _ctx: &mut Context<'_>, link: &mut AgentLink) {
        if let Some(cfg) = link.metadata().and_then(|md| DiasConfig::from_metadata(md).ok()) {
            self.cfg = cfg;
        }
    }

    fn on_run(&mut self, ctx: &mut Context<'_>, link: &mut AgentLink) {
        let me = ctx.address().clone();
        let mut contacts: Vec<NetworkAddress> = link.members().into_iter().filter(|a| *a != me).collect();
        contacts.shuffle(ctx.rng());
        contacts.truncate(self.cfg.view_size);
        self.view = Some(PeerView::seeded(self.cfg.view_size, &me, &contacts));
        self.consumer = Some(AggregationState::new(self.cfg.bloom_m, self.cfg.bloom_h));
        self.gossip_timer = ctx.schedule_timer(self.cfg.gossip_period_ms, true).ok();
        self.dissemination_timer = ctx.schedule_timer(self.cfg.dissemination_period_ms, true).ok();
        let _ = link.request_sensing(ctx, b"read");
    }

    fn on_sensing(&mut self, ctx: &mut Context<'_>, _link: &mut AgentLink, data: &[u8]) {
        match self.load_reading(ctx, data) {
            Ok(changed) => {
                if changed {
                    self.apply_local(ctx);
                    self.push_all(ctx);
                }
                if let Some(driver) = self.pending_change.take() {
                    let _ = ctx.send(&driver, MSG_DIAS_CHANGE_ACK, b"ok".to_vec());
                }
                if !self.joined {
                    self.joined = true;
                    if let Some(driver) = &self.cfg.driver {
                        let _ = ctx.send(driver, MSG_DIAS_JOINED, ctx.address().as_str().as_bytes().to_vec());
                    }
                }
            }
            Err(e) => {
                self.rejected += 1;
                ctx.log(LogKind::Event, "dias_bad_reading", e.to_string());
            }
        }
    }

    fn on_message(&mut self, ctx: &mut Context<'_>, link: &mut AgentLink, env: &Envelope) {
        if self.consumer.is_none() && env.msg_type != MSG_DIAS_CHANGE {
            return;
        }
        match env.msg_type {
            MSG_DIAS_GOSSIP => {
                if let Some(v) = &self.view {
                    let reply = v.outgoing(ctx.address(), Some(&env.sender));
                    let _ = ctx.send(&env.sender, MSG_DIAS_GOSSIP_REPLY, encode_entries(&reply));
                }
                self.merge_view(ctx, decode_entries(&env.body));
            }
            MSG_DIAS_GOSSIP_REPLY => {
                if self.awaiting.as_ref() == Some(&env.sender) {
                    self.awaiting = None;
                }
                self.merge_view(ctx, decode_entries(&env.body));
            }
            MSG_DIAS_SESSION | MSG_DIAS_ACK => {
                let body: &[u8] = if env.msg_type == MSG_DIAS_ACK {
                    let text = String::from_utf8_lossy(&env.body);
                    let (head, _) = text.split_once('\n').unwrap_or((&text, ""));
                    if let Ok(v) = head.parse::<u64>() {
                        self.acked.insert(env.sender.clone(), v);
                    }
                    let cut = env.body.iter().position(|b| *b == b'\n').map(|i| i + 1).unwrap_or(env.body.len());
                    &env.body[cut..]
                } else {
                    &env.body
                };
                if body.is_empty() {
                    return;
                }
                let msg = match SessionMessage::decode(body) {
                    Ok(m) => m,
                    Err(_) => {
                        self.rejected += 1;
                        return;
                    }
                };
                self.sessions_received += 1;
                let consumer = self.consumer.as_mut().expect("checked above");
                if let Err(e) = consumer.apply(&msg) {
                    self.regressions += 1;
                    ctx.log(LogKind::Event, "session_rejected", e.to_string());
                }
                if env.msg_type == MSG_DIAS_SESSION {
                    // First contact is reciprocal: the ack carries our own state.
                    let mut ack = format!("{}\n", msg.version).into_bytes();
                    if !self.contacted.contains(&env.sender) {
                        if let Some(own) = self.session(ctx.address()) {
                            ack.extend_from_slice(&own.encode());
                            self.contacted.insert(env.sender.clone());
                            self.acked.insert(env.sender.clone(), own.version);
                        }
                    }
                    let _ = ctx.send(&env.sender, MSG_DIAS_ACK, ack);
                }
            }
            MSG_DIAS_LEAVE => {
                let supplier = String::from_utf8_lossy(&env.body).to_string();
                let known = self.consumer.as_mut().expect("checked above").handle_leave(&supplier, true);
                if !known {
                    ctx.log(LogKind::Event, "leave_unknown", supplier.clone());
                }
                let addr = NetworkAddress::from_raw(supplier);
                if let Some(v) = self.view.as_mut() {
                    v.remove(&addr);
                }
                self.contacted.remove(&addr);
                self.acked.remove(&addr);
            }
            MSG_DIAS_ESTIMATE => {
                let f = fields(&env.body);
                if let (Some(sum), Some(count)) = (f.get("sum").and_then(|v| v.parse().ok()), f.get("count").and_then(|v| v.parse().ok())) {
                    self.received_estimate = Some((env.sender.clone(), sum, count));
                }
            }
            MSG_DIAS_QUERY => {
                if let Some(e) = self.estimate(ctx.now_ms()) {
                    let _ = ctx.send(&env.sender, MSG_DIAS_ESTIMATE, format!("sum={}\ncount={}\n", e.sum, e.count).into_bytes());
                }
            }
            MSG_DIAS_CHANGE => {
                let f = fields(&env.body);
                let mut req = String::from("set ");
                for key in ["raw", "states"] {
                    if let Some(v) = f.get(key) {
                        req.push_str(&format!("{key}={v}\n"));
                    }
                }
                if link.request_sensing(ctx, req.as_bytes()).is_ok() {
                    self.pending_change = Some(env.sender.clone());
                } else {
                    self.rejected += 1;
                }
            }
            _ => {}
        }
    }

    fn on_timer(&mut self, ctx: &mut Context<'_>, _link: &mut AgentLink, timer: TimerId) {
        if self.gossip_timer.map(|t| t.id) == Some(timer.id) {
            let Some(view) = self.view.as_mut() else { return };
            // A partner that never replied has left.
            if let Some(silent) = self.awaiting.take() {
                view.remove(&silent);
            }
            let Some(partner) = view.oldest().cloned() else { return };
            view.age_all();
            self.awaiting = Some(partner.clone());
            let out = view.outgoing(ctx.address(), Some(&partner));
            let _ = ctx.send(&partner, MSG_DIAS_GOSSIP, encode_entries(&out));
        } else if self.dissemination_timer.map(|t| t.id) == Some(timer.id) {
            let targets: Vec<NetworkAddress> = self.view.as_ref().map(|v| v.addresses().cloned().collect()).unwrap_or_default();
            let estimate = self.estimate(ctx.now_ms());
            for t in &targets {
                self.push(ctx, t);
                if let Some(e) = estimate {
                    let _ = ctx.send(t, MSG_DIAS_ESTIMATE, format!("sum={}\ncount={}\n", e.sum, e.count).into_bytes());
                }
            }
        }
    }

    fn on_stop(&mut self, ctx: &mut Context<'_>, _link: &mut AgentLink) {
        if self.selected.is_none() {
            return;
        }
        let mut targets: BTreeSet<NetworkAddress> = self.contacted.clone();
        if let Some(v) = &self.view {
            targets.extend(v.addresses().cloned());
        }
        let me = ctx.address().as_str().as_bytes().to_vec();
        for t in targets {
            let _ = ctx.send(&t, MSG_DIAS_LEAVE, me.clone());
        }
    }
}
