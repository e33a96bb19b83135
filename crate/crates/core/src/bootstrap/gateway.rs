use std::collections::{BTreeMap, BTreeSet};

use super::protocol::*;
use super::BootstrapError;
use crate::messaging::{Envelope, NetworkAddress};
use crate::monitoring::LogKind;
use crate::runtime::{Context, ExecutionMode, Peerlet, TimerId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GatewayPhase {
    Idle,
    Announced,
    Assigning,
    Preparing,
    Running,
    Done,
}

impl GatewayPhase {
    pub fn as_str(&self) -> &'static str {
        match self {
            GatewayPhase::Idle => "IDLE",
            GatewayPhase::Announced => "ANNOUNCED",
            GatewayPhase::Assigning => "ASSIGNING",
            GatewayPhase::Preparing => "PREPARING",
            GatewayPhase::Running => "RUNNING",
            GatewayPhase::Done => "DONE",
        }
    }
}

/// A service agent the gateway may hand out. Devices whose location equals
/// the slot's location are bound to it in preference to arrival order, which
/// keeps the device/agent pairing independent of message timing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentSlot {
    pub addr: NetworkAddress,
    pub location: Option<String>,
}

impl AgentSlot {
    pub fn new(addr: NetworkAddress) -> Self {
        AgentSlot { addr, location: None }
    }

    pub fn at(addr: NetworkAddress, location: impl Into<String>) -> Self {
        AgentSlot { addr, location: Some(location.into()) }
    }
}

pub type Outbound = (NetworkAddress, ProtocolMessage);

/// Gateway bookkeeping, free of any transport concerns.
#[derive(Debug, Clone)]
pub struct GatewayState {
    gw_addr: NetworkAddress,
    serv_info: String,
    pool: Vec<AgentSlot>,
    registrations: BTreeMap<NetworkAddress, NetworkAddress>,
    assigned: BTreeMap<NetworkAddress, NetworkAddress>,
    dev_info: BTreeMap<NetworkAddress, DeviceInfo>,
    pending_service: Option<ServiceRequest>,
    ready_agents: BTreeSet<NetworkAddress>,
    participants: Vec<NetworkAddress>,
    done_agents: BTreeSet<NetworkAddress>,
    phase: GatewayPhase,
}

impl GatewayState {
    pub fn new(gw_addr: NetworkAddress, serv_info: impl Into<String>, pool: Vec<AgentSlot>) -> Self {
        GatewayState {
            gw_addr,
            serv_info: serv_info.into(),
            pool,
            registrations: BTreeMap::new(),
            assigned: BTreeMap::new(),
            dev_info: BTreeMap::new(),
            pending_service: None,
            ready_agents: BTreeSet::new(),
            participants: Vec::new(),
            done_agents: BTreeSet::new(),
            phase: GatewayPhase::Idle,
        }
    }

    pub fn phase(&self) -> GatewayPhase {
        self.phase
    }

    pub fn serv_info(&self) -> &str {
        &self.serv_info
    }

    pub fn registrations(&self) -> &BTreeMap<NetworkAddress, NetworkAddress> {
        &self.registrations
    }

    pub fn pending_service(&self) -> Option<&ServiceRequest> {
        self.pending_service.as_ref()
    }

    pub fn ready_agents(&self) -> &BTreeSet<NetworkAddress> {
        &self.ready_agents
    }

    pub fn participants(&self) -> &[NetworkAddress] {
        &self.participants
    }

    /// Device bound to a service agent, if any.
    pub fn device_of(&self, agn: &NetworkAddress) -> Option<&NetworkAddress> {
        self.assigned.get(agn)
    }

    /// Registration map is injective in both directions.
    pub fn is_injective(&self) -> bool {
        self.registrations.len() == self.assigned.len()
            && self.registrations.iter().all(|(d, a)| self.assigned.get(a) == Some(d))
    }

    /// Step ii: one broadcastMsg per application agent.
    pub fn announce(&mut self, app_agents: &[NetworkAddress]) -> Result<Vec<Outbound>, BootstrapError> {
        self.expect(&[GatewayPhase::Idle])?;
        self.phase = GatewayPhase::Announced;
        Ok(app_agents
            .iter()
            .map(|a| (a.clone(), ProtocolMessage::Broadcast { gw_addr: self.gw_addr.clone(), serv_info: self.serv_info.clone() }))
            .collect())
    }

    /// Steps iii and iv. Also accepted while preparing or running so that
    /// returning devices can be re-admitted.
    pub fn register_device(&mut self, reg: &DeviceRegistration) -> Result<ProtocolMessage, BootstrapError> {
        self.expect(&[GatewayPhase::Announced, GatewayPhase::Assigning, GatewayPhase::Preparing, GatewayPhase::Running])?;
        if reg.serv_info != self.serv_info {
            return Err(BootstrapError::UnknownService(reg.serv_info.clone()));
        }
        if let Some(agn) = self.registrations.get(&reg.dev_addr) {
            return Ok(ProtocolMessage::AsgnAgn { agn_addr: agn.clone() });
        }
        let free = |s: &&AgentSlot| !self.assigned.contains_key(&s.addr);
        let slot = self
            .pool
            .iter()
            .filter(free)
            .find(|s| s.location.as_deref() == Some(reg.dev_info.location.as_str()))
            .or_else(|| self.pool.iter().filter(free).find(|s| s.location.is_none()))
            .or_else(|| self.pool.iter().find(|s| !self.assigned.contains_key(&s.addr)))
            .ok_or(BootstrapError::Capacity)?
            .addr
            .clone();
        self.registrations.insert(reg.dev_addr.clone(), slot.clone());
        self.assigned.insert(slot.clone(), reg.dev_addr.clone());
        self.dev_info.insert(reg.dev_addr.clone(), reg.dev_info.clone());
        if self.phase == GatewayPhase::Announced {
            self.phase = GatewayPhase::Assigning;
        }
        Ok(ProtocolMessage::AsgnAgn { agn_addr: slot })
    }

    /// Step vi: readyMsg to every assigned agent (in pool order).
    pub fn request_service(&mut self, req: &ServiceRequest) -> Result<Vec<Outbound>, BootstrapError> {
        self.expect(&[GatewayPhase::Assigning])?;
        if req.serv_info != self.serv_info {
            return Err(BootstrapError::UnknownService(req.serv_info.clone()));
        }
        if req.serv_md.agent_count == 0 {
            return Err(BootstrapError::Invalid("agent_count must be at least 1".into()));
        }
        if self.assigned.len() < req.serv_md.agent_count {
            return Err(BootstrapError::NotEnoughAgents { needed: req.serv_md.agent_count, assigned: self.assigned.len() });
        }
        self.participants = self.pool.iter().filter(|s| self.assigned.contains_key(&s.addr)).map(|s| s.addr.clone()).collect();
        self.pending_service = Some(req.clone());
        self.ready_agents.clear();
        self.phase = GatewayPhase::Preparing;
        Ok(self.participants.iter().map(|a| (a.clone(), self.ready_for(a))).collect())
    }

    fn ready_for(&self, agn: &NetworkAddress) -> ProtocolMessage {
        let req = self.pending_service.as_ref().expect("ready only built with a pending request");
        let mut md = req.serv_md.clone();
        if let Some(dev) = self.assigned.get(agn) {
            md.params.insert("devAddr".into(), dev.as_str().to_string());
            if let Some(info) = self.dev_info.get(dev) {
                md.params.insert("location".into(), info.location.clone());
            }
        }
        let agents: Vec<&str> = self.participants.iter().map(|a| a.as_str()).collect();
        md.params.insert("agents".into(), agents.join(" "));
        ProtocolMessage::Ready { serv_info: req.serv_info.clone(), serv_md: md }
    }

    /// readyMsg for an agent joining an already running service.
    pub fn admit(&mut self, agn: &NetworkAddress) -> Option<Outbound> {
        if self.phase != GatewayPhase::Running || !self.assigned.contains_key(agn) {
            return None;
        }
        if !self.participants.contains(agn) {
            self.participants.push(agn.clone());
        }
        self.ready_agents.remove(agn);
        Some((agn.clone(), self.ready_for(agn)))
    }

    /// Steps vii and viii. Returns the runServMsg emissions triggered.
    pub fn agent_ready(&mut self, agn: &NetworkAddress, serv_info: &str) -> Result<Vec<Outbound>, BootstrapError> {
        if serv_info != self.serv_info {
            return Err(BootstrapError::UnknownService(serv_info.to_string()));
        }
        if !self.participants.contains(agn) {
            return Err(BootstrapError::UnknownAgent(agn.to_string()));
        }
        let run = ProtocolMessage::RunServ { serv_info: self.serv_info.clone() };
        match self.phase {
            GatewayPhase::Preparing => {
                self.ready_agents.insert(agn.clone());
                if self.participants.iter().all(|a| self.ready_agents.contains(a)) {
                    self.phase = GatewayPhase::Running;
                    return Ok(self.participants.iter().map(|a| (a.clone(), run.clone())).collect());
                }
                Ok(Vec::new())
            }
            GatewayPhase::Running => {
                if self.ready_agents.insert(agn.clone()) {
                    Ok(vec![(agn.clone(), run)])
                } else {
                    Ok(Vec::new())
                }
            }
            _ => Err(BootstrapError::WrongPhase(self.phase.as_str())),
        }
    }

    /// Readiness deadline passed. Aborts the round if it is still open and
    /// returns the agents that never answered.
    pub fn readiness_timeout(&mut self) -> Option<Vec<NetworkAddress>> {
        if self.phase != GatewayPhase::Preparing {
            return None;
        }
        let missing = self.participants.iter().filter(|a| !self.ready_agents.contains(*a)).cloned().collect();
        self.phase = GatewayPhase::Assigning;
        self.pending_service = None;
        self.ready_agents.clear();
        self.participants.clear();
        Some(missing)
    }

    /// Step x. Returns true once every participant has finished.
    pub fn service_done(&mut self, agn: &NetworkAddress, serv_info: &str) -> Result<bool, BootstrapError> {
        if serv_info != self.serv_info {
            return Err(BootstrapError::UnknownService(serv_info.to_string()));
        }
        if self.phase != GatewayPhase::Running {
            return Err(BootstrapError::WrongPhase(self.phase.as_str()));
        }
        self.done_agents.insert(agn.clone());
        if self.participants.iter().all(|a| self.done_agents.contains(a)) {
            self.phase = GatewayPhase::Done;
            return Ok(true);
        }
        Ok(false)
    }

    fn expect(&self, allowed: &[GatewayPhase]) -> Result<(), BootstrapError> {
        if allowed.contains(&self.phase) {
            Ok(())
        } else {
            Err(BootstrapError::WrongPhase(self.phase.as_str()))
        }
    }
}

/// Gateway peer logic. Only protocol control messages are decoded; sensing
/// and actuation traffic is never inspected.
pub struct GatewayPeerlet {
    state: GatewayState,
    app_agents: Vec<NetworkAddress>,
    readiness_timeout_ms: Option<u64>,
    readiness_timer: Option<TimerId>,
    waiting_request: Option<ServiceRequest>,
    operator: Option<NetworkAddress>,
    pub ignored: u64,
    pub injectivity_violations: u64,
    pub aborts: u64,
}

impl GatewayPeerlet {
    pub fn new(state: GatewayState, app_agents: Vec<NetworkAddress>) -> Self {
        GatewayPeerlet {
            state,
            app_agents,
            readiness_timeout_ms: None,
            readiness_timer: None,
            waiting_request: None,
            operator: None,
            ignored: 0,
            injectivity_violations: 0,
            aborts: 0,
        }
    }

    /// Overrides the default readiness timeout (1000 virtual ms in SIM,
    /// 10 s in LIVE).
    pub fn with_readiness_timeout(mut self, ms: u64) -> Self {
        self.readiness_timeout_ms = Some(ms);
        self
    }

    pub fn state(&self) -> &GatewayState {
        &self.state
    }

    fn emit(ctx: &mut Context<'_>, out: Vec<Outbound>) {
        for (to, msg) in out {
            let _ = ctx.send(&to, msg.msg_type(), msg.encode());
        }
    }

    fn note_phase(&mut self, ctx: &mut Context<'_>, before: GatewayPhase) {
        if self.state.phase() != before {
            ctx.log(LogKind::Event, "gateway_phase", self.state.phase().as_str());
            ctx.signal("gateway_phase", self.state.phase().as_str());
        }
        if !self.state.is_injective() {
            self.injectivity_violations += 1;
        }
    }

    fn try_request(&mut self, ctx: &mut Context<'_>, req: ServiceRequest) {
        match self.state.request_service(&req) {
            Ok(out) => {
                self.waiting_request = None;
                Self::emit(ctx, out);
                let timeout = self.readiness_timeout_ms.unwrap_or(match ctx.mode() {
                    ExecutionMode::Sim => 1_000,
                    ExecutionMode::Live => 10_000,
                });
                self.readiness_timer = ctx.schedule_timer(timeout, false).ok();
            }
            Err(BootstrapError::NotEnoughAgents { .. }) | Err(BootstrapError::WrongPhase(_)) => {
                self.waiting_request = Some(req);
            }
            Err(e) => {
                self.ignored += 1;
                ctx.log(LogKind::Event, "gateway_rejected", e.to_string());
            }
        }
    }

    fn notify_operator(&mut self, ctx: &mut Context<'_>, event: NoticeEvent, reason: &str) {
        let notice = ProtocolMessage::Notice { event, serv_info: self.state.serv_info().to_string(), reason: reason.to_string() };
        if let Some(op) = self.operator.clone() {
            let _ = ctx.send(&op, notice.msg_type(), notice.encode());
        }
    }
}

impl Peerlet for GatewayPeerlet {
    fn start(&mut self, ctx: &mut Context<'_>) {
        let before = self.state.phase();
        if let Ok(out) = self.state.announce(&self.app_agents) {
            Self::emit(ctx, out);
        }
        self.note_phase(ctx, before);
    }

    fn handle_message(&mut self, ctx: &mut Context<'_>, env: &Envelope) {
        if !matches!(env.msg_type, MSG_REG_DEV | MSG_SERV_REQ | MSG_AGN_READY | MSG_SERV_DONE) {
            return;
        }
        let msg = match ProtocolMessage::decode(env.msg_type, &env.body) {
            Ok(m) => m,
            Err(e) => {
                self.ignored += 1;
                ctx.log(LogKind::Event, "gateway_malformed", e.to_string());
                return;
            }
        };
        let before = self.state.phase();
        match msg {
            ProtocolMessage::RegDev(reg) => match self.state.register_device(&reg) {
                Ok(reply) => {
                    let agn = match &reply {
                        ProtocolMessage::AsgnAgn { agn_addr } => agn_addr.clone(),
                        _ => unreachable!(),
                    };
                    Self::emit(ctx, vec![(reg.dev_addr.clone(), reply)]);
                    if let Some(out) = self.state.admit(&agn) {
                        Self::emit(ctx, vec![out]);
                    }
                    if let Some(req) = self.waiting_request.take() {
                        self.try_request(ctx, req);
                    }
                }
                Err(e) => {
                    self.ignored += 1;
                    ctx.log(LogKind::Event, "gateway_rejected", e.to_string());
                }
            },
            ProtocolMessage::ServReq(req) => {
                self.operator = Some(env.sender.clone());
                self.try_request(ctx, req);
            }
            ProtocolMessage::AgnReady { agn_addr, serv_info } => match self.state.agent_ready(&agn_addr, &serv_info) {
                Ok(out) => {
                    if self.state.phase() == GatewayPhase::Running {
                        if let Some(t) = self.readiness_timer.take() {
                            ctx.cancel_timer(t);
                        }
                    }
                    Self::emit(ctx, out);
                }
                Err(e) => {
                    self.ignored += 1;
                    ctx.log(LogKind::Event, "gateway_ignored", e.to_string());
                }
            },
            ProtocolMessage::ServDone { agn_addr, serv_info } => match self.state.service_done(&agn_addr, &serv_info) {
                Ok(true) => {
                    self.notify_operator(ctx, NoticeEvent::Done, "all agents finished");
                    let done = ProtocolMessage::Notice {
                        event: NoticeEvent::Done,
                        serv_info: serv_info.clone(),
                        reason: "service executed".into(),
                    };
                    let devices: Vec<NetworkAddress> = self.state.registrations().keys().cloned().collect();
                    Self::emit(ctx, devices.into_iter().map(|d| (d, done.clone())).collect());
                }
                Ok(false) => {}
                Err(e) => {
                    self.ignored += 1;
                    ctx.log(LogKind::Event, "gateway_ignored", e.to_string());
                }
            },
            _ => {}
        }
        self.note_phase(ctx, before);
    }

    fn handle_timer(&mut self, ctx: &mut Context<'_>, timer: TimerId) {
        if self.readiness_timer.map(|t| t.id) != Some(timer.id) {
            return;
        }
        self.readiness_timer = None;
        let before = self.state.phase();
        if let Some(missing) = self.state.readiness_timeout() {
            self.aborts += 1;
            let names: Vec<&str> = missing.iter().map(|a| a.as_str()).collect();
            let reason = format!("readiness timeout: {}", names.join(" "));
            ctx.log(LogKind::Event, "service_aborted", reason.clone());
            self.notify_operator(ctx, NoticeEvent::Aborted, &reason);
        }
        self.note_phase(ctx, before);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(s: &str) -> NetworkAddress {
        NetworkAddress::from_raw(s)
    }

    fn reg(dev: &str, loc: &str) -> DeviceRegistration {
        DeviceRegistration {
            dev_addr: addr(dev),
            dev_info: DeviceInfo { device_type: "ev".into(), location: loc.into() },
            serv_info: "epos".into(),
        }
    }

    fn state(n: usize) -> GatewayState {
        let pool = (0..n).map(|i| AgentSlot::new(addr(&format!("agent-{i}")))).collect();
        GatewayState::new(addr("gw"), "epos", pool)
    }

    fn req(n: usize) -> ServiceRequest {
        ServiceRequest { serv_info: "epos".into(), serv_md: ServiceMetadata::new(n) }
    }

    #[test]
    fn announce_fans_out_once() {
        let mut s = state(2);
        let out = s.announce(&[addr("a"), addr("b"), addr("c")]).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|(_, m)| m.msg_type() == MSG_BROADCAST));
        assert_eq!(s.phase(), GatewayPhase::Announced);
        assert!(matches!(s.announce(&[]), Err(BootstrapError::WrongPhase(_))));

        let mut empty = state(1);
        assert!(empty.announce(&[]).unwrap().is_empty());
        assert_eq!(empty.phase(), GatewayPhase::Announced);
    }

    #[test]
    fn registration_is_one_to_one_and_idempotent() {
        let mut s = state(2);
        s.announce(&[]).unwrap();
        let a = s.register_device(&reg("d1", "x")).unwrap();
        let b = s.register_device(&reg("d2", "y")).unwrap();
        assert_ne!(a, b);
        assert_eq!(s.register_device(&reg("d1", "x")).unwrap(), a);
        assert_eq!(s.register_device(&reg("d3", "z")), Err(BootstrapError::Capacity));
        assert!(s.is_injective());
        assert_eq!(s.phase(), GatewayPhase::Assigning);
    }

    #[test]
    fn location_match_beats_arrival_order() {
        let pool = vec![AgentSlot::at(addr("a0"), "l0"), AgentSlot::at(addr("a1"), "l1")];
        let mut s = GatewayState::new(addr("gw"), "epos", pool);
        s.announce(&[]).unwrap();
        assert_eq!(s.register_device(&reg("d1", "l1")).unwrap(), ProtocolMessage::AsgnAgn { agn_addr: addr("a1") });
        assert_eq!(s.register_device(&reg("d0", "l0")).unwrap(), ProtocolMessage::AsgnAgn { agn_addr: addr("a0") });
    }

    #[test]
    fn run_only_after_all_ready() {
        let mut s = state(5);
        s.announce(&[]).unwrap();
        for i in 0..5 {
            s.register_device(&reg(&format!("d{i}"), "")).unwrap();
        }
        let ready = s.request_service(&req(5)).unwrap();
        assert_eq!(ready.len(), 5);
        assert_eq!(s.phase(), GatewayPhase::Preparing);
        let mut runs = Vec::new();
        for (agn, _) in &ready {
            runs.extend(s.agent_ready(agn, "epos").unwrap());
        }
        assert_eq!(runs.len(), 5);
        let targets: BTreeSet<_> = runs.iter().map(|(a, _)| a.clone()).collect();
        assert_eq!(targets.len(), 5);
        assert_eq!(s.phase(), GatewayPhase::Running);
        assert!(s.agent_ready(&ready[0].0, "epos").unwrap().is_empty());
    }

    #[test]
    fn ready_carries_binding_and_membership() {
        let mut s = state(2);
        s.announce(&[]).unwrap();
        s.register_device(&reg("d0", "here")).unwrap();
        s.register_device(&reg("d1", "there")).unwrap();
        let ready = s.request_service(&req(2)).unwrap();
        match &ready[1].1 {
            ProtocolMessage::Ready { serv_md, .. } => {
                assert_eq!(serv_md.param("devAddr"), Some("d1"));
                assert_eq!(serv_md.param("location"), Some("there"));
                assert_eq!(serv_md.param("agents"), Some("agent-0 agent-1"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn silent_agent_aborts_round() {
        let mut s = state(5);
        s.announce(&[]).unwrap();
        for i in 0..5 {
            s.register_device(&reg(&format!("d{i}"), "")).unwrap();
        }
        let ready = s.request_service(&req(5)).unwrap();
        for (agn, _) in &ready[..4] {
            assert!(s.agent_ready(agn, "epos").unwrap().is_empty());
        }
        let missing = s.readiness_timeout().unwrap();
        assert_eq!(missing, vec![ready[4].0.clone()]);
        assert_eq!(s.phase(), GatewayPhase::Assigning);
        assert!(s.pending_service().is_none());
    }

    #[test]
    fn unknown_service_and_early_request_rejected() {
        let mut s = state(2);
        s.announce(&[]).unwrap();
        s.register_device(&reg("d0", "")).unwrap();
        assert!(matches!(s.request_service(&req(2)), Err(BootstrapError::NotEnoughAgents { .. })));
        s.register_device(&reg("d1", "")).unwrap();
        let ready = s.request_service(&req(2)).unwrap();
        assert!(matches!(s.agent_ready(&ready[0].0, "dias"), Err(BootstrapError::UnknownService(_))));
        assert!(s.ready_agents().is_empty());
    }

    #[test]
    fn done_after_every_participant_finishes() {
        let mut s = state(2);
        s.announce(&[]).unwrap();
        s.register_device(&reg("d0", "")).unwrap();
        s.register_device(&reg("d1", "")).unwrap();
        let ready = s.request_service(&req(2)).unwrap();
        for (a, _) in &ready {
            s.agent_ready(a, "epos").unwrap();
        }
        assert!(!s.service_done(&ready[0].0, "epos").unwrap());
        assert!(s.service_done(&ready[1].0, "epos").unwrap());
        assert_eq!(s.phase(), GatewayPhase::Done);
    }
}
