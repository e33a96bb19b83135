use super::protocol::*;
use super::BootstrapError;
use crate::messaging::{Envelope, NetworkAddress};
use crate::monitoring::{LogKind, MSG_LOG, MSG_LOG_REJECT};
use crate::runtime::{Context, Peerlet, TimerId};

/// Device behind an application agent.
pub trait Device: Send + 'static {
    /// Answers a sensing request from the service agent.
    fn sense(&mut self, ctx: &mut Context<'_>, request: &[u8]) -> Vec<u8>;

    /// Applies an actuation from the service agent.
    fn actuate(&mut self, _ctx: &mut Context<'_>, _actuation: &[u8]) {}
}

/// Device that answers every request with the same bytes.
#[derive(Debug, Clone, Default)]
pub struct StaticDevice(pub Vec<u8>);

impl Device for StaticDevice {
    fn sense(&mut self, _ctx: &mut Context<'_>, _request: &[u8]) -> Vec<u8> {
        self.0.clone()
    }
}

/// Device-side agent: registers with the gateway, answers sensing requests
/// of its service agent and applies actuations.
pub struct ApplicationAgent<D: Device> {
    gateway: Option<NetworkAddress>,
    serv_info: String,
    dev_info: DeviceInfo,
    device: D,
    assigned: Option<NetworkAddress>,
    done: bool,
    pub actuations: Vec<Vec<u8>>,
    pub rejected: u64,
}

impl<D: Device> ApplicationAgent<D> {
    /// `gateway` is the address known in advance; registration happens on
    /// the broadcast, or right at start after a restart.
    pub fn new(gateway: Option<NetworkAddress>, serv_info: impl Into<String>, dev_info: DeviceInfo, device: D) -> Self {
        ApplicationAgent {
            gateway,
            serv_info: serv_info.into(),
            dev_info,
            device,
            assigned: None,
            done: false,
            actuations: Vec::new(),
            rejected: 0,
        }
    }

    pub fn assigned(&self) -> Option<&NetworkAddress> {
        self.assigned.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn device(&self) -> &D {
        &self.device
    }

    pub fn device_mut(&mut self) -> &mut D {
        &mut self.device
    }

    fn register(&mut self, ctx: &mut Context<'_>) {
        let Some(gw) = self.gateway.clone() else { return };
        let msg = ProtocolMessage::RegDev(DeviceRegistration {
            dev_addr: ctx.address().clone(),
            dev_info: self.dev_info.clone(),
            serv_info: self.serv_info.clone(),
        });
        let _ = ctx.send(&gw, msg.msg_type(), msg.encode());
    }
}

impl<D: Device> Peerlet for ApplicationAgent<D> {
    fn start(&mut self, ctx: &mut Context<'_>) {
        if ctx.incarnation() > 0 {
            self.register(ctx);
        }
    }

    fn handle_message(&mut self, ctx: &mut Context<'_>, env: &Envelope) {
        if !(MSG_BROADCAST..=MSG_NOTICE).contains(&env.msg_type) {
            return;
        }
        let Ok(msg) = ProtocolMessage::decode(env.msg_type, &env.body) else {
            self.rejected += 1;
            return;
        };
        match msg {
            ProtocolMessage::Broadcast { gw_addr, serv_info } if serv_info == self.serv_info => {
                if self.assigned.is_none() {
                    self.gateway = Some(gw_addr);
                    self.register(ctx);
                }
            }
            ProtocolMessage::AsgnAgn { agn_addr } => {
                ctx.log(LogKind::Event, "assigned", agn_addr.as_str());
                self.assigned = Some(agn_addr);
            }
            ProtocolMessage::Sensing { serv_info, data } if self.assigned.as_ref() == Some(&env.sender) && serv_info == self.serv_info => {
                let reply = self.device.sense(ctx, data.as_bytes());
                let msg = ProtocolMessage::Sensing { serv_info, data: OpaqueBody::new(reply) };
                let _ = ctx.send(&env.sender, msg.msg_type(), msg.encode());
            }
            ProtocolMessage::Actuation { serv_info, actuation } if self.assigned.as_ref() == Some(&env.sender) && serv_info == self.serv_info => {
                self.device.actuate(ctx, actuation.as_bytes());
                self.actuations.push(actuation.into_bytes());
            }
            ProtocolMessage::Notice { event: NoticeEvent::Done, .. } => self.done = true,
            _ => self.rejected += 1,
        }
    }
}

/// What a service agent knows about its binding and the service run.
#[derive(Debug, Clone, Default)]
pub struct AgentLink {
    serv_info: String,
    gateway: Option<NetworkAddress>,
    app: Option<NetworkAddress>,
    metadata: Option<ServiceMetadata>,
    running: bool,
    completed: bool,
    pub duplicate_runs: u64,
}

impl AgentLink {
    pub fn serv_info(&self) -> &str {
        &self.serv_info
    }

    pub fn app(&self) -> Option<&NetworkAddress> {
        self.app.as_ref()
    }

    pub fn gateway(&self) -> Option<&NetworkAddress> {
        self.gateway.as_ref()
    }

    pub fn metadata(&self) -> Option<&ServiceMetadata> {
        self.metadata.as_ref()
    }

    pub fn is_running(&self) -> bool {
        self.running
    }

    /// Service agent addresses taking part, in the gateway's order.
    pub fn members(&self) -> Vec<NetworkAddress> {
        self.metadata
            .as_ref()
            .and_then(|m| m.param("agents"))
            .map(|s| s.split_whitespace().map(NetworkAddress::from_raw).collect())
            .unwrap_or_default()
    }

    fn bound_app(&self) -> Result<NetworkAddress, BootstrapError> {
        if !self.running {
            return Err(BootstrapError::NotRunning);
        }
        self.app.clone().ok_or(BootstrapError::NotRunning)
    }

    /// Asks the application agent for data; the answer arrives through
    /// [`Service::on_sensing`].
    pub fn request_sensing(&self, ctx: &mut Context<'_>, request: &[u8]) -> Result<(), BootstrapError> {
        let app = self.bound_app()?;
        let msg = ProtocolMessage::Sensing { serv_info: self.serv_info.clone(), data: OpaqueBody::new(request.to_vec()) };
        ctx.send(&app, msg.msg_type(), msg.encode()).map_err(|e| BootstrapError::Transport(e.to_string()))?;
        Ok(())
    }

    pub fn actuate(&self, ctx: &mut Context<'_>, actuation: &[u8]) -> Result<(), BootstrapError> {
        let app = self.bound_app()?;
        let msg = ProtocolMessage::Actuation { serv_info: self.serv_info.clone(), actuation: OpaqueBody::new(actuation.to_vec()) };
        ctx.send(&app, msg.msg_type(), msg.encode()).map_err(|e| BootstrapError::Transport(e.to_string()))?;
        Ok(())
    }

    /// Reports this agent's part of the service as finished (once).
    pub fn complete(&mut self, ctx: &mut Context<'_>) -> Result<(), BootstrapError> {
        if !self.running {
            return Err(BootstrapError::NotRunning);
        }
        if self.completed {
            return Ok(());
        }
        let gw = self.gateway.clone().ok_or(BootstrapError::NotRunning)?;
        let msg = ProtocolMessage::ServDone { agn_addr: ctx.address().clone(), serv_info: self.serv_info.clone() };
        ctx.send(&gw, msg.msg_type(), msg.encode()).map_err(|e| BootstrapError::Transport(e.to_string()))?;
        self.completed = true;
        Ok(())
    }
}

/// Decentralized service logic run by a [`ServiceAgent`].
pub trait Service: Send + 'static {
    /// Step vii validation of the request metadata.
    fn validate(&self, _serv_md: &ServiceMetadata) -> bool {
        true
    }

    fn on_ready(&mut self, _ctx: &mut Context<'_>, _link: &mut AgentLink) {}

    /// runServMsg received.
    fn on_run(&mut self, ctx: &mut Context<'_>, link: &mut AgentLink);

    fn on_sensing(&mut self, _ctx: &mut Context<'_>, _link: &mut AgentLink, _data: &[u8]) {}

    /// Any non-protocol, non-logging message.
    fn on_message(&mut self, _ctx: &mut Context<'_>, _link: &mut AgentLink, _env: &Envelope) {}

    fn on_timer(&mut self, _ctx: &mut Context<'_>, _link: &mut AgentLink, _timer: TimerId) {}

    fn on_stop(&mut self, _ctx: &mut Context<'_>, _link: &mut AgentLink) {}
}

/// Network-side counterpart of one application agent.
pub struct ServiceAgent<S: Service> {
    link: AgentLink,
    service: S,
    pub rejected: u64,
}

impl<S: Service> ServiceAgent<S> {
    pub fn new(serv_info: impl Into<String>, service: S) -> Self {
        ServiceAgent { link: AgentLink { serv_info: serv_info.into(), ..Default::default() }, service, rejected: 0 }
    }

    pub fn link(&self) -> &AgentLink {
        &self.link
    }

    pub fn service(&self) -> &S {
        &self.service
    }

    pub fn service_mut(&mut self) -> &mut S {
        &mut self.service
    }
}

impl<S: Service> Peerlet for ServiceAgent<S> {
    fn stop(&mut self, ctx: &mut Context<'_>) {
        self.service.on_stop(ctx, &mut self.link);
    }

    fn handle_message(&mut self, ctx: &mut Context<'_>, env: &Envelope) {
        if matches!(env.msg_type, MSG_LOG | MSG_LOG_REJECT) {
            return;
        }
        if !(MSG_BROADCAST..=MSG_NOTICE).contains(&env.msg_type) {
            // Peers that started earlier may already be talking; the service
            // decides whether to buffer.
            self.service.on_message(ctx, &mut self.link, env);
            return;
        }
        if !matches!(env.msg_type, MSG_READY | MSG_RUN_SERV | MSG_SENSING) {
            return;
        }
        let Ok(msg) = ProtocolMessage::decode(env.msg_type, &env.body) else {
            self.rejected += 1;
            return;
        };
        if msg.serv_info() != Some(self.link.serv_info.as_str()) {
            self.rejected += 1;
            ctx.log(LogKind::Event, "unknown_service", msg.serv_info().unwrap_or_default().to_string());
            return;
        }
        match msg {
            ProtocolMessage::Ready { serv_info, serv_md } => {
                if !self.service.validate(&serv_md) {
                    self.rejected += 1;
                    ctx.log(LogKind::Event, "ready_invalid", serv_info);
                    return;
                }
                self.link.app = serv_md.param("devAddr").map(NetworkAddress::from_raw);
                self.link.gateway = Some(env.sender.clone());
                self.link.metadata = Some(serv_md);
                self.service.on_ready(ctx, &mut self.link);
                let reply = ProtocolMessage::AgnReady { agn_addr: ctx.address().clone(), serv_info };
                let _ = ctx.send(&env.sender, reply.msg_type(), reply.encode());
            }
            ProtocolMessage::RunServ { .. } => {
                if self.link.running {
                    self.link.duplicate_runs += 1;
                    ctx.log(LogKind::Event, "duplicate_run", 1.0);
                    return;
                }
                if self.link.metadata.is_none() {
                    self.rejected += 1;
                    return;
                }
                self.link.running = true;
                self.service.on_run(ctx, &mut self.link);
            }
            ProtocolMessage::Sensing { data, .. } => {
                if !self.link.running || self.link.app.as_ref() != Some(&env.sender) {
                    self.rejected += 1;
                    return;
                }
                self.service.on_sensing(ctx, &mut self.link, data.as_bytes());
            }
            _ => {}
        }
    }

    fn handle_timer(&mut self, ctx: &mut Context<'_>, timer: TimerId) {
        self.service.on_timer(ctx, &mut self.link, timer);
    }

    fn memory_bytes(&self) -> usize {
        std::mem::size_of::<S>()
    }
}

/// Service operator: submits the service request and collects notices.
pub struct Operator {
    gateway: NetworkAddress,
    request: ServiceRequest,
    delay_ms: u64,
    pub notices: Vec<(u64, NoticeEvent, String)>,
}

impl Operator {
    pub fn new(gateway: NetworkAddress, request: ServiceRequest, delay_ms: u64) -> Self {
        Operator { gateway, request, delay_ms, notices: Vec::new() }
    }

    pub fn submit(&self, ctx: &mut Context<'_>) {
        let msg = ProtocolMessage::ServReq(self.request.clone());
        let _ = ctx.send(&self.gateway, msg.msg_type(), msg.encode());
    }
}

impl Peerlet for Operator {
    fn start(&mut self, ctx: &mut Context<'_>) {
        let _ = ctx.schedule_timer(self.delay_ms, false);
    }

    fn handle_timer(&mut self, ctx: &mut Context<'_>, _timer: TimerId) {
        self.submit(ctx);
    }

    fn handle_message(&mut self, ctx: &mut Context<'_>, env: &Envelope) {
        if env.msg_type != MSG_NOTICE {
            return;
        }
        if let Ok(ProtocolMessage::Notice { event, reason, .. }) = ProtocolMessage::decode(env.msg_type, &env.body) {
            let name = if event == NoticeEvent::Done { "service_done" } else { "service_aborted" };
            ctx.signal(name, reason.clone());
            self.notices.push((ctx.now_ms(), event, reason));
        }
    }
}
