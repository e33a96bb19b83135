use crate::bootstrap::{
    AgentPair, AgentSlot, ApplicationAgent, DeviceInfo, GatewayPeerlet, GatewayState, Operator, ServiceAgent, ServiceMetadata, ServiceRequest,
};
use crate::dias::{DiasConfig, DiasDevice, DiasService, PossibleStates};
use crate::dynamics::{AgentHandle, DiasDriver, DiasDriverConfig, EposDriver, EposDriverConfig};
use crate::epos::{AgentPreferences, EposConfig, EposDevice, EposService, PlanSet};
use crate::messaging::NetworkAddress;
use crate::monitoring::MonitoringPeerlet;
use crate::runtime::{ExecutionMode, LiveNetwork, Peer, PeerId, Peerlet, RuntimeError, Simulation};

/// Either execution backend, so deployments are written once.
pub enum Net {
    Sim(Simulation),
    Live(LiveNetwork),
}

impl Net {
    pub fn mode(&self) -> ExecutionMode {
        match self {
            Net::Sim(_) => ExecutionMode::Sim,
            Net::Live(_) => ExecutionMode::Live,
        }
    }

    /// The address peer `id` will listen on.
    pub fn address(&mut self, id: PeerId) -> Result<NetworkAddress, RuntimeError> {
        match self {
            Net::Sim(_) => Ok(NetworkAddress::sim(id)),
            Net::Live(l) => l.reserve_address(),
        }
    }

    pub fn add(&mut self, peer: Peer) -> Result<(), RuntimeError> {
        match self {
            Net::Sim(s) => s.add_peer(peer),
            Net::Live(l) => l.add_peer(peer),
        }
    }

    pub fn sim(&self) -> Option<&Simulation> {
        match self {
            Net::Sim(s) => Some(s),
            Net::Live(_) => None,
        }
    }
}

/// Peer id ranges of one deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdBlock {
    pub gateway: u64,
    pub operator: u64,
    pub driver: u64,
    pub app: u64,
    pub agent: u64,
}

pub const EPOS_IDS: IdBlock = IdBlock { gateway: 0, operator: 1, driver: 2, app: 100, agent: 1000 };
pub const DIAS_IDS: IdBlock = IdBlock { gateway: 10, operator: 11, driver: 12, app: 2100, agent: 3000 };
pub const LOG_GATEWAY_ID: PeerId = PeerId(5);

/// Where service agents and drivers ship their logs.
#[derive(Debug, Clone)]
pub struct Monitor {
    pub gateway: NetworkAddress,
    pub token: String,
}

impl Monitor {
    fn peerlet(&self) -> Box<dyn Peerlet> {
        Box::new(MonitoringPeerlet::new(self.gateway.clone(), self.token.clone()).with_flush_period(500))
    }
}

/// Ids and addresses of a deployed service.
#[derive(Debug, Clone)]
pub struct Deployed {
    pub gateway: PeerId,
    pub operator: PeerId,
    pub driver: Option<PeerId>,
    pub agents: Vec<AgentHandle>,
    pub app_addrs: Vec<NetworkAddress>,
}

impl Deployed {
    /// Application and service agent of every slot, for trace checks.
    pub fn pairs(&self) -> Vec<AgentPair> {
        self.agents
            .iter()
            .zip(&self.app_addrs)
            .map(|(h, a)| AgentPair { app: h.app, app_addr: a.to_string(), agent: h.agent, agent_addr: h.addr.to_string() })
            .collect()
    }
}

struct Layout {
    gw: NetworkAddress,
    driver: Option<NetworkAddress>,
    agents: Vec<AgentHandle>,
    apps: Vec<NetworkAddress>,
}

fn layout(net: &mut Net, ids: IdBlock, n: usize, with_driver: bool) -> Result<Layout, RuntimeError> {
    let gw = net.address(PeerId(ids.gateway))?;
    let driver = if with_driver { Some(net.address(PeerId(ids.driver))?) } else { None };
    let mut agents = Vec::with_capacity(n);
    let mut apps = Vec::with_capacity(n);
    for i in 0..n as u64 {
        apps.push(net.address(PeerId(ids.app + i))?);
        let agent = PeerId(ids.agent + i);
        agents.push(AgentHandle { app: PeerId(ids.app + i), agent, addr: net.address(agent)? });
    }
    Ok(Layout { gw, driver, agents, apps })
}

fn add_infrastructure(net: &mut Net, ids: IdBlock, lay: &Layout, serv: &str, md: ServiceMetadata) -> Result<(), RuntimeError> {
    let mode = net.mode();
    let pool = lay.agents.iter().enumerate().map(|(i, a)| AgentSlot::at(a.addr.clone(), format!("loc-{i}"))).collect();
    let state = GatewayState::new(lay.gw.clone(), serv, pool);
    let gw = GatewayPeerlet::new(state, lay.apps.clone());
    net.add(Peer::new(PeerId(ids.gateway), mode, lay.gw.clone(), vec![Box::new(gw)])?)?;
    let op_addr = net.address(PeerId(ids.operator))?;
    let req = ServiceRequest { serv_info: serv.to_string(), serv_md: md };
    net.add(Peer::new(PeerId(ids.operator), mode, op_addr, vec![Box::new(Operator::new(lay.gw.clone(), req, 50))])?)
}

fn service_peerlets(svc: Box<dyn Peerlet>, monitor: &Option<Monitor>) -> Vec<Box<dyn Peerlet>> {
    let mut v = vec![svc];
    if let Some(m) = monitor {
        v.push(m.peerlet());
    }
    v
}

/// Collective learning over the given plan sets: gateway, operator, one
/// application agent and one service agent per plan set, and the driver
/// when given (its agent list is filled in here).
pub fn deploy_epos(
    net: &mut Net,
    ids: IdBlock,
    plans: &[PlanSet],
    prefs: &[AgentPreferences],
    mut cfg: EposConfig,
    driver: Option<EposDriverConfig>,
    monitor: Option<Monitor>,
) -> Result<Deployed, RuntimeError> {
    let mode = net.mode();
    let n = plans.len();
    let lay = layout(net, ids, n, driver.is_some())?;
    cfg.driver = lay.driver.clone();
    add_infrastructure(net, ids, &lay, "epos", cfg.to_metadata(ServiceMetadata::new(n)))?;
    for (i, h) in lay.agents.iter().enumerate() {
        let (gw, set, pref) = (lay.gw.clone(), plans[i].clone(), prefs[i]);
        let app = move || -> Vec<Box<dyn Peerlet>> {
            let info = DeviceInfo { device_type: "ev".into(), location: format!("loc-{i}") };
            vec![Box::new(ApplicationAgent::new(Some(gw.clone()), "epos", info, EposDevice::new(set.clone(), pref)))]
        };
        net.add(Peer::with_factory(h.app, mode, lay.apps[i].clone(), Box::new(app))?)?;
        let mon = monitor.clone();
        let agent = move || service_peerlets(Box::new(ServiceAgent::new("epos", EposService::new())), &mon);
        net.add(Peer::with_factory(h.agent, mode, h.addr.clone(), Box::new(agent))?)?;
    }
    let driver_id = match driver {
        Some(mut d) => {
            d.agents = lay.agents.clone();
            let peerlets = service_peerlets(Box::new(EposDriver::new(d)), &monitor);
            net.add(Peer::new(PeerId(ids.driver), mode, lay.driver.clone().expect("reserved"), peerlets)?)?;
            Some(PeerId(ids.driver))
        }
        None => None,
    };
    Ok(Deployed { gateway: PeerId(ids.gateway), operator: PeerId(ids.operator), driver: driver_id, agents: lay.agents, app_addrs: lay.apps })
}

/// Aggregation with one device per initial reading.
pub fn deploy_dias(
    net: &mut Net,
    ids: IdBlock,
    initial: &[(f64, PossibleStates)],
    mut cfg: DiasConfig,
    driver: Option<DiasDriverConfig>,
    monitor: Option<Monitor>,
) -> Result<Deployed, RuntimeError> {
    let mode = net.mode();
    let n = initial.len();
    let lay = layout(net, ids, n, driver.is_some())?;
    cfg.driver = lay.driver.clone();
    add_infrastructure(net, ids, &lay, "dias", cfg.to_metadata(ServiceMetadata::new(n)))?;
    for (i, h) in lay.agents.iter().enumerate() {
        let (gw, (raw, states)) = (lay.gw.clone(), initial[i].clone());
        let app = move || -> Vec<Box<dyn Peerlet>> {
            let info = DeviceInfo { device_type: "news".into(), location: format!("loc-{i}") };
            vec![Box::new(ApplicationAgent::new(Some(gw.clone()), "dias", info, DiasDevice::new(raw, states.clone())))]
        };
        net.add(Peer::with_factory(h.app, mode, lay.apps[i].clone(), Box::new(app))?)?;
        let mon = monitor.clone();
        let agent = move || service_peerlets(Box::new(ServiceAgent::new("dias", DiasService::new())), &mon);
        net.add(Peer::with_factory(h.agent, mode, h.addr.clone(), Box::new(agent))?)?;
    }
    let driver_id = match driver {
        Some(mut d) => {
            d.agents = lay.agents.clone();
            let peerlets = service_peerlets(Box::new(DiasDriver::new(d)), &monitor);
            net.add(Peer::new(PeerId(ids.driver), mode, lay.driver.clone().expect("reserved"), peerlets)?)?;
            Some(PeerId(ids.driver))
        }
        None => None,
    };
    Ok(Deployed { gateway: PeerId(ids.gateway), operator: PeerId(ids.operator), driver: driver_id, agents: lay.agents, app_addrs: lay.apps })
}
