//! Agent container.
//!
//! A [`Peer`] hosts an ordered list of [`Peerlet`]s and gives them a
//! [`Context`] for sending, timers, logging and randomness. The context is
//! backed by a [`Host`]: the discrete-event [`Simulation`] or the threaded
//! [`LiveNetwork`]. Peerlets never see which one, so service code is shared
//! verbatim between both modes.

mod live;
mod sim;
mod trace;

pub use live::{LiveConfig, LiveNetwork};
pub use sim::{run_simulation, SimConfig, SimStats, Simulation};
pub use trace::{EventTrace, TraceFilter, TraceKind, TraceRecord};

use std::any::Any;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::messaging::{
    DropPolicy, Envelope, MessagingError, NetworkAddress, Offer, QueueStats, SendReceipt,
    SendStatus, SharedQueue, DEFAULT_QUEUE_CAPACITY,
};
use crate::monitoring::{LogKind, LogRecord, LogValue, MemoryProbe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PeerId(pub u64);

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PeerState {
    Init,
    Running,
    Leaving,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExecutionMode {
    /// Virtual clock, in-memory transport, seeded randomness.
    Sim,
    /// Wall clock, TCP transport.
    Live,
}

/// A scheduled callback. `period_ms` is set for periodic timers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TimerId {
    pub id: u64,
    pub deadline_ms: u64,
    pub period_ms: Option<u64>,
}

impl TimerId {
    pub fn periodic(&self) -> bool {
        self.period_ms.is_some()
    }
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("no peerlets")]
    NoPeerlets,
    #[error("duplicate peer id {0}")]
    DuplicatePeer(PeerId),
    #[error("peer {0} is not running")]
    NotRunning(PeerId),
    #[error("peer {0} runs in {1:?} mode, expected {2:?}")]
    ModeMismatch(PeerId, ExecutionMode, ExecutionMode),
    #[error("peer {0} has no peerlet factory and cannot be restarted")]
    NotRestartable(PeerId),
    #[error("unknown peer {0}")]
    UnknownPeer(PeerId),
    #[error(transparent)]
    Messaging(#[from] MessagingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A pluggable module running inside a [`Peer`].
///
/// Every message delivered to the peer is offered to every peerlet in list
/// order; a timer goes only to the peerlet that armed it. Callbacks for one
/// peer never run concurrently.
pub trait Peerlet: Any + Send {
    fn init(&mut self, _ctx: &mut Context<'_>) {}
    fn start(&mut self, _ctx: &mut Context<'_>) {}
    fn stop(&mut self, _ctx: &mut Context<'_>) {}
    fn handle_message(&mut self, _ctx: &mut Context<'_>, _env: &Envelope) {}
    fn handle_timer(&mut self, _ctx: &mut Context<'_>, _timer: TimerId) {}

    /// Approximate heap footprint, used by the memory logger.
    fn memory_bytes(&self) -> usize {
        0
    }
}

/// Rebuilds a peer's peerlets with fresh state for restarts.
pub type PeerletFactory = Box<dyn Fn() -> Vec<Box<dyn Peerlet>> + Send>;

/// Requests a peerlet can make of its host.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    /// Graceful stop of the target.
    Stop(PeerId),
    /// Stop (if needed), rebuild peerlets from the factory and start again
    /// under the same id.
    Restart(PeerId),
}

/// Named notification a peerlet raises for whoever drives the run.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub t_ms: u64,
    pub peer: PeerId,
    pub name: String,
    pub value: String,
}

/// Services a host provides to a peer during a callback.
pub(crate) trait Host {
    fn now_ms(&self) -> u64;
    fn alloc_timer_id(&mut self) -> u64;
    fn arm_timer(&mut self, peer: PeerId, incarnation: u32, timer: TimerId);
    /// Called when the outbound queue is full under `BlockSender`.
    fn outbound_full(&mut self, core: &PeerCore, env: Envelope) -> SendStatus;
    fn control(&mut self, from: PeerId, cmd: Control);
    fn signal(&mut self, sig: Signal);
}

#[derive(Debug, Clone, Copy)]
struct TimerEntry {
    peerlet: usize,
    period_ms: Option<u64>,
}

/// Bounded local buffer of log records waiting for the monitoring peerlet.
#[derive(Debug)]
pub(crate) struct LogBuffer {
    records: VecDeque<LogRecord>,
    capacity: usize,
    dropped: u64,
}

impl LogBuffer {
    fn new(capacity: usize) -> Self {
        LogBuffer { records: VecDeque::new(), capacity: capacity.max(1), dropped: 0 }
    }

    fn push(&mut self, rec: LogRecord) {
        if self.records.len() >= self.capacity {
            self.records.pop_front();
            self.dropped += 1;
        }
        self.records.push_back(rec);
    }
}

/// Peer state shared by all peerlets (everything except the peerlets).
pub struct PeerCore {
    id: PeerId,
    address: NetworkAddress,
    mode: ExecutionMode,
    state: PeerState,
    incarnation: u32,
    seed: u64,
    rng: ChaCha8Rng,
    seqs: HashMap<NetworkAddress, u64>,
    inbound: Arc<SharedQueue>,
    outbound: Arc<SharedQueue>,
    timers: BTreeMap<u64, TimerEntry>,
    logs: LogBuffer,
    memory_probe: Option<Arc<dyn MemoryProbe>>,
    sent: u64,
    send_drops: u64,
    received: u64,
    receive_drops: u64,
    failed: Arc<std::sync::atomic::AtomicU64>,
}

impl PeerCore {
    pub fn id(&self) -> PeerId {
        self.id
    }

    pub fn address(&self) -> &NetworkAddress {
        &self.address
    }

    pub fn state(&self) -> PeerState {
        self.state
    }

    pub fn queue_stats(&self) -> QueueStats {
        QueueStats {
            in_len: self.inbound.len(),
            out_len: self.outbound.len(),
            dropped_count: self.send_drops + self.receive_drops,
            failed_count: self.failed.load(std::sync::atomic::Ordering::Relaxed),
        }
    }

    fn reseed(&mut self) {
        self.rng = ChaCha8Rng::seed_from_u64(peer_seed(self.seed, self.id, self.incarnation));
    }
}

fn peer_seed(seed: u64, id: PeerId, incarnation: u32) -> u64 {
    // splitmix64 over the triple
    let mut z = seed ^ id.0.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((incarnation as u64) << 48);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What a peerlet sees during a callback.
pub struct Context<'a> {
    core: &'a mut PeerCore,
    host: &'a mut dyn Host,
    peerlet: usize,
}

impl<'a> Context<'a> {
    pub fn id(&self) -> PeerId {
        self.core.id
    }

    pub fn address(&self) -> &NetworkAddress {
        &self.core.address
    }

    pub fn mode(&self) -> ExecutionMode {
        self.core.mode
    }

    pub fn state(&self) -> PeerState {
        self.core.state
    }

    /// Number of restarts this peer has gone through.
    pub fn incarnation(&self) -> u32 {
        self.core.incarnation
    }

    pub fn now_ms(&self) -> u64 {
        self.host.now_ms()
    }

    /// Per-peer generator; seeded from the run seed, peer id and restart
    /// count, so simulated runs are reproducible.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.core.rng
    }

    pub fn queue_stats(&self) -> QueueStats {
        self.core.queue_stats()
    }

    /// Enqueues a message on the outbound queue. Allowed while running and
    /// during the stop callback (for farewell messages).
    pub fn send(&mut self, to: &NetworkAddress, msg_type: u16, body: Vec<u8>) -> Result<SendReceipt, RuntimeError> {
        if !matches!(self.core.state, PeerState::Running | PeerState::Leaving) {
            return Err(RuntimeError::NotRunning(self.core.id));
        }
        let seq = {
            let s = self.core.seqs.entry(to.clone()).or_insert(0);
            let v = *s;
            *s += 1;
            v
        };
        let env = Envelope::new(msg_type, self.core.address.clone(), to.clone(), seq, body);
        self.send_envelope(env)
    }

    /// Sends a pre-built envelope; its recipient must equal `env.recipient`.
    pub fn send_envelope(&mut self, env: Envelope) -> Result<SendReceipt, RuntimeError> {
        if !matches!(self.core.state, PeerState::Running | PeerState::Leaving) {
            return Err(RuntimeError::NotRunning(self.core.id));
        }
        let seq = env.seq;
        self.core.sent += 1;
        let status = match self.core.outbound.offer(env) {
            Offer::Accepted => SendStatus::Enqueued,
            Offer::Dropped => {
                self.core.send_drops += 1;
                SendStatus::Dropped
            }
            Offer::Full(env) => {
                let st = self.host.outbound_full(self.core, env);
                if st == SendStatus::Dropped {
                    self.core.send_drops += 1;
                }
                st
            }
        };
        Ok(SendReceipt { seq, status })
    }

    pub fn schedule_timer(&mut self, delay_ms: u64, periodic: bool) -> Result<TimerId, RuntimeError> {
        if self.core.state != PeerState::Running {
            return Err(RuntimeError::NotRunning(self.core.id));
        }
        let id = self.host.alloc_timer_id();
        let period_ms = if periodic { Some(delay_ms.max(1)) } else { None };
        let timer = TimerId { id, deadline_ms: self.host.now_ms() + delay_ms, period_ms };
        self.core.timers.insert(id, TimerEntry { peerlet: self.peerlet, period_ms });
        self.host.arm_timer(self.core.id, self.core.incarnation, timer);
        Ok(timer)
    }

    pub fn cancel_timer(&mut self, timer: TimerId) -> bool {
        self.core.timers.remove(&timer.id).is_some()
    }

    /// Buffers a log record for the monitoring peerlet. Never blocks; a full
    /// buffer evicts its oldest record.
    pub fn log(&mut self, kind: LogKind, key: &str, value: impl Into<LogValue>) -> bool {
        if self.core.state != PeerState::Running && self.core.state != PeerState::Leaving {
            return false;
        }
        let rec = LogRecord {
            agent: self.core.id,
            ts_ms: self.host.now_ms(),
            kind,
            key: key.to_string(),
            value: value.into(),
        };
        self.core.logs.push(rec);
        true
    }

    /// Removes up to `max` buffered records.
    pub fn take_logs(&mut self, max: usize) -> Vec<LogRecord> {
        let n = max.min(self.core.logs.records.len());
        self.core.logs.records.drain(..n).collect()
    }

    pub fn pending_logs(&self) -> usize {
        self.core.logs.records.len()
    }

    pub fn log_drops(&self) -> u64 {
        self.core.logs.dropped
    }

    pub fn memory_bytes(&self) -> Option<u64> {
        self.core.memory_probe.as_ref().map(|p| p.bytes())
    }

    /// Gracefully stops this peer once the current callback returns.
    pub fn leave(&mut self) {
        let id = self.core.id;
        self.host.control(id, Control::Stop(id));
    }

    pub fn control(&mut self, cmd: Control) {
        self.host.control(self.core.id, cmd);
    }

    pub fn signal(&mut self, name: &str, value: impl Into<String>) {
        let sig = Signal { t_ms: self.host.now_ms(), peer: self.core.id, name: name.to_string(), value: value.into() };
        self.host.signal(sig);
    }
}

/// Agent container.
pub struct Peer {
    core: PeerCore,
    peerlets: Vec<Box<dyn Peerlet>>,
    factory: Option<PeerletFactory>,
}

impl fmt::Debug for Peer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Peer")
            .field("id", &self.core.id)
            .field("address", &self.core.address)
            .field("state", &self.core.state)
            .field("peerlets", &self.peerlets.len())
            .finish()
    }
}

/// Creates a peer in the INIT state; each peerlet receives `init` in list
/// order. Simulated peers are addressed `sim:<id>`; live peers get a
/// loopback address bound when added to a [`LiveNetwork`].
pub fn create_peer(id: PeerId, mode: ExecutionMode, peerlets: Vec<Box<dyn Peerlet>>) -> Result<Peer, RuntimeError> {
    let address = match mode {
        ExecutionMode::Sim => NetworkAddress::sim(id),
        ExecutionMode::Live => NetworkAddress::live("127.0.0.1", 0),
    };
    Peer::new(id, mode, address, peerlets)
}

impl Peer {
    pub fn new(
        id: PeerId,
        mode: ExecutionMode,
        address: NetworkAddress,
        peerlets: Vec<Box<dyn Peerlet>>,
    ) -> Result<Peer, RuntimeError> {
        if peerlets.is_empty() {
            return Err(RuntimeError::NoPeerlets);
        }
        let policy = match mode {
            ExecutionMode::Sim => DropPolicy::BlockSender,
            ExecutionMode::Live => DropPolicy::DropNewest,
        };
        let core = PeerCore {
            id,
            address,
            mode,
            state: PeerState::Init,
            incarnation: 0,
            seed: 0,
            rng: ChaCha8Rng::seed_from_u64(peer_seed(0, id, 0)),
            seqs: HashMap::new(),
            inbound: Arc::new(SharedQueue::new(DEFAULT_QUEUE_CAPACITY, policy)),
            outbound: Arc::new(SharedQueue::new(DEFAULT_QUEUE_CAPACITY, policy)),
            timers: BTreeMap::new(),
            logs: LogBuffer::new(DEFAULT_QUEUE_CAPACITY),
            memory_probe: None,
            sent: 0,
            send_drops: 0,
            received: 0,
            receive_drops: 0,
            failed: Arc::new(std::sync::atomic::AtomicU64::new(0)),
        };
        let mut peer = Peer { core, peerlets, factory: None };
        let mut host = DetachedHost;
        peer.each_peerlet(&mut host, |p, ctx| p.init(ctx));
        Ok(peer)
    }

    /// Creates a peer whose peerlets can be rebuilt for restarts.
    pub fn with_factory(
        id: PeerId,
        mode: ExecutionMode,
        address: NetworkAddress,
        factory: PeerletFactory,
    ) -> Result<Peer, RuntimeError> {
        let mut peer = Peer::new(id, mode, address, factory())?;
        peer.factory = Some(factory);
        Ok(peer)
    }

    /// Replaces the queues with ones of the given capacity and policy.
    pub fn set_queue_config(&mut self, capacity: usize, policy: DropPolicy) {
        self.core.inbound = Arc::new(SharedQueue::new(capacity, policy));
        self.core.outbound = Arc::new(SharedQueue::new(capacity, policy));
    }

    pub fn set_memory_probe(&mut self, probe: Arc<dyn MemoryProbe>) {
        self.core.memory_probe = Some(probe);
    }

    pub fn set_log_capacity(&mut self, capacity: usize) {
        self.core.logs = LogBuffer::new(capacity);
    }

    pub fn id(&self) -> PeerId {
        self.core.id
    }

    pub fn address(&self) -> &NetworkAddress {
        &self.core.address
    }

    pub fn mode(&self) -> ExecutionMode {
        self.core.mode
    }

    pub fn state(&self) -> PeerState {
        self.core.state
    }

    pub fn incarnation(&self) -> u32 {
        self.core.incarnation
    }

    pub fn core(&self) -> &PeerCore {
        &self.core
    }

    pub fn peerlets(&self) -> &[Box<dyn Peerlet>] {
        &self.peerlets
    }

    /// First peerlet of concrete type `T`.
    pub fn peerlet<T: Peerlet>(&self) -> Option<&T> {
        self.peerlets.iter().find_map(|p| (p.as_ref() as &dyn Any).downcast_ref::<T>())
    }

    pub fn peerlet_mut<T: Peerlet>(&mut self) -> Option<&mut T> {
        self.peerlets.iter_mut().find_map(|p| (p.as_mut() as &mut dyn Any).downcast_mut::<T>())
    }

    /// Instantaneous queue lengths and cumulative drops.
    pub fn monitor_queues(&self) -> QueueStats {
        self.core.queue_stats()
    }

    pub fn messages_sent(&self) -> u64 {
        self.core.sent
    }

    pub fn messages_received(&self) -> u64 {
        self.core.received
    }

    pub fn memory_bytes(&self) -> usize {
        self.peerlets.iter().map(|p| p.memory_bytes()).sum()
    }

    pub(crate) fn set_address(&mut self, address: NetworkAddress) {
        self.core.address = address;
    }

    pub(crate) fn set_seed(&mut self, seed: u64) {
        self.core.seed = seed;
        self.core.reseed();
    }

    pub(crate) fn inbound(&self) -> &Arc<SharedQueue> {
        &self.core.inbound
    }

    pub(crate) fn outbound(&self) -> &Arc<SharedQueue> {
        &self.core.outbound
    }

    pub(crate) fn failed_counter(&self) -> Arc<std::sync::atomic::AtomicU64> {
        self.core.failed.clone()
    }

    fn each_peerlet(&mut self, host: &mut dyn Host, mut f: impl FnMut(&mut dyn Peerlet, &mut Context<'_>)) {
        for (i, p) in self.peerlets.iter_mut().enumerate() {
            let mut ctx = Context { core: &mut self.core, host: &mut *host, peerlet: i };
            f(p.as_mut(), &mut ctx);
        }
    }

    pub(crate) fn start(&mut self, host: &mut dyn Host) {
        if self.core.state != PeerState::Init {
            return;
        }
        self.core.state = PeerState::Running;
        self.each_peerlet(host, |p, ctx| p.start(ctx));
    }

    pub(crate) fn stop(&mut self, host: &mut dyn Host) {
        if !matches!(self.core.state, PeerState::Running | PeerState::Init) {
            return;
        }
        let was_running = self.core.state == PeerState::Running;
        self.core.state = PeerState::Leaving;
        if was_running {
            self.each_peerlet(host, |p, ctx| p.stop(ctx));
        }
        self.core.state = PeerState::Stopped;
        self.core.timers.clear();
        let pending = self.core.inbound.drain().len() as u64;
        self.core.receive_drops += pending;
    }

    /// Rebuilds peerlet state from the factory and starts again.
    pub(crate) fn restart(&mut self, host: &mut dyn Host) -> Result<(), RuntimeError> {
        if self.factory.is_none() {
            return Err(RuntimeError::NotRestartable(self.core.id));
        }
        self.stop(host);
        self.peerlets = (self.factory.as_ref().expect("checked above"))();
        self.core.incarnation += 1;
        self.core.reseed();
        self.core.state = PeerState::Init;
        self.core.logs.records.clear();
        self.each_peerlet(host, |p, ctx| p.init(ctx));
        self.start(host);
        Ok(())
    }

    /// Hands one inbound envelope to every peerlet. Returns false if the
    /// peer was not running and the envelope was discarded.
    pub(crate) fn deliver(&mut self, env: &Envelope, host: &mut dyn Host) -> bool {
        if self.core.state != PeerState::Running {
            self.core.receive_drops += 1;
            return false;
        }
        self.core.received += 1;
        for (i, p) in self.peerlets.iter_mut().enumerate() {
            if self.core.state != PeerState::Running {
                break;
            }
            let mut ctx = Context { core: &mut self.core, host: &mut *host, peerlet: i };
            p.handle_message(&mut ctx, env);
        }
        true
    }

    /// Fires a timer if it is still armed for this incarnation.
    pub(crate) fn fire_timer(&mut self, id: u64, incarnation: u32, host: &mut dyn Host) -> Option<TimerId> {
        if self.core.state != PeerState::Running || incarnation != self.core.incarnation {
            return None;
        }
        let entry = *self.core.timers.get(&id)?;
        let now = host.now_ms();
        let timer = TimerId { id, deadline_ms: now, period_ms: entry.period_ms };
        match entry.period_ms {
            Some(p) => host.arm_timer(self.core.id, incarnation, TimerId { id, deadline_ms: now + p, period_ms: Some(p) }),
            None => {
                self.core.timers.remove(&id);
            }
        }
        let p = self.peerlets.get_mut(entry.peerlet)?;
        let mut ctx = Context { core: &mut self.core, host, peerlet: entry.peerlet };
        p.handle_timer(&mut ctx, timer);
        Some(timer)
    }
}

/// Host used for `init` before a peer belongs to any network. Time is zero
/// and sends/timers are refused by the state guard.
struct DetachedHost;

impl Host for DetachedHost {
    fn now_ms(&self) -> u64 {
        0
    }
    fn alloc_timer_id(&mut self) -> u64 {
        0
    }
    fn arm_timer(&mut self, _peer: PeerId, _incarnation: u32, _timer: TimerId) {}
    fn outbound_full(&mut self, _core: &PeerCore, _env: Envelope) -> SendStatus {
        SendStatus::Dropped
    }
    fn control(&mut self, _from: PeerId, _cmd: Control) {}
    fn signal(&mut self, _sig: Signal) {}
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use std::sync::Mutex;

    /// Records every callback it receives into a shared log.
    pub struct Recorder {
        pub tag: &'static str,
        pub log: Arc<Mutex<Vec<String>>>,
    }

    impl Recorder {
        pub fn boxed(tag: &'static str, log: &Arc<Mutex<Vec<String>>>) -> Box<dyn Peerlet> {
            Box::new(Recorder { tag, log: log.clone() })
        }
    }

    impl Peerlet for Recorder {
        fn init(&mut self, ctx: &mut Context<'_>) {
            self.log.lock().unwrap().push(format!("{}:{}:init", ctx.id(), self.tag));
        }
        fn start(&mut self, ctx: &mut Context<'_>) {
            self.log.lock().unwrap().push(format!("{}:{}:start", ctx.id(), self.tag));
        }
        fn stop(&mut self, ctx: &mut Context<'_>) {
            self.log.lock().unwrap().push(format!("{}:{}:stop", ctx.id(), self.tag));
        }
        fn handle_message(&mut self, ctx: &mut Context<'_>, env: &Envelope) {
            self.log.lock().unwrap().push(format!("{}:{}:msg:{}@{}", ctx.id(), self.tag, env.seq, ctx.now_ms()));
        }
        fn handle_timer(&mut self, ctx: &mut Context<'_>, t: TimerId) {
            self.log.lock().unwrap().push(format!("{}:{}:timer:{}@{}", ctx.id(), self.tag, t.id, ctx.now_ms()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testing::Recorder;
    use super::*;
    use std::sync::Mutex;

    #[test]
    fn create_peer_runs_init_in_order() {
        let log = Arc::new(Mutex::new(Vec::new()));
        let p = create_peer(PeerId(1), ExecutionMode::Sim, vec![Recorder::boxed("a", &log), Recorder::boxed("b", &log)]).unwrap();
        assert_eq!(p.state(), PeerState::Init);
        assert_eq!(p.peerlets().len(), 2);
        assert_eq!(*log.lock().unwrap(), vec!["1:a:init", "1:b:init"]);
    }

    #[test]
    fn empty_peerlet_list_rejected() {
        let err = create_peer(PeerId(1), ExecutionMode::Sim, vec![]).unwrap_err();
        assert_eq!(err.to_string(), "no peerlets");
    }

    #[test]
    fn timers_refused_before_running() {
        struct Eager(Option<Result<TimerId, String>>);
        impl Peerlet for Eager {
            fn init(&mut self, ctx: &mut Context<'_>) {
                self.0 = Some(ctx.schedule_timer(5, false).map_err(|e| e.to_string()));
            }
        }
        let p = create_peer(PeerId(3), ExecutionMode::Sim, vec![Box::new(Eager(None))]).unwrap();
        let e = p.peerlet::<Eager>().unwrap();
        assert!(matches!(e.0, Some(Err(_))));
    }

    #[test]
    fn fresh_peer_queue_stats_are_zero() {
        let log = Arc::new(Mutex::new(Vec::new()));
        let p = create_peer(PeerId(1), ExecutionMode::Sim, vec![Recorder::boxed("a", &log)]).unwrap();
        assert_eq!(p.monitor_queues(), QueueStats::default());
    }

    #[test]
    fn downcast_finds_peerlet() {
        let log = Arc::new(Mutex::new(Vec::new()));
        let p = create_peer(PeerId(1), ExecutionMode::Sim, vec![Recorder::boxed("x", &log)]).unwrap();
        assert_eq!(p.peerlet::<Recorder>().unwrap().tag, "x");
    }
}
