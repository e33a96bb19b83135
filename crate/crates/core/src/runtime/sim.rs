use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::trace::{EventTrace, TraceFilter, TraceKind, TraceRecord};
use super::{Control, ExecutionMode, Host, Peer, PeerCore, PeerId, PeerState, RuntimeError, Signal, TimerId};
use crate::messaging::{Envelope, NetworkAddress, Offer, SendStatus};

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    /// Base one-way delivery delay in virtual milliseconds.
    pub delay_ms: u64,
    /// Extra uniform delay in `[0, jitter_ms]` drawn from the network RNG.
    pub jitter_ms: u64,
    pub trace: TraceFilter,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { seed: 0, delay_ms: 1, jitter_ms: 0, trace: TraceFilter::All }
    }
}

/// Message accounting. In a quiescent run `sent == delivered + dropped`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub in_flight: u64,
    pub events: u64,
}

#[derive(Debug)]
enum ControlOp {
    Start,
    Stop,
    Restart,
}

#[derive(Debug)]
enum SimEvent {
    Deliver { to: PeerId, env: Envelope },
    Timer { peer: PeerId, incarnation: u32, id: u64 },
    Control { target: PeerId, op: ControlOp },
}

// Total order: (time, kind rank, source or timer id, sequence).
#[derive(Debug)]
struct Scheduled {
    t: u64,
    rank: u8,
    a: u64,
    b: u64,
    ev: SimEvent,
}

impl Scheduled {
    fn key(&self) -> (u64, u8, u64, u64) {
        (self.t, self.rank, self.a, self.b)
    }
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

struct Net {
    cfg: SimConfig,
    now: u64,
    events: BinaryHeap<Reverse<Scheduled>>,
    next_seq: u64,
    next_timer: u64,
    pair_last: HashMap<(NetworkAddress, NetworkAddress), u64>,
    addr_index: HashMap<NetworkAddress, PeerId>,
    trace: EventTrace,
    rng: ChaCha8Rng,
    signals: Vec<Signal>,
    delivered: u64,
    undeliverable: u64,
    processed: u64,
}

impl Net {
    fn push(&mut self, t: u64, rank: u8, a: u64, ev: SimEvent) {
        let b = self.next_seq;
        self.next_seq += 1;
        self.events.push(Reverse(Scheduled { t, rank, a, b, ev }));
    }

    fn record(&mut self, peer: PeerId, kind: TraceKind) {
        if self.cfg.trace.keeps(&kind) {
            self.trace.records.push(TraceRecord { t_ms: self.now, peer, kind });
        }
    }

    /// Moves everything in the peer's outbound queue onto the wire.
    fn flush(&mut self, core: &PeerCore) {
        while let Some(env) = core.outbound.pop() {
            self.route(core.id, env);
        }
    }

    fn route(&mut self, source: PeerId, env: Envelope) {
        let Some(&to) = self.addr_index.get(&env.recipient) else {
            self.undeliverable += 1;
            let kind = TraceKind::Drop { from: env.sender.to_string(), msg_type: env.msg_type, seq: env.seq };
            self.record(source, kind);
            return;
        };
        let jitter = if self.cfg.jitter_ms > 0 { self.rng.random_range(0..=self.cfg.jitter_ms) } else { 0 };
        let mut t = self.now + self.cfg.delay_ms + jitter;
        let pair = (env.sender.clone(), env.recipient.clone());
        if let Some(&last) = self.pair_last.get(&pair) {
            t = t.max(last);
        }
        self.pair_last.insert(pair, t);
        self.push(t, 0, source.0, SimEvent::Deliver { to, env });
    }
}

struct SimHost<'a> {
    net: &'a mut Net,
}

impl Host for SimHost<'_> {
    fn now_ms(&self) -> u64 {
        self.net.now
    }

    fn alloc_timer_id(&mut self) -> u64 {
        self.net.next_timer += 1;
        self.net.next_timer
    }

    fn arm_timer(&mut self, peer: PeerId, incarnation: u32, timer: TimerId) {
        self.net.push(timer.deadline_ms, 1, timer.id, SimEvent::Timer { peer, incarnation, id: timer.id });
    }

    fn outbound_full(&mut self, core: &PeerCore, env: Envelope) -> SendStatus {
        // Blocking in a single-threaded simulation means draining the queue
        // onto the wire at no virtual cost.
        self.net.flush(core);
        match core.outbound.offer(env) {
            Offer::Accepted => SendStatus::Enqueued,
            _ => SendStatus::Dropped,
        }
    }

    fn control(&mut self, _from: PeerId, cmd: Control) {
        let (target, op) = match cmd {
            Control::Stop(p) => (p, ControlOp::Stop),
            Control::Restart(p) => (p, ControlOp::Restart),
        };
        let now = self.net.now;
        self.net.push(now, 2, target.0, SimEvent::Control { target, op });
    }

    fn signal(&mut self, sig: Signal) {
        self.net.signals.push(sig);
    }
}

/// Single-threaded discrete-event executor over a virtual millisecond clock.
pub struct Simulation {
    peers: BTreeMap<PeerId, Peer>,
    net: Net,
    started: bool,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_4E7);
        Simulation {
            peers: BTreeMap::new(),
            net: Net {
                cfg,
                now: 0,
                events: BinaryHeap::new(),
                next_seq: 0,
                next_timer: 0,
                pair_last: HashMap::new(),
                addr_index: HashMap::new(),
                trace: EventTrace::default(),
                rng,
                signals: Vec::new(),
                delivered: 0,
                undeliverable: 0,
                processed: 0,
            },
            started: false,
        }
    }

    pub fn add_peer(&mut self, mut peer: Peer) -> Result<(), RuntimeError> {
        if peer.mode() != ExecutionMode::Sim {
            return Err(RuntimeError::ModeMismatch(peer.id(), peer.mode(), ExecutionMode::Sim));
        }
        if self.peers.contains_key(&peer.id()) || self.net.addr_index.contains_key(peer.address()) {
            return Err(RuntimeError::DuplicatePeer(peer.id()));
        }
        peer.set_seed(self.net.cfg.seed);
        self.net.addr_index.insert(peer.address().clone(), peer.id());
        let id = peer.id();
        self.peers.insert(id, peer);
        if self.started {
            let now = self.net.now;
            self.net.push(now, 2, id.0, SimEvent::Control { target: id, op: ControlOp::Start });
        }
        Ok(())
    }

    /// Convenience for `create_peer` + `add_peer`.
    pub fn create_peer(&mut self, id: PeerId, peerlets: Vec<Box<dyn super::Peerlet>>) -> Result<(), RuntimeError> {
        let peer = super::create_peer(id, ExecutionMode::Sim, peerlets)?;
        self.add_peer(peer)
    }

    pub fn now_ms(&self) -> u64 {
        self.net.now
    }

    pub fn peer(&self, id: PeerId) -> Option<&Peer> {
        self.peers.get(&id)
    }

    pub fn peer_mut(&mut self, id: PeerId) -> Option<&mut Peer> {
        self.peers.get_mut(&id)
    }

    pub fn peers(&self) -> impl Iterator<Item = &Peer> {
        self.peers.values()
    }

    pub fn trace(&self) -> &EventTrace {
        &self.net.trace
    }

    pub fn take_trace(&mut self) -> EventTrace {
        std::mem::take(&mut self.net.trace)
    }

    pub fn signals(&self) -> &[Signal] {
        &self.net.signals
    }

    pub fn take_signals(&mut self) -> Vec<Signal> {
        std::mem::take(&mut self.net.signals)
    }

    /// Consumes the simulation, returning its peers in id order, the trace
    /// and every signal raised.
    pub fn into_parts(self) -> (Vec<Peer>, EventTrace, Vec<Signal>) {
        (self.peers.into_values().collect(), self.net.trace, self.net.signals)
    }

    pub fn stats(&self) -> SimStats {
        let sent = self.peers.values().map(|p| p.core.sent).sum();
        let send_drops: u64 = self.peers.values().map(|p| p.core.send_drops).sum();
        let in_flight = self
            .net
            .events
            .iter()
            .filter(|Reverse(s)| matches!(s.ev, SimEvent::Deliver { .. }))
            .count() as u64;
        SimStats {
            sent,
            delivered: self.net.delivered,
            dropped: send_drops + self.net.undeliverable,
            in_flight,
            events: self.net.processed,
        }
    }

    /// Injects an envelope from outside any peer, as if sent by `from` now.
    pub fn inject(&mut self, from: PeerId, env: Envelope) {
        self.net.route(from, env);
    }

    pub fn stop_peer(&mut self, id: PeerId) {
        let now = self.net.now;
        self.net.push(now, 2, id.0, SimEvent::Control { target: id, op: ControlOp::Stop });
    }

    pub fn restart_peer(&mut self, id: PeerId) {
        let now = self.net.now;
        self.net.push(now, 2, id.0, SimEvent::Control { target: id, op: ControlOp::Restart });
    }

    fn ensure_started(&mut self) {
        if self.started {
            return;
        }
        self.started = true;
        let now = self.net.now;
        let ids: Vec<PeerId> = self.peers.keys().copied().collect();
        for id in ids {
            self.net.push(now, 2, id.0, SimEvent::Control { target: id, op: ControlOp::Start });
        }
    }

    /// Processes every event with timestamp `< until_ms`, then advances the
    /// clock to `until_ms`.
    pub fn run_until(&mut self, until_ms: u64) -> &EventTrace {
        self.ensure_started();
        while self.step_before(until_ms) {}
        if self.net.now < until_ms {
            self.net.now = until_ms;
        }
        &self.net.trace
    }

    /// Runs until a signal named `name` is raised or `deadline_ms` is reached.
    pub fn run_until_signal(&mut self, name: &str, deadline_ms: u64) -> Option<Signal> {
        self.ensure_started();
        let seen = self.net.signals.len();
        loop {
            if let Some(s) = self.net.signals[seen..].iter().find(|s| s.name == name) {
                return Some(s.clone());
            }
            if !self.step_before(deadline_ms) {
                if self.net.now < deadline_ms {
                    self.net.now = deadline_ms;
                }
                return None;
            }
        }
    }

    fn step_before(&mut self, until_ms: u64) -> bool {
        match self.net.events.peek() {
            Some(Reverse(s)) if s.t < until_ms => {}
            _ => return false,
        }
        let Reverse(ev) = self.net.events.pop().unwrap();
        self.net.now = ev.t;
        self.net.processed += 1;
        self.process(ev.ev);
        true
    }

    fn process(&mut self, ev: SimEvent) {
        match ev {
            SimEvent::Deliver { to, env } => {
                let Some(peer) = self.peers.get_mut(&to) else {
                    self.net.undeliverable += 1;
                    return;
                };
                let kind_from = env.sender.to_string();
                if peer.state() != PeerState::Running {
                    self.net.undeliverable += 1;
                    self.net.record(to, TraceKind::Drop { from: kind_from, msg_type: env.msg_type, seq: env.seq });
                    return;
                }
                self.net.delivered += 1;
                self.net.record(to, TraceKind::Deliver { from: kind_from, msg_type: env.msg_type, seq: env.seq });
                let mut host = SimHost { net: &mut self.net };
                if peer.core.inbound.offer(env) != Offer::Accepted {
                    peer.core.receive_drops += 1;
                }
                while let Some(e) = peer.core.inbound.pop() {
                    peer.deliver(&e, &mut host);
                }
                self.net.flush(&peer.core);
            }
            SimEvent::Timer { peer: id, incarnation, id: tid } => {
                let Some(peer) = self.peers.get_mut(&id) else { return };
                let mut host = SimHost { net: &mut self.net };
                if peer.fire_timer(tid, incarnation, &mut host).is_some() {
                    self.net.record(id, TraceKind::Timer { id: tid });
                    self.net.flush(&peer.core);
                }
            }
            SimEvent::Control { target, op } => {
                let Some(peer) = self.peers.get_mut(&target) else { return };
                let mut host = SimHost { net: &mut self.net };
                let kind = match op {
                    ControlOp::Start => {
                        if peer.state() != PeerState::Init {
                            return;
                        }
                        peer.start(&mut host);
                        TraceKind::Start
                    }
                    ControlOp::Stop => {
                        if peer.state() != PeerState::Running {
                            return;
                        }
                        peer.stop(&mut host);
                        TraceKind::Stop
                    }
                    ControlOp::Restart => {
                        if let Err(e) = peer.restart(&mut host) {
                            log::warn!("restart of {target} failed: {e}");
                            return;
                        }
                        TraceKind::Restart
                    }
                };
                self.net.flush(&peer.core);
                self.net.record(target, kind);
            }
        }
    }
}

/// Runs the given simulated peers from a cold start until `until_ms` and
/// returns the ordered trace.
pub fn run_simulation(peers: Vec<Peer>, until_ms: u64, seed: u64) -> Result<EventTrace, RuntimeError> {
    let mut sim = Simulation::new(SimConfig { seed, ..SimConfig::default() });
    for p in peers {
        sim.add_peer(p)?;
    }
    sim.run_until(until_ms);
    Ok(sim.take_trace())
}
