//! Threaded executor over real TCP sockets.
//!
//! Each peer gets an executor thread (all of its callbacks run there), a
//! sender thread draining its outbound queue, and a listening endpoint that
//! feeds its inbound queue.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::warn;

use super::{Control, ExecutionMode, Host, Peer, PeerCore, PeerId, PeerState, RuntimeError, Signal, TimerId};
use crate::messaging::tcp::{RetryPolicy, TcpEndpoint, TcpSender};
use crate::messaging::{AddressKind, Envelope, NetworkAddress, SendStatus, SharedQueue};

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub host: String,
    /// First port for sequential assignment; `None` lets the OS choose.
    pub base_port: Option<u16>,
    pub retry: RetryPolicy,
    pub seed: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig { host: "127.0.0.1".into(), base_port: None, retry: RetryPolicy::default(), seed: 0 }
    }
}

#[derive(Debug)]
enum Command {
    Start,
    Stop,
    Restart,
    Shutdown,
}

struct Slot {
    commands: Mutex<VecDeque<Command>>,
    inbound: Arc<SharedQueue>,
}

impl Slot {
    fn post(&self, cmd: Command) {
        self.commands.lock().unwrap().push_back(cmd);
        self.inbound.wake();
    }
}

struct Pending {
    peer: Peer,
    listener: TcpListener,
}

struct Running {
    executor: JoinHandle<Peer>,
    sender: JoinHandle<()>,
    endpoint: TcpEndpoint,
}

/// A set of peers running on wall-clock time with TCP transport.
pub struct LiveNetwork {
    cfg: LiveConfig,
    next_port: Option<u16>,
    pending: Vec<Pending>,
    reserved: HashMap<NetworkAddress, TcpListener>,
    slots: Arc<HashMap<PeerId, Arc<Slot>>>,
    running: Vec<(PeerId, Running)>,
    epoch: Instant,
    next_timer: Arc<AtomicU64>,
    signal_tx: Sender<Signal>,
    signal_rx: Receiver<Signal>,
    shutdown: Arc<AtomicBool>,
}

impl LiveNetwork {
    pub fn new(cfg: LiveConfig) -> Self {
        let (signal_tx, signal_rx) = mpsc::channel();
        LiveNetwork {
            next_port: cfg.base_port,
            cfg,
            pending: Vec::new(),
            reserved: HashMap::new(),
            slots: Arc::new(HashMap::new()),
            running: Vec::new(),
            epoch: Instant::now(),
            next_timer: Arc::new(AtomicU64::new(0)),
            signal_tx,
            signal_rx,
            shutdown: Arc::new(AtomicBool::new(false)),
        }
    }

    /// Binds a listening socket now so its address can be handed to
    /// peerlets before the peer is built.
    pub fn reserve_address(&mut self) -> Result<NetworkAddress, RuntimeError> {
        let port = match self.next_port.as_mut() {
            Some(p) => {
                let v = *p;
                *p = p.checked_add(1).ok_or_else(|| {
                    RuntimeError::Io(std::io::Error::new(std::io::ErrorKind::AddrNotAvailable, "port range exhausted"))
                })?;
                v
            }
            None => 0,
        };
        let (listener, addr) = TcpEndpoint::bind(&self.cfg.host, port)?;
        self.reserved.insert(addr.clone(), listener);
        Ok(addr)
    }

    pub fn add_peer(&mut self, mut peer: Peer) -> Result<(), RuntimeError> {
        if peer.mode() != ExecutionMode::Live {
            return Err(RuntimeError::ModeMismatch(peer.id(), peer.mode(), ExecutionMode::Live));
        }
        if self.pending.iter().any(|p| p.peer.id() == peer.id()) || self.slots.contains_key(&peer.id()) {
            return Err(RuntimeError::DuplicatePeer(peer.id()));
        }
        let listener = match self.reserved.remove(peer.address()) {
            Some(l) => l,
            None => {
                let port = match peer.address().kind() {
                    AddressKind::Live { port, .. } => port,
                    _ => 0,
                };
                let (l, addr) = if port == 0 {
                    let addr = self.reserve_address()?;
                    (self.reserved.remove(&addr).unwrap(), addr)
                } else {
                    TcpEndpoint::bind(&self.cfg.host, port)?
                };
                peer.set_address(addr);
                l
            }
        };
        peer.set_seed(self.cfg.seed);
        self.pending.push(Pending { peer, listener });
        Ok(())
    }

    /// Milliseconds since the network was created.
    pub fn now_ms(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    /// Spawns all threads and starts every peer.
    pub fn start(&mut self) -> Result<(), RuntimeError> {
        let mut slots = HashMap::new();
        for p in &self.pending {
            slots.insert(
                p.peer.id(),
                Arc::new(Slot { commands: Mutex::new(VecDeque::new()), inbound: p.peer.inbound().clone() }),
            );
        }
        let slots = Arc::new(slots);
        self.slots = slots.clone();
        for Pending { peer, listener } in self.pending.drain(..) {
            let id = peer.id();
            let inbound = peer.inbound().clone();
            let outbound = peer.outbound().clone();
            let endpoint = TcpEndpoint::start(listener, peer.address().clone(), inbound)?;
            let mut tcp = TcpSender::new(self.cfg.retry);
            let failed = peer.failed_counter();
            let sender = thread::Builder::new().name(format!("send-{id}")).spawn(move || {
                let counter = tcp.failed_counter();
                while let Some(env) = outbound.pop_until(None) {
                    let r = tcp.deliver(&env);
                    if r.status == SendStatus::Failed {
                        failed.store(counter.load(Ordering::Relaxed), Ordering::Relaxed);
                    }
                }
                tcp.close_all();
            })?;
            let exec = Executor {
                peer,
                slot: slots[&id].clone(),
                slots: slots.clone(),
                epoch: self.epoch,
                next_timer: self.next_timer.clone(),
                signals: self.signal_tx.clone(),
            };
            let executor = thread::Builder::new().name(format!("peer-{id}")).spawn(move || exec.run())?;
            self.running.push((id, Running { executor, sender, endpoint }));
        }
        for slot in slots.values() {
            slot.post(Command::Start);
        }
        Ok(())
    }

    /// Blocks until a signal with the given name arrives or the timeout
    /// elapses. Other signals received meanwhile are returned in `seen`.
    pub fn wait_signal(&self, name: &str, timeout: Duration, seen: &mut Vec<Signal>) -> Option<Signal> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.checked_duration_since(Instant::now())?;
            match self.signal_rx.recv_timeout(left) {
                Ok(s) if s.name == name => return Some(s),
                Ok(s) => seen.push(s),
                Err(_) => return None,
            }
        }
    }

    pub fn drain_signals(&self) -> Vec<Signal> {
        self.signal_rx.try_iter().collect()
    }

    pub fn stop_peer(&self, id: PeerId) {
        if let Some(s) = self.slots.get(&id) {
            s.post(Command::Stop);
        }
    }

    pub fn restart_peer(&self, id: PeerId) {
        if let Some(s) = self.slots.get(&id) {
            s.post(Command::Restart);
        }
    }

    /// Stops every peer, joins all threads and hands the peers back for
    /// inspection.
    pub fn shutdown(self) -> Vec<Peer> {
        self.shutdown_with_last(&[], Duration::ZERO)
    }

    /// Like [`LiveNetwork::shutdown`], but the peers in `last` keep running
    /// until every other peer has stopped and `grace` has passed, so they
    /// still receive what the others send while stopping.
    pub fn shutdown_with_last(mut self, last: &[PeerId], grace: Duration) -> Vec<Peer> {
        self.shutdown.store(true, Ordering::Release);
        let (late, early): (Vec<_>, Vec<_>) = self.running.drain(..).partition(|(id, _)| last.contains(id));
        let mut peers = self.stop_all(early);
        if !late.is_empty() {
            thread::sleep(grace);
            peers.extend(self.stop_all(late));
        }
        peers.sort_by_key(|p| p.id());
        peers
    }

    fn stop_all(&self, group: Vec<(PeerId, Running)>) -> Vec<Peer> {
        for (id, _) in &group {
            if let Some(slot) = self.slots.get(id) {
                slot.post(Command::Shutdown);
            }
        }
        let mut peers = Vec::new();
        for (id, r) in group {
            let Running { executor, sender, mut endpoint } = r;
            match executor.join() {
                Ok(p) => {
                    p.outbound().close();
                    peers.push(p);
                }
                Err(_) => warn!("executor of peer {id} panicked"),
            }
            let _ = sender.join();
            endpoint.shutdown();
        }
        peers
    }
}

struct Executor {
    peer: Peer,
    slot: Arc<Slot>,
    slots: Arc<HashMap<PeerId, Arc<Slot>>>,
    epoch: Instant,
    next_timer: Arc<AtomicU64>,
    signals: Sender<Signal>,
}

struct LiveHost<'a> {
    epoch: Instant,
    timers: &'a mut BinaryHeap<Reverse<(u64, u64, u32)>>,
    next_timer: &'a AtomicU64,
    slots: &'a HashMap<PeerId, Arc<Slot>>,
    signals: &'a Sender<Signal>,
    self_commands: &'a mut Vec<Command>,
    me: PeerId,
}

impl Host for LiveHost<'_> {
    fn now_ms(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    fn alloc_timer_id(&mut self) -> u64 {
        self.next_timer.fetch_add(1, Ordering::Relaxed) + 1
    }

    fn arm_timer(&mut self, _peer: PeerId, incarnation: u32, timer: TimerId) {
        self.timers.push(Reverse((timer.deadline_ms, timer.id, incarnation)));
    }

    fn outbound_full(&mut self, core: &PeerCore, env: Envelope) -> SendStatus {
        if core.outbound.push_blocking(env) {
            SendStatus::Enqueued
        } else {
            SendStatus::Dropped
        }
    }

    fn control(&mut self, _from: PeerId, cmd: Control) {
        let (target, c) = match cmd {
            Control::Stop(p) => (p, Command::Stop),
            Control::Restart(p) => (p, Command::Restart),
        };
        if target == self.me {
            self.self_commands.push(c);
        } else if let Some(s) = self.slots.get(&target) {
            s.post(c);
        }
    }

    fn signal(&mut self, sig: Signal) {
        let _ = self.signals.send(sig);
    }
}

impl Executor {
    fn run(mut self) -> Peer {
        let mut timers: BinaryHeap<Reverse<(u64, u64, u32)>> = BinaryHeap::new();
        let mut own: Vec<Command> = Vec::new();
        let mut early: VecDeque<Envelope> = VecDeque::new();
        loop {
            let mut cmds: Vec<Command> = self.slot.commands.lock().unwrap().drain(..).collect();
            cmds.append(&mut own);
            for c in cmds {
                let mut host = LiveHost {
                    epoch: self.epoch,
                    timers: &mut timers,
                    next_timer: &self.next_timer,
                    slots: &self.slots,
                    signals: &self.signals,
                    self_commands: &mut own,
                    me: self.peer.id(),
                };
                match c {
                    Command::Start => self.peer.start(&mut host),
                    Command::Stop => self.peer.stop(&mut host),
                    Command::Restart => {
                        if let Err(e) = self.peer.restart(&mut host) {
                            warn!("restart failed: {e}");
                        }
                    }
                    Command::Shutdown => {
                        self.peer.stop(&mut host);
                        return self.peer;
                    }
                }
            }
            if !own.is_empty() {
                continue;
            }
            if self.peer.state() == PeerState::Running {
                while let Some(env) = early.pop_front() {
                    let mut host = LiveHost {
                        epoch: self.epoch,
                        timers: &mut timers,
                        next_timer: &self.next_timer,
                        slots: &self.slots,
                        signals: &self.signals,
                        self_commands: &mut own,
                        me: self.peer.id(),
                    };
                    self.peer.deliver(&env, &mut host);
                }
            }
            let now = self.epoch.elapsed().as_millis() as u64;
            while let Some(Reverse((deadline, id, inc))) = timers.peek().copied() {
                if deadline > now {
                    break;
                }
                timers.pop();
                let mut host = LiveHost {
                    epoch: self.epoch,
                    timers: &mut timers,
                    next_timer: &self.next_timer,
                    slots: &self.slots,
                    signals: &self.signals,
                    self_commands: &mut own,
                    me: self.peer.id(),
                };
                self.peer.fire_timer(id, inc, &mut host);
            }
            if !own.is_empty() {
                continue;
            }

            let deadline = timers.peek().map(|Reverse((d, _, _))| self.epoch + Duration::from_millis(*d));
            if let Some(env) = self.slot.inbound.pop_until(deadline) {
                let mut host = LiveHost {
                    epoch: self.epoch,
                    timers: &mut timers,
                    next_timer: &self.next_timer,
                    slots: &self.slots,
                    signals: &self.signals,
                    self_commands: &mut own,
                    me: self.peer.id(),
                };
                if self.peer.state() == PeerState::Init {
                    // Peers start one after another; hold frames that arrive
                    // before this one is started.
                    early.push_back(env);
                } else if self.peer.state() == PeerState::Running {
                    self.peer.deliver(&env, &mut host);
                } else {
                    self.peer.core.receive_drops += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{create_peer, Context, Peerlet};

    struct Ping {
        peer: Option<NetworkAddress>,
        received: Vec<u64>,
        rounds: u64,
    }

    impl Peerlet for Ping {
        fn start(&mut self, ctx: &mut Context<'_>) {
            if let Some(p) = self.peer.clone() {
                ctx.send(&p, 1, 0u64.to_be_bytes().to_vec()).unwrap();
            }
        }
        fn handle_message(&mut self, ctx: &mut Context<'_>, env: &Envelope) {
            let n = u64::from_be_bytes(env.body[..8].try_into().unwrap());
            self.received.push(n);
            if n + 1 < self.rounds {
                ctx.send(&env.sender, 1, (n + 1).to_be_bytes().to_vec()).unwrap();
            } else {
                ctx.signal("done", n.to_string());
            }
        }
    }

    #[test]
    fn ping_pong_over_tcp() {
        let mut net = LiveNetwork::new(LiveConfig::default());
        let b_addr = net.reserve_address().unwrap();
        let a_addr = net.reserve_address().unwrap();
        let a = Peer::new(PeerId(1), ExecutionMode::Live, a_addr, vec![Box::new(Ping { peer: Some(b_addr.clone()), received: vec![], rounds: 10 })]).unwrap();
        let b = Peer::new(PeerId(2), ExecutionMode::Live, b_addr, vec![Box::new(Ping { peer: None, received: vec![], rounds: 10 })]).unwrap();
        net.add_peer(a).unwrap();
        net.add_peer(b).unwrap();
        net.start().unwrap();
        let mut seen = vec![];
        let s = net.wait_signal("done", Duration::from_secs(10), &mut seen).expect("done signal");
        assert_eq!(s.value, "9");
        let peers = net.shutdown();
        let b = peers.iter().find(|p| p.id() == PeerId(2)).unwrap();
        assert_eq!(b.peerlet::<Ping>().unwrap().received, vec![0, 2, 4, 6, 8]);
        assert_eq!(peers[0].state(), PeerState::Stopped);
    }

    #[test]
    fn sim_peer_rejected_by_live_network() {
        let mut net = LiveNetwork::new(LiveConfig::default());
        let p = create_peer(PeerId(1), ExecutionMode::Sim, vec![Box::new(Ping { peer: None, received: vec![], rounds: 1 })]).unwrap();
        assert!(net.add_peer(p).is_err());
    }

    #[test]
    fn live_timers_fire_on_wall_clock() {
        struct T(Vec<u64>);
        impl Peerlet for T {
            fn start(&mut self, ctx: &mut Context<'_>) {
                ctx.schedule_timer(20, true).unwrap();
            }
            fn handle_timer(&mut self, ctx: &mut Context<'_>, t: TimerId) {
                self.0.push(ctx.now_ms());
                if self.0.len() == 3 {
                    ctx.cancel_timer(t);
                    ctx.signal("done", "");
                }
            }
        }
        let mut net = LiveNetwork::new(LiveConfig::default());
        net.add_peer(create_peer(PeerId(1), ExecutionMode::Live, vec![Box::new(T(vec![]))]).unwrap()).unwrap();
        net.start().unwrap();
        assert!(net.wait_signal("done", Duration::from_secs(5), &mut vec![]).is_some());
        let peers = net.shutdown();
        let fired = &peers[0].peerlet::<T>().unwrap().0;
        assert_eq!(fired.len(), 3);
        assert!(fired.windows(2).all(|w| w[1] >= w[0] + 15));
    }
}
