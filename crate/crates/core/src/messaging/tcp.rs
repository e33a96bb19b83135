//! TCP backend: one listening endpoint per peer, one lazily opened,
//! long-lived connection per directed pair.

use std::collections::HashMap;
use std::io::{self, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, warn};

use super::{encode_frame, AddressKind, Envelope, FrameReader, NetworkAddress, Offer, SendReceipt, SendStatus, SharedQueue};

/// Connect attempts and back-off before a send is reported failed.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, backoff: Duration::from_millis(200) }
    }
}

fn socket_addr(addr: &NetworkAddress) -> io::Result<SocketAddr> {
    match addr.kind() {
        AddressKind::Live { host, port } => (host.as_str(), port)
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "address did not resolve")),
        _ => Err(io::Error::new(io::ErrorKind::InvalidInput, format!("not a live address: {addr}"))),
    }
}

/// Accepts inbound connections and decodes frames into a peer's inbound queue.
pub struct TcpEndpoint {
    local: NetworkAddress,
    stop: Arc<AtomicBool>,
    streams: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl TcpEndpoint {
    /// Binds `host:port` (port 0 picks a free port).
    pub fn bind(host: &str, port: u16) -> io::Result<(TcpListener, NetworkAddress)> {
        let listener = TcpListener::bind((host, port))?;
        let local = listener.local_addr()?;
        Ok((listener, NetworkAddress::live(host, local.port())))
    }

    /// Starts accepting on an already bound listener.
    pub fn start(listener: TcpListener, local: NetworkAddress, inbound: Arc<SharedQueue>) -> io::Result<Self> {
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let streams: Arc<Mutex<Vec<TcpStream>>> = Arc::new(Mutex::new(Vec::new()));
        let acceptor = {
            let stop = stop.clone();
            let streams = streams.clone();
            let name = format!("accept-{local}");
            thread::Builder::new().name(name).spawn(move || {
                while !stop.load(Ordering::Acquire) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let _ = stream.set_nonblocking(false);
                            let _ = stream.set_nodelay(true);
                            if let Ok(clone) = stream.try_clone() {
                                streams.lock().unwrap().push(clone);
                            }
                            let inbound = inbound.clone();
                            let _ = thread::Builder::new()
                                .name("tcp-reader".into())
                                .spawn(move || read_loop(stream, inbound));
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                            thread::sleep(Duration::from_millis(2));
                        }
                        Err(e) => {
                            warn!("accept failed: {e}");
                            thread::sleep(Duration::from_millis(10));
                        }
                    }
                }
            })?
        };
        Ok(TcpEndpoint { local, stop, streams, acceptor: Some(acceptor) })
    }

    pub fn local_address(&self) -> &NetworkAddress {
        &self.local
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Release);
        for s in self.streams.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpEndpoint {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn read_loop(stream: TcpStream, inbound: Arc<SharedQueue>) {
    let mut reader = FrameReader::new(BufReader::new(stream));
    loop {
        match reader.next_frame() {
            Ok(Some(env)) => {
                if inbound.is_closed() {
                    return;
                }
                match inbound.offer(env) {
                    Offer::Accepted => {}
                    Offer::Dropped => debug!("inbound queue full, frame dropped"),
                    Offer::Full(env) => {
                        if !inbound.push_blocking(env) {
                            return;
                        }
                    }
                }
            }
            Ok(None) => return,
            Err(e) => {
                debug!("reader closing: {e}");
                return;
            }
        }
    }
}

/// Outbound half: caches one connection per destination.
pub struct TcpSender {
    connections: HashMap<NetworkAddress, TcpStream>,
    retry: RetryPolicy,
    failed: Arc<AtomicU64>,
}

impl TcpSender {
    pub fn new(retry: RetryPolicy) -> Self {
        TcpSender { connections: HashMap::new(), retry, failed: Arc::new(AtomicU64::new(0)) }
    }

    pub fn failed_counter(&self) -> Arc<AtomicU64> {
        self.failed.clone()
    }

    /// Writes the frame, opening or reopening the connection as needed.
    /// Gives up after the retry budget and reports `Failed`.
    pub fn deliver(&mut self, env: &Envelope) -> SendReceipt {
        let frame = match encode_frame(env) {
            Ok(f) => f,
            Err(e) => {
                warn!("cannot encode envelope: {e}");
                self.failed.fetch_add(1, Ordering::Relaxed);
                return SendReceipt { seq: env.seq, status: SendStatus::Failed };
            }
        };
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                thread::sleep(self.retry.backoff);
            }
            if !self.connections.contains_key(&env.recipient) {
                match socket_addr(&env.recipient).and_then(|a| TcpStream::connect_timeout(&a, Duration::from_secs(2))) {
                    Ok(s) => {
                        let _ = s.set_nodelay(true);
                        self.connections.insert(env.recipient.clone(), s);
                    }
                    Err(e) => {
                        debug!("connect to {} failed (attempt {}): {e}", env.recipient, attempt + 1);
                        continue;
                    }
                }
            }
            let stream = self.connections.get_mut(&env.recipient).unwrap();
            match stream.write_all(&frame) {
                Ok(()) => return SendReceipt { seq: env.seq, status: SendStatus::Enqueued },
                Err(e) => {
                    debug!("write to {} failed: {e}", env.recipient);
                    self.connections.remove(&env.recipient);
                }
            }
        }
        warn!("giving up on {} after {} attempts", env.recipient, self.retry.attempts);
        self.failed.fetch_add(1, Ordering::Relaxed);
        SendReceipt { seq: env.seq, status: SendStatus::Failed }
    }

    pub fn close_all(&mut self) {
        for (_, s) in self.connections.drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messaging::DropPolicy;

    #[test]
    fn frames_cross_a_real_socket_in_order() {
        let inbound = Arc::new(SharedQueue::new(100, DropPolicy::DropNewest));
        let (listener, addr) = TcpEndpoint::bind("127.0.0.1", 0).unwrap();
        let mut ep = TcpEndpoint::start(listener, addr.clone(), inbound.clone()).unwrap();
        let mut tx = TcpSender::new(RetryPolicy::default());
        let me = NetworkAddress::live("127.0.0.1", 1);
        for seq in 0..20 {
            let env = Envelope::new(3, me.clone(), addr.clone(), seq, format!("m{seq}").into_bytes());
            assert_eq!(tx.deliver(&env).status, SendStatus::Enqueued);
        }
        let mut got = Vec::new();
        while got.len() < 20 {
            let e = inbound.pop_timeout(Duration::from_secs(5)).expect("frame");
            got.push(e.seq);
        }
        assert_eq!(got, (0..20).collect::<Vec<_>>());
        tx.close_all();
        ep.shutdown();
    }

    #[test]
    fn unreachable_recipient_fails_after_budget() {
        // Bind then drop to obtain a port with nothing listening.
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut tx = TcpSender::new(RetryPolicy { attempts: 3, backoff: Duration::from_millis(1) });
        let env = Envelope::new(1, NetworkAddress::live("127.0.0.1", 1), NetworkAddress::live("127.0.0.1", port), 0, vec![]);
        assert_eq!(tx.deliver(&env).status, SendStatus::Failed);
        assert_eq!(tx.failed_counter().load(Ordering::Relaxed), 1);
    }
}
