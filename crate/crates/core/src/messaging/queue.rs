use std::collections::VecDeque;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::Envelope;

/// What to do when a full queue receives another envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropPolicy {
    BlockSender,
    DropNewest,
}

/// Result of offering an envelope to a queue.
#[derive(Debug, PartialEq, Eq)]
pub enum Offer {
    Accepted,
    Dropped,
    /// Queue full under `BlockSender`; the caller gets its envelope back and
    /// decides how to wait.
    Full(Envelope),
}

/// Bounded FIFO of envelopes.
#[derive(Debug)]
pub struct MessageQueue {
    capacity: usize,
    entries: VecDeque<Envelope>,
    policy: DropPolicy,
    dropped: u64,
    accepted: u64,
}

impl MessageQueue {
    pub fn new(capacity: usize, policy: DropPolicy) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        MessageQueue { capacity, entries: VecDeque::new(), policy, dropped: 0, accepted: 0 }
    }

    pub fn offer(&mut self, env: Envelope) -> Offer {
        if self.entries.len() < self.capacity {
            self.entries.push_back(env);
            self.accepted += 1;
            return Offer::Accepted;
        }
        match self.policy {
            DropPolicy::DropNewest => {
                self.dropped += 1;
                Offer::Dropped
            }
            DropPolicy::BlockSender => Offer::Full(env),
        }
    }

    pub fn pop(&mut self) -> Option<Envelope> {
        self.entries.pop_front()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> DropPolicy {
        self.policy
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub(crate) fn record_drop(&mut self) {
        self.dropped += 1;
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Instantaneous view of a peer's queues.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueStats {
    pub in_len: usize,
    pub out_len: usize,
    pub dropped_count: u64,
    /// Envelopes the live transport gave up on after its retry budget.
    pub failed_count: u64,
}

/// A [`MessageQueue`] that can be shared between a peer executor and
/// transport threads.
#[derive(Debug)]
pub struct SharedQueue {
    inner: Mutex<State>,
    changed: Condvar,
}

#[derive(Debug)]
struct State {
    queue: MessageQueue,
    closed: bool,
    wake: bool,
}

impl SharedQueue {
    pub fn new(capacity: usize, policy: DropPolicy) -> Self {
        SharedQueue {
            inner: Mutex::new(State { queue: MessageQueue::new(capacity, policy), closed: false, wake: false }),
            changed: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn offer(&self, env: Envelope) -> Offer {
        let r = self.lock().queue.offer(env);
        if r == Offer::Accepted {
            self.changed.notify_all();
        }
        r
    }

    /// Enqueues, waiting for space when the policy is `BlockSender`.
    /// Returns `false` if the envelope was dropped or the queue closed.
    pub fn push_blocking(&self, env: Envelope) -> bool {
        let mut st = self.lock();
        let mut env = env;
        loop {
            if st.closed {
                return false;
            }
            match st.queue.offer(env) {
                Offer::Accepted => {
                    drop(st);
                    self.changed.notify_all();
                    return true;
                }
                Offer::Dropped => return false,
                Offer::Full(back) => {
                    env = back;
                    st = self.changed.wait(st).unwrap_or_else(|p| p.into_inner());
                }
            }
        }
    }

    pub fn pop(&self) -> Option<Envelope> {
        let r = self.lock().queue.pop();
        if r.is_some() {
            self.changed.notify_all();
        }
        r
    }

    /// Waits until an envelope is available, the queue is closed, `wake` is
    /// called, or `deadline` passes.
    pub fn pop_until(&self, deadline: Option<Instant>) -> Option<Envelope> {
        let mut st = self.lock();
        loop {
            if let Some(env) = st.queue.pop() {
                drop(st);
                self.changed.notify_all();
                return Some(env);
            }
            if st.closed || st.wake {
                st.wake = false;
                return None;
            }
            match deadline {
                None => st = self.changed.wait(st).unwrap_or_else(|p| p.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return None;
                    }
                    let (g, _) = self
                        .changed
                        .wait_timeout(st, d - now)
                        .unwrap_or_else(|p| p.into_inner());
                    st = g;
                }
            }
        }
    }

    pub fn pop_timeout(&self, timeout: Duration) -> Option<Envelope> {
        self.pop_until(Some(Instant::now() + timeout))
    }

    /// Interrupts one pending `pop_until`.
    pub fn wake(&self) {
        self.lock().wake = true;
        self.changed.notify_all();
    }

    pub fn close(&self) {
        self.lock().closed = true;
        self.changed.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    pub fn len(&self) -> usize {
        self.lock().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.lock().queue.dropped()
    }

    pub fn record_drop(&self) {
        self.lock().queue.record_drop();
    }

    pub fn clear(&self) {
        self.lock().queue.clear();
        self.changed.notify_all();
    }

    pub fn drain(&self) -> Vec<Envelope> {
        let mut st = self.lock();
        let out = st.queue.entries.drain(..).collect();
        drop(st);
        self.changed.notify_all();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messaging::NetworkAddress;
    use std::sync::Arc;

    fn env(seq: u64) -> Envelope {
        Envelope::new(1, NetworkAddress::from_raw("a:1"), NetworkAddress::from_raw("b:2"), seq, vec![])
    }

    #[test]
    fn fifo_order_preserved() {
        let mut q = MessageQueue::new(10, DropPolicy::BlockSender);
        for i in 0..5 {
            assert_eq!(q.offer(env(i)), Offer::Accepted);
        }
        let seqs: Vec<u64> = std::iter::from_fn(|| q.pop()).map(|e| e.seq).collect();
        assert_eq!(seqs, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn drop_newest_counts_drops() {
        let mut q = MessageQueue::new(1, DropPolicy::DropNewest);
        assert_eq!(q.offer(env(1)), Offer::Accepted);
        assert_eq!(q.offer(env(2)), Offer::Dropped);
        assert_eq!(q.dropped(), 1);
        assert_eq!(q.len(), 1);
        assert_eq!(q.pop().unwrap().seq, 1);
    }

    #[test]
    fn block_sender_hands_envelope_back() {
        let mut q = MessageQueue::new(1, DropPolicy::BlockSender);
        q.offer(env(1));
        match q.offer(env(2)) {
            Offer::Full(e) => assert_eq!(e.seq, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(q.dropped(), 0);
    }

    #[test]
    fn pending_length_after_partial_drain() {
        let mut q = MessageQueue::new(10, DropPolicy::BlockSender);
        for i in 0..3 {
            q.offer(env(i));
        }
        q.pop();
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn blocked_sender_resumes_after_pop() {
        let q = Arc::new(SharedQueue::new(1, DropPolicy::BlockSender));
        q.offer(env(1));
        let q2 = q.clone();
        let h = std::thread::spawn(move || q2.push_blocking(env(2)));
        std::thread::sleep(Duration::from_millis(20));
        assert_eq!(q.pop().unwrap().seq, 1);
        assert!(h.join().unwrap());
        assert_eq!(q.pop().unwrap().seq, 2);
    }

    #[test]
    fn pop_until_times_out_on_empty() {
        let q = SharedQueue::new(4, DropPolicy::DropNewest);
        assert!(q.pop_timeout(Duration::from_millis(5)).is_none());
    }
}
