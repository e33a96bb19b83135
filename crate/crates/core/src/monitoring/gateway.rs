use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use super::{LogKind, LogRecord, LogStore, LogValue};
use crate::runtime::PeerId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonitoringError {
    #[error("unauthorized token")]
    Unauthorized,
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("malformed range: from {from} > to {to}")]
    MalformedRange { from: u64, to: u64 },
    #[error("store error: {0}")]
    Store(String),
}

/// Selection applied by [`LogGateway::flush_and_query`]. The time range is
/// inclusive on both ends.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryFilter {
    pub agent: Option<PeerId>,
    pub kind: Option<LogKind>,
    pub from_ms: Option<u64>,
    pub to_ms: Option<u64>,
}

impl QueryFilter {
    pub fn agent(agent: PeerId) -> Self {
        QueryFilter { agent: Some(agent), ..Default::default() }
    }

    pub fn kind(kind: LogKind) -> Self {
        QueryFilter { kind: Some(kind), ..Default::default() }
    }

    pub fn range(from_ms: u64, to_ms: u64) -> Self {
        QueryFilter { from_ms: Some(from_ms), to_ms: Some(to_ms), ..Default::default() }
    }

    fn validate(&self) -> Result<(), MonitoringError> {
        match (self.from_ms, self.to_ms) {
            (Some(from), Some(to)) if from > to => Err(MonitoringError::MalformedRange { from, to }),
            _ => Ok(()),
        }
    }

    fn matches(&self, r: &LogRecord) -> bool {
        self.agent.is_none_or(|a| a == r.agent)
            && self.kind.is_none_or(|k| k == r.kind)
            && self.from_ms.is_none_or(|f| r.ts_ms >= f)
            && self.to_ms.is_none_or(|t| r.ts_ms <= t)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatewayStats {
    pub received: u64,
    pub rejected_batches: u64,
    pub queue_drops: u64,
    pub commits: u64,
    pub persisted: u64,
    pub failed_batches: u64,
    pub lost_records: u64,
}

/// Authenticating, batching front of the record store.
pub struct LogGateway {
    agent: PeerId,
    queue: VecDeque<LogRecord>,
    capacity: usize,
    commit_batch: usize,
    auth_tokens: BTreeSet<String>,
    schemas: BTreeMap<PeerId, BTreeSet<String>>,
    store: Box<dyn LogStore>,
    stats: GatewayStats,
}

impl LogGateway {
    pub const DEFAULT_CAPACITY: usize = 100_000;
    pub const DEFAULT_COMMIT_BATCH: usize = 500;

    pub fn new(store: Box<dyn LogStore>, commit_batch: usize, auth_tokens: impl IntoIterator<Item = String>) -> Self {
        LogGateway {
            agent: PeerId(0),
            queue: VecDeque::new(),
            capacity: Self::DEFAULT_CAPACITY,
            commit_batch: commit_batch.max(1),
            auth_tokens: auth_tokens.into_iter().collect(),
            schemas: BTreeMap::new(),
            store,
            stats: GatewayStats::default(),
        }
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = capacity.max(self.commit_batch);
        self
    }

    /// Identity used for records the gateway writes about itself.
    pub fn set_agent(&mut self, agent: PeerId) {
        self.agent = agent;
    }

    pub fn commit_batch(&self) -> usize {
        self.commit_batch
    }

    pub fn stats(&self) -> GatewayStats {
        self.stats
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn store(&self) -> &dyn LogStore {
        self.store.as_ref()
    }

    pub fn store_mut(&mut self) -> &mut dyn LogStore {
        self.store.as_mut()
    }

    fn authorize(&mut self, token: &str) -> Result<(), MonitoringError> {
        if self.auth_tokens.contains(token) {
            Ok(())
        } else {
            self.stats.rejected_batches += 1;
            Err(MonitoringError::Unauthorized)
        }
    }

    /// Records the key names an agent will log under.
    pub fn register_schema(&mut self, token: &str, agent: PeerId, keys: &[String]) -> Result<(), MonitoringError> {
        self.authorize(token)?;
        self.schemas.entry(agent).or_default().extend(keys.iter().cloned());
        Ok(())
    }

    pub fn schema(&self, agent: PeerId) -> Option<&BTreeSet<String>> {
        self.schemas.get(&agent)
    }

    /// Queues records from an agent; full batches are committed right away.
    /// Returns the number of records queued.
    pub fn submit(&mut self, token: &str, records: Vec<LogRecord>) -> Result<usize, MonitoringError> {
        self.authorize(token)?;
        let mut queued = 0;
        for r in records {
            self.stats.received += 1;
            if self.queue.len() >= self.capacity {
                self.pump();
            }
            if self.queue.len() >= self.capacity {
                self.stats.queue_drops += 1;
                continue;
            }
            self.queue.push_back(r);
            queued += 1;
        }
        self.pump();
        Ok(queued)
    }

    /// Commits every full batch currently queued.
    pub fn pump(&mut self) -> usize {
        let mut commits = 0;
        while self.queue.len() >= self.commit_batch {
            self.commit_next();
            commits += 1;
        }
        commits
    }

    /// Commits everything queued, in batches of at most `commit_batch`.
    pub fn flush(&mut self) -> usize {
        let mut commits = 0;
        while !self.queue.is_empty() {
            self.commit_next();
            commits += 1;
        }
        commits
    }

    fn commit_next(&mut self) {
        let n = self.commit_batch.min(self.queue.len());
        let batch: Vec<LogRecord> = self.queue.drain(..n).collect();
        self.stats.commits += 1;
        if self.store.append(&batch).is_ok() || self.store.append(&batch).is_ok() {
            self.stats.persisted += batch.len() as u64;
            return;
        }
        self.stats.failed_batches += 1;
        self.stats.lost_records += batch.len() as u64;
        log::warn!("log gateway dropped a batch of {} records after retry", batch.len());
        let only_failures = batch.iter().all(|r| r.agent == self.agent && r.key == "persist_failed");
        if !only_failures {
            let ts_ms = batch.iter().map(|r| r.ts_ms).max().unwrap_or(0);
            self.queue.push_back(LogRecord {
                agent: self.agent,
                ts_ms,
                kind: LogKind::Event,
                key: "persist_failed".into(),
                value: LogValue::from(batch.len()),
            });
        }
    }

    /// Flushes pending records, then returns matching persisted records in
    /// `(ts_ms, agent)` order.
    pub fn flush_and_query(&mut self, filter: &QueryFilter) -> Result<Vec<LogRecord>, MonitoringError> {
        filter.validate()?;
        self.flush();
        self.query(filter)
    }

    /// Query over what is already persisted, without flushing.
    pub fn query(&self, filter: &QueryFilter) -> Result<Vec<LogRecord>, MonitoringError> {
        filter.validate()?;
        let all = self.store.read_all().map_err(|e| MonitoringError::Store(e.to_string()))?;
        let mut out: Vec<LogRecord> = all.into_iter().filter(|r| filter.matches(r)).collect();
        out.sort_by_key(|r| (r.ts_ms, r.agent));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitoring::MemoryStore;

    fn rec(agent: u64, ts: u64, kind: LogKind) -> LogRecord {
        LogRecord { agent: PeerId(agent), ts_ms: ts, kind, key: "k".into(), value: LogValue::Num(ts as f64) }
    }

    fn gateway(batch: usize) -> LogGateway {
        LogGateway::new(Box::new(MemoryStore::default()), batch, ["secret".to_string()])
    }

    #[test]
    fn three_records_batch_two_gives_two_commits() {
        let mut gw = gateway(2);
        gw.submit("secret", (0..3).map(|i| rec(1, i, LogKind::Service)).collect()).unwrap();
        assert_eq!(gw.stats().commits, 1);
        assert_eq!(gw.queued(), 1);
        gw.flush();
        assert_eq!(gw.stats().commits, 2);
        assert_eq!(gw.stats().persisted, 3);
    }

    #[test]
    fn unauthorized_batches_rejected() {
        let mut gw = gateway(2);
        assert_eq!(gw.submit("wrong", vec![rec(1, 0, LogKind::Event)]), Err(MonitoringError::Unauthorized));
        assert_eq!(gw.stats().rejected_batches, 1);
        assert!(gw.flush_and_query(&QueryFilter::default()).unwrap().is_empty());
    }

    #[test]
    fn query_orders_and_filters() {
        let mut gw = gateway(10);
        gw.submit("secret", vec![rec(2, 5, LogKind::Service), rec(1, 5, LogKind::Event), rec(1, 3, LogKind::Service), rec(3, 9, LogKind::Service)])
            .unwrap();
        let all = gw.flush_and_query(&QueryFilter::default()).unwrap();
        let keys: Vec<(u64, u64)> = all.iter().map(|r| (r.ts_ms, r.agent.0)).collect();
        assert_eq!(keys, vec![(3, 1), (5, 1), (5, 2), (9, 3)]);
        assert!(gw.flush_and_query(&QueryFilter::kind(LogKind::Memory)).unwrap().is_empty());
        let ranged = gw.flush_and_query(&QueryFilter::range(4, 5)).unwrap();
        assert_eq!(ranged.len(), 2);
        assert_eq!(gw.flush_and_query(&QueryFilter::agent(PeerId(1))).unwrap().len(), 2);
        assert!(matches!(gw.flush_and_query(&QueryFilter::range(6, 5)), Err(MonitoringError::MalformedRange { .. })));
    }

    #[test]
    fn failed_batch_retried_once_then_dropped_with_event() {
        let mut store = MemoryStore::default();
        store.fail_next = 1;
        let mut gw = LogGateway::new(Box::new(store), 2, ["t".to_string()]);
        gw.submit("t", vec![rec(1, 0, LogKind::Service), rec(1, 1, LogKind::Service)]).unwrap();
        assert_eq!(gw.stats().persisted, 2);
        assert_eq!(gw.stats().failed_batches, 0);

        let mut store = MemoryStore::default();
        store.fail_next = 2;
        let mut gw = LogGateway::new(Box::new(store), 2, ["t".to_string()]);
        gw.set_agent(PeerId(99));
        gw.submit("t", vec![rec(1, 0, LogKind::Service), rec(1, 4, LogKind::Service)]).unwrap();
        let out = gw.flush_and_query(&QueryFilter::default()).unwrap();
        assert_eq!(gw.stats().failed_batches, 1);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].agent, out[0].kind, out[0].key.as_str(), out[0].ts_ms), (PeerId(99), LogKind::Event, "persist_failed", 4));
    }

    #[test]
    fn schemas_are_recorded() {
        let mut gw = gateway(2);
        gw.register_schema("secret", PeerId(4), &["global_cost".into(), "local_cost".into()]).unwrap();
        assert!(gw.schema(PeerId(4)).unwrap().contains("global_cost"));
        assert!(gw.register_schema("nope", PeerId(4), &[]).is_err());
    }
}
