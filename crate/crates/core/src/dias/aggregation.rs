use std::collections::BTreeMap;

use super::{BloomFilter, DiasError};

/// One supplier's contribution, with the contribution it replaces.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionMessage {
    pub supplier: String,
    pub version: u64,
    pub state_index: usize,
    pub value: f64,
    pub prev: Option<(u64, f64)>,
}

impl SessionMessage {
    /// `supplier_id;version;new_state_index;new_value;prev_version;prev_value`,
    /// with the last two fields empty for a first contribution.
    pub fn encode(&self) -> Vec<u8> {
        let (pv, pval) = match self.prev {
            Some((v, x)) => (v.to_string(), x.to_string()),
            None => (String::new(), String::new()),
        };
        format!("{};{};{};{};{};{}", self.supplier, self.version, self.state_index, self.value, pv, pval).into_bytes()
    }

    pub fn decode(body: &[u8]) -> Result<SessionMessage, DiasError> {
        let text = std::str::from_utf8(body).map_err(|_| DiasError::Malformed("session is not UTF-8".into()))?;
        let f: Vec<&str> = text.split(';').collect();
        if f.len() != 6 || f[0].is_empty() {
            return Err(DiasError::Malformed(format!("session {text:?}")));
        }
        let bad = |what: &str| DiasError::Malformed(format!("session {what}: {text:?}"));
        let prev = match (f[4], f[5]) {
            ("", "") => None,
            (v, x) => Some((v.parse().map_err(|_| bad("prev_version"))?, x.parse().map_err(|_| bad("prev_value"))?)),
        };
        Ok(SessionMessage {
            supplier: f[0].to_string(),
            version: f[1].parse().map_err(|_| bad("version"))?,
            state_index: f[2].parse().map_err(|_| bad("state index"))?,
            value: f[3].parse().map_err(|_| bad("value"))?,
            prev,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionOutcome {
    Added,
    Corrected,
    Duplicate,
    /// Older than a graceful leave already applied.
    Stale,
}

/// Snapshot of a consumer's aggregates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateEstimate {
    pub sum: f64,
    /// `None` when nothing has been aggregated.
    pub avg: Option<f64>,
    pub min: f64,
    pub max: f64,
    pub count: usize,
    pub as_of: u64,
}

/// Consumer-side memory of which suppliers contributed what.
#[derive(Debug, Clone)]
pub struct AggregationState {
    supplier_filter: BloomFilter,
    state_filter: BloomFilter,
    last: BTreeMap<String, (f64, u64)>,
    tombstones: BTreeMap<String, u64>,
    sum: f64,
    min: f64,
    max: f64,
    pub corrections: u64,
    pub duplicates: u64,
}

impl Default for AggregationState {
    fn default() -> Self {
        AggregationState::new(BloomFilter::DEFAULT_M, BloomFilter::DEFAULT_H)
    }
}

impl AggregationState {
    pub fn new(m: usize, h: u32) -> Self {
        AggregationState {
            supplier_filter: BloomFilter::new(m, h),
            state_filter: BloomFilter::new(m, h),
            last: BTreeMap::new(),
            tombstones: BTreeMap::new(),
            sum: 0.0,
            min: 0.0,
            max: 0.0,
            corrections: 0,
            duplicates: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.last.len()
    }

    pub fn sum(&self) -> f64 {
        self.sum
    }

    pub fn contributions(&self) -> &BTreeMap<String, (f64, u64)> {
        &self.last
    }

    pub fn supplier_filter(&self) -> &BloomFilter {
        &self.supplier_filter
    }

    pub fn state_filter(&self) -> &BloomFilter {
        &self.state_filter
    }

    // Aggregates are recomputed in supplier order so that consumers holding
    // the same contributions report bit-identical sums.
    fn refresh(&mut self) {
        self.sum = self.last.values().map(|(v, _)| v).sum();
        self.min = self.last.values().map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        self.max = self.last.values().map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        if self.last.is_empty() {
            self.min = 0.0;
            self.max = 0.0;
        }
    }

    fn remember(&mut self, msg: &SessionMessage) {
        self.supplier_filter.insert(msg.supplier.as_bytes());
        self.state_filter.insert(format!("{}#{}#{}", msg.supplier, msg.version, msg.state_index).as_bytes());
        self.last.insert(msg.supplier.clone(), (msg.value, msg.version));
    }

    /// Applies one session. Unseen suppliers are added, newer versions
    /// replace the recorded contribution, replays change nothing.
    pub fn apply(&mut self, msg: &SessionMessage) -> Result<SessionOutcome, DiasError> {
        if !msg.value.is_finite() {
            return Err(DiasError::Malformed(format!("value {}", msg.value)));
        }
        let seen = self.supplier_filter.contains(msg.supplier.as_bytes());
        let recorded = if seen { self.last.get(&msg.supplier).copied() } else { None };
        let outcome = match recorded {
            None => {
                if self.tombstones.get(&msg.supplier).is_some_and(|v| msg.version <= *v) {
                    return Ok(SessionOutcome::Stale);
                }
                self.tombstones.remove(&msg.supplier);
                SessionOutcome::Added
            }
            Some((_, v)) if msg.version == v => {
                self.duplicates += 1;
                return Ok(SessionOutcome::Duplicate);
            }
            Some((_, v)) if msg.version < v => {
                return Err(DiasError::VersionRegression { supplier: msg.supplier.clone(), recorded: v, received: msg.version });
            }
            Some(_) => {
                self.corrections += 1;
                SessionOutcome::Corrected
            }
        };
        self.remember(msg);
        self.refresh();
        Ok(outcome)
    }

    /// Graceful leave removes the supplier's contribution; returns false for
    /// unknown suppliers. Crashed suppliers are never removed here and get
    /// corrected when they come back with a higher version.
    pub fn handle_leave(&mut self, supplier: &str, graceful: bool) -> bool {
        if !graceful {
            return self.last.contains_key(supplier);
        }
        match self.last.remove(supplier) {
            Some((_, version)) => {
                self.tombstones.insert(supplier.to_string(), version);
                self.refresh();
                true
            }
            None => false,
        }
    }

    pub fn estimate(&self, now_ms: u64) -> AggregateEstimate {
        let count = self.last.len();
        AggregateEstimate {
            sum: self.sum,
            avg: (count > 0).then(|| self.sum / count as f64),
            min: self.min,
            max: self.max,
            count,
            as_of: now_ms,
        }
    }
}
