//! Distributed logging: a monitoring peerlet on every agent forwards
//! service, event and memory records to a single logging gateway, which
//! authenticates them and commits them in batches to a store.

mod gateway;
mod peerlets;
mod store;

pub use gateway::{GatewayStats, LogGateway, MonitoringError, QueryFilter};
pub use peerlets::{decode_batch, encode_batch, LogBatch, LogGatewayPeerlet, MonitoringPeerlet, MSG_LOG, MSG_LOG_REJECT};
pub use store::{FileStore, LogStore, MemoryStore};

use std::fmt;
use std::str::FromStr;

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, CONTROLS};

use crate::runtime::PeerId;

const FIELD: &AsciiSet = &CONTROLS.add(b'|').add(b'%');

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LogKind {
    Service,
    Event,
    Memory,
}

impl LogKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LogKind::Service => "SERVICE",
            LogKind::Event => "EVENT",
            LogKind::Memory => "MEMORY",
        }
    }
}

impl fmt::Display for LogKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LogKind {
    type Err = MonitoringError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SERVICE" => Ok(LogKind::Service),
            "EVENT" => Ok(LogKind::Event),
            "MEMORY" => Ok(LogKind::Memory),
            other => Err(MonitoringError::Malformed(format!("unknown kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogValue {
    Num(f64),
    Text(String),
}

impl LogValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            LogValue::Num(v) => Some(*v),
            LogValue::Text(t) => t.parse().ok(),
        }
    }
}

impl fmt::Display for LogValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogValue::Num(v) => write!(f, "{v}"),
            LogValue::Text(t) => f.write_str(t),
        }
    }
}

impl From<f64> for LogValue {
    fn from(v: f64) -> Self {
        LogValue::Num(v)
    }
}
impl From<u64> for LogValue {
    fn from(v: u64) -> Self {
        LogValue::Num(v as f64)
    }
}
impl From<usize> for LogValue {
    fn from(v: usize) -> Self {
        LogValue::Num(v as f64)
    }
}
impl From<&str> for LogValue {
    fn from(v: &str) -> Self {
        LogValue::Text(v.to_string())
    }
}
impl From<String> for LogValue {
    fn from(v: String) -> Self {
        LogValue::Text(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub agent: PeerId,
    pub ts_ms: u64,
    pub kind: LogKind,
    pub key: String,
    pub value: LogValue,
}

impl LogRecord {
    /// `ts_ms|agent|kind|key|value`, with `|` and `%` percent-encoded in the
    /// key and value.
    pub fn to_line(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}",
            self.ts_ms,
            self.agent.0,
            self.kind,
            utf8_percent_encode(&self.key, FIELD),
            utf8_percent_encode(&self.value.to_string(), FIELD)
        )
    }

    pub fn from_line(line: &str) -> Result<LogRecord, MonitoringError> {
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() != 5 {
            return Err(MonitoringError::Malformed(format!("expected 5 fields: {line}")));
        }
        let bad = |what: &str| MonitoringError::Malformed(format!("bad {what} in: {line}"));
        let ts_ms = parts[0].parse().map_err(|_| bad("timestamp"))?;
        let agent = PeerId(parts[1].parse().map_err(|_| bad("agent"))?);
        let kind = parts[2].parse()?;
        let key = percent_decode_str(parts[3]).decode_utf8().map_err(|_| bad("key"))?.into_owned();
        let raw = percent_decode_str(parts[4]).decode_utf8().map_err(|_| bad("value"))?.into_owned();
        let value = match raw.parse::<f64>() {
            Ok(v) => LogValue::Num(v),
            Err(_) => LogValue::Text(raw),
        };
        Ok(LogRecord { agent, ts_ms, kind, key, value })
    }
}

/// Reports the memory footprint attributed to a peer.
pub trait MemoryProbe: Send + Sync {
    fn bytes(&self) -> u64;
}

/// Process resident set size from `/proc/self/statm` (0 where unavailable).
#[derive(Debug, Default, Clone, Copy)]
pub struct ResidentSetProbe;

impl MemoryProbe for ResidentSetProbe {
    fn bytes(&self) -> u64 {
        std::fs::read_to_string("/proc/self/statm")
            .ok()
            .and_then(|s| s.split_whitespace().nth(1).and_then(|v| v.parse::<u64>().ok()))
            .map(|pages| pages * 4096)
            .unwrap_or(0)
    }
}

/// Constant probe, handy for deterministic runs.
#[derive(Debug, Clone, Copy)]
pub struct FixedProbe(pub u64);

impl MemoryProbe for FixedProbe {
    fn bytes(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn line_format_escapes_pipes() {
        let r = LogRecord {
            agent: PeerId(3),
            ts_ms: 17,
            kind: LogKind::Service,
            key: "global_cost".into(),
            value: LogValue::Num(12.5),
        };
        assert_eq!(r.to_line(), "17|3|SERVICE|global_cost|12.5");
        let t = LogRecord { value: LogValue::Text("a|b".into()), kind: LogKind::Event, ..r };
        assert_eq!(t.to_line(), "17|3|EVENT|global_cost|a%7Cb");
        assert_eq!(LogRecord::from_line(&t.to_line()).unwrap(), t);
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(LogRecord::from_line("1|2|SERVICE|k").is_err());
        assert!(LogRecord::from_line("x|2|SERVICE|k|v").is_err());
        assert!(LogRecord::from_line("1|2|NOPE|k|v").is_err());
    }

    proptest! {
        #[test]
        fn record_lines_round_trip(ts in any::<u64>(), agent in any::<u64>(), key in "[^\n\r]{0,20}", text in "[a-z|%]{1,12}", num in -1e9f64..1e9) {
            for value in [LogValue::Text(text.clone()), LogValue::Num(num)] {
                let r = LogRecord { agent: PeerId(agent), ts_ms: ts, kind: LogKind::Event, key: key.clone(), value };
                prop_assert_eq!(LogRecord::from_line(&r.to_line()).unwrap(), r);
            }
        }
    }
}
