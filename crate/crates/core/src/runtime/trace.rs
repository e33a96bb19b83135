use std::fmt::Write as _;

use percent_encoding::{utf8_percent_encode, AsciiSet, CONTROLS};

use super::PeerId;

/// Characters escaped in the `detail` field of an exported trace line.
const DETAIL: &AsciiSet = &CONTROLS.add(b',').add(b'%').add(b'|');

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceKind {
    Deliver { from: String, msg_type: u16, seq: u64 },
    Drop { from: String, msg_type: u16, seq: u64 },
    Timer { id: u64 },
    Start,
    Stop,
    Restart,
}

impl TraceKind {
    pub fn label(&self) -> &'static str {
        match self {
            TraceKind::Deliver { .. } => "deliver",
            TraceKind::Drop { .. } => "drop",
            TraceKind::Timer { .. } => "timer",
            TraceKind::Start => "start",
            TraceKind::Stop => "stop",
            TraceKind::Restart => "restart",
        }
    }

    fn detail(&self) -> String {
        match self {
            TraceKind::Deliver { from, msg_type, seq } | TraceKind::Drop { from, msg_type, seq } => {
                format!("type={msg_type};from={from};seq={seq}")
            }
            TraceKind::Timer { id } => format!("id={id}"),
            _ => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub t_ms: u64,
    pub peer: PeerId,
    pub kind: TraceKind,
}

/// Which events a simulation keeps.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TraceFilter {
    #[default]
    All,
    /// Lifecycle events plus deliveries/drops whose type lies in the range.
    Messages { min_type: u16, max_type: u16 },
    Off,
}

impl TraceFilter {
    pub(crate) fn keeps(&self, kind: &TraceKind) -> bool {
        match self {
            TraceFilter::All => true,
            TraceFilter::Off => false,
            TraceFilter::Messages { min_type, max_type } => match kind {
                TraceKind::Deliver { msg_type, .. } | TraceKind::Drop { msg_type, .. } => {
                    (*min_type..=*max_type).contains(msg_type)
                }
                TraceKind::Timer { .. } => false,
                _ => true,
            },
        }
    }
}

/// Ordered record of everything a simulation processed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventTrace {
    pub records: Vec<TraceRecord>,
}

impl EventTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn deliveries(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| matches!(r.kind, TraceKind::Deliver { .. }))
    }

    /// Newline-delimited `timestamp_ms,peer_id,event_kind,detail`, detail
    /// percent-encoded.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let detail = r.kind.detail();
            let _ = writeln!(out, "{},{},{},{}", r.t_ms, r.peer.0, r.kind.label(), utf8_percent_encode(&detail, DETAIL));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_text().into_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_escapes_commas_in_detail() {
        let t = EventTrace {
            records: vec![TraceRecord {
                t_ms: 10,
                peer: PeerId(2),
                kind: TraceKind::Deliver { from: "a,b".into(), msg_type: 3, seq: 0 },
            }],
        };
        assert_eq!(t.to_text(), "10,2,deliver,type=3;from=a%2Cb;seq=0\n");
    }
}
