//! Transport layer: addresses, envelopes, the framed wire format and the
//! bounded inbound/outbound queues every peer owns.
//!
//! The same [`Envelope`] and [`encode_frame`] / [`decode_frame`] pair is
//! used by the in-memory simulator and by the TCP transport, so a message
//! that round-trips in simulation round-trips on the wire.

mod frame;
mod queue;
pub mod tcp;

pub use frame::{decode_frame, encode_frame, FrameReader, MAX_BODY_LEN};
pub use queue::{DropPolicy, MessageQueue, Offer, QueueStats, SharedQueue};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::runtime::PeerId;

/// Default queue capacity for both directions.
pub const DEFAULT_QUEUE_CAPACITY: usize = 10_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MessagingError {
    #[error("incomplete frame")]
    IncompleteFrame,
    #[error("body of {0} bytes exceeds the 16 MiB limit")]
    OversizeBody(usize),
    #[error("address of {0} bytes does not fit a 16-bit length prefix")]
    OversizeAddress(usize),
    #[error("address is not valid UTF-8")]
    InvalidUtf8,
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("invalid address '{0}'")]
    InvalidAddress(String),
    #[error("recipient mismatch: envelope addressed to {envelope}, send targeted {target}")]
    RecipientMismatch { envelope: String, target: String },
    #[error("peer is not running")]
    NotRunning,
}

/// Where a peer can be reached.
///
/// Simulated peers are addressed as `sim:<peer id>`, live peers as
/// `host:port`. The string form is what travels on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NetworkAddress(String);

/// Parsed view of a [`NetworkAddress`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AddressKind {
    Sim(PeerId),
    Live { host: String, port: u16 },
    Opaque,
}

impl NetworkAddress {
    pub fn sim(id: PeerId) -> Self {
        NetworkAddress(format!("sim:{}", id.0))
    }

    pub fn live(host: impl Into<String>, port: u16) -> Self {
        NetworkAddress(format!("{}:{}", host.into(), port))
    }

    /// Wraps an arbitrary string without validation. Used by the frame
    /// decoder, which must accept whatever a sender put on the wire.
    pub fn from_raw(raw: impl Into<String>) -> Self {
        NetworkAddress(raw.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn kind(&self) -> AddressKind {
        if let Some(id) = self.0.strip_prefix("sim:") {
            if let Ok(v) = id.parse::<u64>() {
                return AddressKind::Sim(PeerId(v));
            }
        }
        match self.0.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() => match port.parse::<u16>() {
                Ok(port) => AddressKind::Live { host: host.to_string(), port },
                Err(_) => AddressKind::Opaque,
            },
            _ => AddressKind::Opaque,
        }
    }

    pub fn sim_peer(&self) -> Option<PeerId> {
        match self.kind() {
            AddressKind::Sim(id) => Some(id),
            _ => None,
        }
    }
}

impl fmt::Display for NetworkAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for NetworkAddress {
    type Err = MessagingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let addr = NetworkAddress(s.to_string());
        match addr.kind() {
            AddressKind::Opaque => Err(MessagingError::InvalidAddress(s.to_string())),
            _ => Ok(addr),
        }
    }
}

/// A framed message. `seq` is a per-(sender, recipient) counter assigned by
/// the sending peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub msg_type: u16,
    pub sender: NetworkAddress,
    pub recipient: NetworkAddress,
    pub seq: u64,
    pub body: Vec<u8>,
}

impl Envelope {
    pub fn new(
        msg_type: u16,
        sender: NetworkAddress,
        recipient: NetworkAddress,
        seq: u64,
        body: Vec<u8>,
    ) -> Self {
        Envelope { msg_type, sender, recipient, seq, body }
    }

    pub fn body_str(&self) -> Option<&str> {
        std::str::from_utf8(&self.body).ok()
    }
}

/// Outcome of handing an envelope to the transport.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendStatus {
    Enqueued,
    Dropped,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendReceipt {
    pub seq: u64,
    pub status: SendStatus,
}

impl SendReceipt {
    pub fn is_dropped(&self) -> bool {
        self.status == SendStatus::Dropped
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn address_round_trips_through_host_port() {
        let a: NetworkAddress = "127.0.0.1:9000".parse().unwrap();
        assert_eq!(a.kind(), AddressKind::Live { host: "127.0.0.1".into(), port: 9000 });
        assert_eq!(a.to_string().parse::<NetworkAddress>().unwrap(), a);
        assert_eq!(NetworkAddress::live("localhost", 80).as_str(), "localhost:80");
    }

    #[test]
    fn sim_address_carries_peer_id() {
        let a = NetworkAddress::sim(PeerId(42));
        assert_eq!(a.sim_peer(), Some(PeerId(42)));
        assert_eq!(a.as_str().parse::<NetworkAddress>().unwrap(), a);
    }

    #[test]
    fn garbage_address_is_rejected() {
        assert!("nohost".parse::<NetworkAddress>().is_err());
        assert!("host:99999".parse::<NetworkAddress>().is_err());
        assert!(":80".parse::<NetworkAddress>().is_err());
    }
}
