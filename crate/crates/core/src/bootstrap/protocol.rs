use std::collections::BTreeMap;
use std::fmt::Write as _;

use percent_encoding::{percent_decode_str, percent_encode, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};

use super::BootstrapError;
use crate::messaging::NetworkAddress;

pub const MSG_BROADCAST: u16 = 1;
pub const MSG_REG_DEV: u16 = 2;
pub const MSG_ASGN_AGN: u16 = 3;
pub const MSG_SERV_REQ: u16 = 4;
pub const MSG_READY: u16 = 5;
pub const MSG_AGN_READY: u16 = 6;
pub const MSG_RUN_SERV: u16 = 7;
pub const MSG_SENSING: u16 = 8;
pub const MSG_ACTUATION: u16 = 9;
/// Service agent tells the gateway its part of the service has finished.
pub const MSG_SERV_DONE: u16 = 10;
/// Gateway notice to the operator or application agents (abort, done).
pub const MSG_NOTICE: u16 = 11;

const VALUE: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_').remove(b'.').remove(b':').remove(b'/');

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DeviceInfo {
    pub device_type: String,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceRegistration {
    pub dev_addr: NetworkAddress,
    pub dev_info: DeviceInfo,
    pub serv_info: String,
}

/// Execution metadata a service request carries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ServiceMetadata {
    pub agent_count: usize,
    pub device_count: usize,
    pub locations: Vec<String>,
    pub params: BTreeMap<String, String>,
}

impl ServiceMetadata {
    pub fn new(agent_count: usize) -> Self {
        ServiceMetadata { agent_count, device_count: agent_count, ..Default::default() }
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }

    pub fn with_param(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceRequest {
    pub serv_info: String,
    pub serv_md: ServiceMetadata,
}

/// Bytes the protocol layer carries but never interprets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OpaqueBody(Vec<u8>);

impl OpaqueBody {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        OpaqueBody(bytes.into())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NoticeEvent {
    Aborted,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProtocolMessage {
    Broadcast { gw_addr: NetworkAddress, serv_info: String },
    RegDev(DeviceRegistration),
    AsgnAgn { agn_addr: NetworkAddress },
    ServReq(ServiceRequest),
    Ready { serv_info: String, serv_md: ServiceMetadata },
    AgnReady { agn_addr: NetworkAddress, serv_info: String },
    RunServ { serv_info: String },
    Sensing { serv_info: String, data: OpaqueBody },
    Actuation { serv_info: String, actuation: OpaqueBody },
    ServDone { agn_addr: NetworkAddress, serv_info: String },
    Notice { event: NoticeEvent, serv_info: String, reason: String },
}

impl ProtocolMessage {
    pub fn msg_type(&self) -> u16 {
        match self {
            ProtocolMessage::Broadcast { .. } => MSG_BROADCAST,
            ProtocolMessage::RegDev(_) => MSG_REG_DEV,
            ProtocolMessage::AsgnAgn { .. } => MSG_ASGN_AGN,
            ProtocolMessage::ServReq(_) => MSG_SERV_REQ,
            ProtocolMessage::Ready { .. } => MSG_READY,
            ProtocolMessage::AgnReady { .. } => MSG_AGN_READY,
            ProtocolMessage::RunServ { .. } => MSG_RUN_SERV,
            ProtocolMessage::Sensing { .. } => MSG_SENSING,
            ProtocolMessage::Actuation { .. } => MSG_ACTUATION,
            ProtocolMessage::ServDone { .. } => MSG_SERV_DONE,
            ProtocolMessage::Notice { .. } => MSG_NOTICE,
        }
    }

    pub fn serv_info(&self) -> Option<&str> {
        match self {
            ProtocolMessage::AsgnAgn { .. } => None,
            ProtocolMessage::Broadcast { serv_info, .. }
            | ProtocolMessage::Ready { serv_info, .. }
            | ProtocolMessage::AgnReady { serv_info, .. }
            | ProtocolMessage::RunServ { serv_info }
            | ProtocolMessage::Sensing { serv_info, .. }
            | ProtocolMessage::Actuation { serv_info, .. }
            | ProtocolMessage::ServDone { serv_info, .. }
            | ProtocolMessage::Notice { serv_info, .. } => Some(serv_info),
            ProtocolMessage::RegDev(r) => Some(&r.serv_info),
            ProtocolMessage::ServReq(r) => Some(&r.serv_info),
        }
    }

    /// UTF-8 `field=value` lines, values percent-encoded.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Fields::default();
        match self {
            ProtocolMessage::Broadcast { gw_addr, serv_info } => {
                w.put("GWAddr", gw_addr.as_str());
                w.put("servInfo", serv_info);
            }
            ProtocolMessage::RegDev(r) => {
                w.put("devAddr", r.dev_addr.as_str());
                w.put("devInfo.device_type", &r.dev_info.device_type);
                w.put("devInfo.location", &r.dev_info.location);
                w.put("servInfo", &r.serv_info);
            }
            ProtocolMessage::AsgnAgn { agn_addr } => w.put("agnAddr", agn_addr.as_str()),
            ProtocolMessage::ServReq(r) => {
                w.put("servInfo", &r.serv_info);
                w.metadata(&r.serv_md);
            }
            ProtocolMessage::Ready { serv_info, serv_md } => {
                w.put("servInfo", serv_info);
                w.metadata(serv_md);
            }
            ProtocolMessage::AgnReady { agn_addr, serv_info } | ProtocolMessage::ServDone { agn_addr, serv_info } => {
                w.put("agnAddr", agn_addr.as_str());
                w.put("servInfo", serv_info);
            }
            ProtocolMessage::RunServ { serv_info } => w.put("servInfo", serv_info),
            ProtocolMessage::Sensing { serv_info, data } => {
                w.put("servInfo", serv_info);
                w.bytes("data", data.as_bytes());
            }
            ProtocolMessage::Actuation { serv_info, actuation } => {
                w.put("servInfo", serv_info);
                w.bytes("actuation", actuation.as_bytes());
            }
            ProtocolMessage::Notice { event, serv_info, reason } => {
                w.put("event", if *event == NoticeEvent::Aborted { "aborted" } else { "done" });
                w.put("servInfo", serv_info);
                w.put("reason", reason);
            }
        }
        w.0.into_bytes()
    }

    pub fn decode(msg_type: u16, body: &[u8]) -> Result<ProtocolMessage, BootstrapError> {
        let f = Parsed::parse(body)?;
        let addr = |name: &str| f.get(name).map(NetworkAddress::from_raw);
        Ok(match msg_type {
            MSG_BROADCAST => ProtocolMessage::Broadcast { gw_addr: addr("GWAddr")?, serv_info: f.get("servInfo")? },
            MSG_REG_DEV => ProtocolMessage::RegDev(DeviceRegistration {
                dev_addr: addr("devAddr")?,
                dev_info: DeviceInfo {
                    device_type: f.get("devInfo.device_type")?,
                    location: f.get("devInfo.location")?,
                },
                serv_info: f.get("servInfo")?,
            }),
            MSG_ASGN_AGN => ProtocolMessage::AsgnAgn { agn_addr: addr("agnAddr")? },
            MSG_SERV_REQ => ProtocolMessage::ServReq(ServiceRequest { serv_info: f.get("servInfo")?, serv_md: f.metadata()? }),
            MSG_READY => ProtocolMessage::Ready { serv_info: f.get("servInfo")?, serv_md: f.metadata()? },
            MSG_AGN_READY => ProtocolMessage::AgnReady { agn_addr: addr("agnAddr")?, serv_info: f.get("servInfo")? },
            MSG_RUN_SERV => ProtocolMessage::RunServ { serv_info: f.get("servInfo")? },
            MSG_SENSING => ProtocolMessage::Sensing { serv_info: f.get("servInfo")?, data: OpaqueBody(f.bytes("data")?) },
            MSG_ACTUATION => {
                ProtocolMessage::Actuation { serv_info: f.get("servInfo")?, actuation: OpaqueBody(f.bytes("actuation")?) }
            }
            MSG_SERV_DONE => ProtocolMessage::ServDone { agn_addr: addr("agnAddr")?, serv_info: f.get("servInfo")? },
            MSG_NOTICE => ProtocolMessage::Notice {
                event: match f.get("event")?.as_str() {
                    "aborted" => NoticeEvent::Aborted,
                    "done" => NoticeEvent::Done,
                    other => return Err(BootstrapError::Malformed(format!("unknown notice {other}"))),
                },
                serv_info: f.get("servInfo")?,
                reason: f.get("reason")?,
            },
            other => return Err(BootstrapError::Malformed(format!("not a protocol message type: {other}"))),
        })
    }
}

#[derive(Default)]
struct Fields(String);

impl Fields {
    fn put(&mut self, name: &str, value: &str) {
        let _ = writeln!(self.0, "{name}={}", utf8_percent_encode(value, VALUE));
    }

    fn bytes(&mut self, name: &str, value: &[u8]) {
        let _ = writeln!(self.0, "{name}={}", percent_encode(value, VALUE));
    }

    fn metadata(&mut self, md: &ServiceMetadata) {
        self.put("servMD.agent_count", &md.agent_count.to_string());
        self.put("servMD.device_count", &md.device_count.to_string());
        let locs: Vec<String> = md.locations.iter().map(|l| utf8_percent_encode(l, VALUE).to_string()).collect();
        let _ = writeln!(self.0, "servMD.locations={}", locs.join(","));
        for (k, v) in &md.params {
            self.put(&format!("servMD.params.{}", utf8_percent_encode(k, VALUE)), v);
        }
    }
}

struct Parsed(BTreeMap<String, String>);

impl Parsed {
    fn parse(body: &[u8]) -> Result<Parsed, BootstrapError> {
        let text = std::str::from_utf8(body).map_err(|_| BootstrapError::Malformed("body is not UTF-8".into()))?;
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| BootstrapError::Malformed(format!("no '=' in {line}")))?;
            map.insert(k.to_string(), v.to_string());
        }
        Ok(Parsed(map))
    }

    fn raw(&self, name: &str) -> Result<&str, BootstrapError> {
        self.0.get(name).map(String::as_str).ok_or_else(|| BootstrapError::Malformed(format!("missing field {name}")))
    }

    fn get(&self, name: &str) -> Result<String, BootstrapError> {
        decode_text(self.raw(name)?)
    }

    fn bytes(&self, name: &str) -> Result<Vec<u8>, BootstrapError> {
        Ok(percent_decode_str(self.raw(name)?).collect())
    }

    fn metadata(&self) -> Result<ServiceMetadata, BootstrapError> {
        let num = |name: &str| -> Result<usize, BootstrapError> {
            self.get(name)?.parse().map_err(|_| BootstrapError::Malformed(format!("bad number in {name}")))
        };
        let locations = self
            .raw("servMD.locations")?
            .split(',')
            .filter(|l| !l.is_empty())
            .map(decode_text)
            .collect::<Result<Vec<_>, _>>()?;
        let mut params = BTreeMap::new();
        for (k, v) in &self.0 {
            if let Some(key) = k.strip_prefix("servMD.params.") {
                params.insert(decode_text(key)?, decode_text(v)?);
            }
        }
        Ok(ServiceMetadata {
            agent_count: num("servMD.agent_count")?,
            device_count: num("servMD.device_count")?,
            locations,
            params,
        })
    }
}

fn decode_text(s: &str) -> Result<String, BootstrapError> {
    percent_decode_str(s)
        .decode_utf8()
        .map(|c| c.into_owned())
        .map_err(|_| BootstrapError::Malformed("invalid UTF-8 in field".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn samples() -> Vec<ProtocolMessage> {
        let a = NetworkAddress::from_raw("127.0.0.1:9000");
        let md = ServiceMetadata {
            agent_count: 3,
            device_count: 3,
            locations: vec!["zürich".into(), "a,b".into()],
            params: [("agents".to_string(), "x=1\ny".to_string())].into_iter().collect(),
        };
        vec![
            ProtocolMessage::Broadcast { gw_addr: a.clone(), serv_info: "epos".into() },
            ProtocolMessage::RegDev(DeviceRegistration {
                dev_addr: a.clone(),
                dev_info: DeviceInfo { device_type: "ev".into(), location: "l=1".into() },
                serv_info: "epos".into(),
            }),
            ProtocolMessage::AsgnAgn { agn_addr: a.clone() },
            ProtocolMessage::ServReq(ServiceRequest { serv_info: "epos".into(), serv_md: md.clone() }),
            ProtocolMessage::Ready { serv_info: "epos".into(), serv_md: ServiceMetadata::new(1) },
            ProtocolMessage::AgnReady { agn_addr: a.clone(), serv_info: "epos".into() },
            ProtocolMessage::RunServ { serv_info: "epos".into() },
            ProtocolMessage::Sensing { serv_info: "dias".into(), data: OpaqueBody::new(vec![0u8, 10, 61, 255]) },
            ProtocolMessage::Actuation { serv_info: "epos".into(), actuation: OpaqueBody::new(b"2".to_vec()) },
            ProtocolMessage::ServDone { agn_addr: a, serv_info: "epos".into() },
            ProtocolMessage::Notice { event: NoticeEvent::Aborted, serv_info: "epos".into(), reason: "timeout".into() },
        ]
    }

    #[test]
    fn every_variant_round_trips() {
        for m in samples() {
            let back = ProtocolMessage::decode(m.msg_type(), &m.encode()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn field_names_on_the_wire() {
        let m = ProtocolMessage::Broadcast { gw_addr: NetworkAddress::from_raw("sim:0"), serv_info: "epos".into() };
        assert_eq!(String::from_utf8(m.encode()).unwrap(), "GWAddr=sim:0\nservInfo=epos\n");
        assert_eq!(m.msg_type(), 1);
    }

    #[test]
    fn only_assignment_lacks_serv_info() {
        for m in samples() {
            assert_eq!(m.serv_info().is_none(), matches!(m, ProtocolMessage::AsgnAgn { .. }));
        }
    }

    #[test]
    fn missing_fields_rejected() {
        assert!(ProtocolMessage::decode(MSG_RUN_SERV, b"").is_err());
        assert!(ProtocolMessage::decode(MSG_RUN_SERV, b"junk").is_err());
        assert!(ProtocolMessage::decode(77, b"servInfo=x").is_err());
    }

    proptest! {
        #[test]
        fn opaque_bodies_round_trip(data in proptest::collection::vec(any::<u8>(), 0..256), info in "\\PC{0,16}") {
            let m = ProtocolMessage::Sensing { serv_info: info, data: OpaqueBody::new(data) };
            prop_assert_eq!(ProtocolMessage::decode(MSG_SENSING, &m.encode()).unwrap(), m);
        }
    }
}
