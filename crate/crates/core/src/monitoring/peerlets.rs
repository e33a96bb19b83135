use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, CONTROLS};

use super::{LogGateway, LogKind, LogRecord, MonitoringError};
use crate::messaging::{Envelope, NetworkAddress};
use crate::runtime::{Context, PeerId, Peerlet, TimerId};

pub const MSG_LOG: u16 = 100;
pub const MSG_LOG_REJECT: u16 = 101;

const HEADER: &AsciiSet = &CONTROLS.add(b',').add(b'%').add(b'=');

/// One agent-to-gateway transfer: credentials, optional schema declaration
/// and any number of records.
#[derive(Debug, Clone, PartialEq)]
pub struct LogBatch {
    pub token: String,
    pub agent: PeerId,
    pub schema: Vec<String>,
    pub records: Vec<LogRecord>,
}

pub fn encode_batch(batch: &LogBatch) -> Vec<u8> {
    let mut out = format!("token={}\nagent={}\n", utf8_percent_encode(&batch.token, HEADER), batch.agent.0);
    if !batch.schema.is_empty() {
        let keys: Vec<String> = batch.schema.iter().map(|k| utf8_percent_encode(k, HEADER).to_string()).collect();
        out.push_str(&format!("schema={}\n", keys.join(",")));
    }
    for r in &batch.records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out.into_bytes()
}

pub fn decode_batch(body: &[u8]) -> Result<LogBatch, MonitoringError> {
    let text = std::str::from_utf8(body).map_err(|_| MonitoringError::Malformed("batch is not UTF-8".into()))?;
    let decode = |s: &str| percent_decode_str(s).decode_utf8().map(|c| c.into_owned());
    let mut lines = text.lines();
    let token = lines
        .next()
        .and_then(|l| l.strip_prefix("token="))
        .and_then(|t| decode(t).ok())
        .ok_or_else(|| MonitoringError::Malformed("missing token".into()))?;
    let agent = lines
        .next()
        .and_then(|l| l.strip_prefix("agent="))
        .and_then(|a| a.parse().ok())
        .map(PeerId)
        .ok_or_else(|| MonitoringError::Malformed("missing agent".into()))?;
    let mut batch = LogBatch { token, agent, schema: Vec::new(), records: Vec::new() };
    for line in lines {
        if let Some(keys) = line.strip_prefix("schema=") {
            for k in keys.split(',').filter(|k| !k.is_empty()) {
                batch.schema.push(decode(k).map_err(|_| MonitoringError::Malformed("schema key".into()))?);
            }
        } else if !line.is_empty() {
            batch.records.push(LogRecord::from_line(line)?);
        }
    }
    Ok(batch)
}

/// Agent side of the logging pipeline. Drains the peer's local log buffer
/// to the gateway on a period, runs the memory logger, and counts gateway
/// rejections.
#[derive(Debug, Clone)]
pub struct MonitoringPeerlet {
    gateway: NetworkAddress,
    token: String,
    schema: Vec<String>,
    flush_period_ms: u64,
    batch_max: usize,
    memory_period_ms: Option<u64>,
    flush_timer: Option<TimerId>,
    memory_timer: Option<TimerId>,
    pub batches_sent: u64,
    pub records_sent: u64,
    pub rejections: u64,
}

impl MonitoringPeerlet {
    pub fn new(gateway: NetworkAddress, token: impl Into<String>) -> Self {
        MonitoringPeerlet {
            gateway,
            token: token.into(),
            schema: Vec::new(),
            flush_period_ms: 100,
            batch_max: 256,
            memory_period_ms: None,
            flush_timer: None,
            memory_timer: None,
            batches_sent: 0,
            records_sent: 0,
            rejections: 0,
        }
    }

    pub fn with_schema(mut self, keys: &[&str]) -> Self {
        self.schema = keys.iter().map(|k| k.to_string()).collect();
        self
    }

    pub fn with_flush_period(mut self, ms: u64) -> Self {
        self.flush_period_ms = ms.max(1);
        self
    }

    pub fn with_batch_max(mut self, n: usize) -> Self {
        self.batch_max = n.max(1);
        self
    }

    pub fn with_memory_period(mut self, ms: u64) -> Self {
        self.memory_period_ms = Some(ms.max(1));
        self
    }

    fn ship(&mut self, ctx: &mut Context<'_>, schema: Vec<String>, records: Vec<LogRecord>) {
        if schema.is_empty() && records.is_empty() {
            return;
        }
        let n = records.len() as u64;
        let batch = LogBatch { token: self.token.clone(), agent: ctx.id(), schema, records };
        if ctx.send(&self.gateway, MSG_LOG, encode_batch(&batch)).is_ok() {
            self.batches_sent += 1;
            self.records_sent += n;
        }
    }

    fn drain(&mut self, ctx: &mut Context<'_>) {
        while ctx.pending_logs() > 0 {
            let records = ctx.take_logs(self.batch_max);
            self.ship(ctx, Vec::new(), records);
        }
    }
}

impl Peerlet for MonitoringPeerlet {
    fn start(&mut self, ctx: &mut Context<'_>) {
        let schema = self.schema.clone();
        self.ship(ctx, schema, Vec::new());
        self.flush_timer = ctx.schedule_timer(self.flush_period_ms, true).ok();
        if let Some(p) = self.memory_period_ms {
            self.memory_timer = ctx.schedule_timer(p, true).ok();
        }
    }

    fn stop(&mut self, ctx: &mut Context<'_>) {
        self.drain(ctx);
    }

    fn handle_message(&mut self, _ctx: &mut Context<'_>, env: &Envelope) {
        if env.msg_type == MSG_LOG_REJECT && env.sender == self.gateway {
            self.rejections += 1;
        }
    }

    fn handle_timer(&mut self, ctx: &mut Context<'_>, timer: TimerId) {
        if self.memory_timer.is_some_and(|t| t.id == timer.id) {
            if let Some(bytes) = ctx.memory_bytes() {
                ctx.log(LogKind::Memory, "memory_bytes", bytes);
            }
        } else if self.flush_timer.is_some_and(|t| t.id == timer.id) {
            self.drain(ctx);
        }
    }
}

/// Hosts a [`LogGateway`] on a peer: accepts batches on [`MSG_LOG`],
/// answers bad credentials with [`MSG_LOG_REJECT`] and flushes on a period.
pub struct LogGatewayPeerlet {
    gateway: LogGateway,
    commit_period_ms: u64,
    malformed: u64,
}

impl LogGatewayPeerlet {
    pub fn new(gateway: LogGateway) -> Self {
        LogGatewayPeerlet { gateway, commit_period_ms: 500, malformed: 0 }
    }

    pub fn with_commit_period(mut self, ms: u64) -> Self {
        self.commit_period_ms = ms.max(1);
        self
    }

    pub fn gateway(&self) -> &LogGateway {
        &self.gateway
    }

    pub fn gateway_mut(&mut self) -> &mut LogGateway {
        &mut self.gateway
    }

    pub fn malformed(&self) -> u64 {
        self.malformed
    }
}

impl Peerlet for LogGatewayPeerlet {
    fn init(&mut self, ctx: &mut Context<'_>) {
        self.gateway.set_agent(ctx.id());
    }

    fn start(&mut self, ctx: &mut Context<'_>) {
        let _ = ctx.schedule_timer(self.commit_period_ms, true);
    }

    fn stop(&mut self, _ctx: &mut Context<'_>) {
        self.gateway.flush();
    }

    fn handle_message(&mut self, ctx: &mut Context<'_>, env: &Envelope) {
        if env.msg_type != MSG_LOG {
            return;
        }
        let batch = match decode_batch(&env.body) {
            Ok(b) => b,
            Err(e) => {
                self.malformed += 1;
                log::warn!("log gateway: {e}");
                return;
            }
        };
        let mut result = Ok(());
        if !batch.schema.is_empty() {
            result = self.gateway.register_schema(&batch.token, batch.agent, &batch.schema);
        }
        if result.is_ok() && !batch.records.is_empty() {
            result = self.gateway.submit(&batch.token, batch.records).map(|_| ());
        }
        if result == Err(MonitoringError::Unauthorized) {
            let _ = ctx.send(&env.sender, MSG_LOG_REJECT, b"unauthorized".to_vec());
        }
    }

    fn handle_timer(&mut self, _ctx: &mut Context<'_>, _timer: TimerId) {
        self.gateway.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitoring::{LogValue, MemoryStore, QueryFilter};
    use crate::runtime::{create_peer, ExecutionMode, SimConfig, Simulation};

    #[test]
    fn batch_codec_round_trips() {
        let b = LogBatch {
            token: "a=b,c".into(),
            agent: PeerId(7),
            schema: vec!["x,y".into(), "z".into()],
            records: vec![LogRecord { agent: PeerId(7), ts_ms: 3, kind: LogKind::Service, key: "k".into(), value: LogValue::Num(1.5) }],
        };
        assert_eq!(decode_batch(&encode_batch(&b)).unwrap(), b);
        assert!(decode_batch(b"agent=1\n").is_err());
    }

    struct Emitter {
        n: u64,
    }

    impl Peerlet for Emitter {
        fn start(&mut self, ctx: &mut Context<'_>) {
            let _ = ctx.schedule_timer(10, true);
        }
        fn handle_timer(&mut self, ctx: &mut Context<'_>, _t: TimerId) {
            if self.n > 0 {
                self.n -= 1;
                ctx.log(LogKind::Service, "global_cost", 12.5);
            }
        }
    }

    fn gateway_peer(sim: &mut Simulation, token: &str) -> NetworkAddress {
        let gw = LogGateway::new(Box::new(MemoryStore::default()), 2, [token.to_string()]);
        let p = create_peer(PeerId(0), ExecutionMode::Sim, vec![Box::new(LogGatewayPeerlet::new(gw).with_commit_period(50))]).unwrap();
        let addr = p.address().clone();
        sim.add_peer(p).unwrap();
        addr
    }

    #[test]
    fn records_reach_the_store_exactly_once() {
        let mut sim = Simulation::new(SimConfig { seed: 1, ..Default::default() });
        let gw = gateway_peer(&mut sim, "tok");
        for id in 1..=3 {
            let mon = MonitoringPeerlet::new(gw.clone(), "tok").with_schema(&["global_cost"]).with_flush_period(25);
            let p = create_peer(PeerId(id), ExecutionMode::Sim, vec![Box::new(Emitter { n: 5 }), Box::new(mon)]).unwrap();
            sim.add_peer(p).unwrap();
        }
        sim.run_until(1_000);
        let gwp = sim.peer_mut(PeerId(0)).unwrap().peerlet_mut::<LogGatewayPeerlet>().unwrap();
        let rows = gwp.gateway_mut().flush_and_query(&QueryFilter::default()).unwrap();
        assert_eq!(rows.len(), 15);
        assert!(rows.iter().all(|r| r.key == "global_cost" && r.value == LogValue::Num(12.5)));
        assert!(gwp.gateway().schema(PeerId(2)).is_some());
    }

    #[test]
    fn wrong_token_counted_by_agent() {
        let mut sim = Simulation::new(SimConfig { seed: 1, ..Default::default() });
        let gw = gateway_peer(&mut sim, "tok");
        let mon = MonitoringPeerlet::new(gw, "bad").with_flush_period(25);
        let p = create_peer(PeerId(1), ExecutionMode::Sim, vec![Box::new(Emitter { n: 2 }), Box::new(mon)]).unwrap();
        sim.add_peer(p).unwrap();
        sim.run_until(200);
        let rejections = sim.peer(PeerId(1)).unwrap().peerlet::<MonitoringPeerlet>().unwrap().rejections;
        assert!(rejections >= 1);
        let gwp = sim.peer_mut(PeerId(0)).unwrap().peerlet_mut::<LogGatewayPeerlet>().unwrap();
        assert!(gwp.gateway_mut().flush_and_query(&QueryFilter::default()).unwrap().is_empty());
    }
}
