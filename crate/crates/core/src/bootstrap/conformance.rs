use std::collections::HashMap;

use super::protocol::*;
use crate::runtime::{EventTrace, PeerId, TraceKind};

/// One application agent and the service agent bound to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentPair {
    pub app: PeerId,
    pub app_addr: String,
    pub agent: PeerId,
    pub agent_addr: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConformanceReport {
    pub pairs: usize,
    /// Pairs that reached runServMsg at least once.
    pub running: usize,
    /// Segments opened by a rejoin (restart or re-registration).
    pub rejoins: usize,
    /// Rejoin segments that reached runServMsg again.
    pub rejoins_running: usize,
    pub violations: Vec<String>,
}

impl ConformanceReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

// Stage ranks in protocol order; data messages share the last rank.
const BROADCAST: u8 = 1;
const REG_DEV: u8 = 2;
const ASGN_AGN: u8 = 3;
const READY: u8 = 4;
const AGN_READY: u8 = 5;
const RUN_SERV: u8 = 6;
const DATA: u8 = 7;

#[derive(Debug, Default)]
struct PairState {
    max: u8,
    first: bool,
    rejoin: bool,
    reached_run: bool,
    ever_ran: bool,
}

/// Checks, per agent pair, that delivered protocol messages follow
/// broadcastMsg, regDevMsg, asgnAgnMsg, readyMsg, agnReadyMsg, runServMsg,
/// then any number of sensing/actuation messages. A restart of either peer,
/// or a fresh registration after the pair has registered, opens a new
/// segment in which the broadcast may be absent (the device already knows
/// the gateway).
pub fn check_protocol_order(trace: &EventTrace, gateway: PeerId, pairs: &[AgentPair]) -> ConformanceReport {
    let mut report = ConformanceReport { pairs: pairs.len(), ..Default::default() };
    let mut states: Vec<PairState> = pairs.iter().map(|_| PairState { first: true, ..Default::default() }).collect();
    let mut by_app: HashMap<PeerId, usize> = HashMap::new();
    let mut by_agent: HashMap<PeerId, usize> = HashMap::new();
    let mut by_app_addr: HashMap<&str, usize> = HashMap::new();
    let mut by_agent_addr: HashMap<&str, usize> = HashMap::new();
    for (i, p) in pairs.iter().enumerate() {
        by_app.insert(p.app, i);
        by_agent.insert(p.agent, i);
        by_app_addr.insert(p.app_addr.as_str(), i);
        by_agent_addr.insert(p.agent_addr.as_str(), i);
    }

    for rec in &trace.records {
        let (idx, rank) = match &rec.kind {
            TraceKind::Restart => {
                for i in [by_app.get(&rec.peer), by_agent.get(&rec.peer)].into_iter().flatten() {
                    let s = &mut states[*i];
                    if s.max > 0 {
                        open_segment(s, &mut report);
                    }
                }
                continue;
            }
            TraceKind::Deliver { from, msg_type, .. } => {
                let from = from.as_str();
                if rec.peer == gateway {
                    match *msg_type {
                        MSG_REG_DEV => (by_app_addr.get(from), REG_DEV),
                        MSG_AGN_READY => (by_agent_addr.get(from), AGN_READY),
                        _ => continue,
                    }
                } else if let Some(i) = by_app.get(&rec.peer) {
                    match *msg_type {
                        MSG_BROADCAST => (Some(i), BROADCAST),
                        MSG_ASGN_AGN => (Some(i), ASGN_AGN),
                        MSG_SENSING | MSG_ACTUATION => (Some(i), DATA),
                        _ => continue,
                    }
                } else if let Some(i) = by_agent.get(&rec.peer) {
                    match *msg_type {
                        MSG_READY => (Some(i), READY),
                        MSG_RUN_SERV => (Some(i), RUN_SERV),
                        MSG_SENSING => (Some(i), DATA),
                        _ => continue,
                    }
                } else {
                    continue;
                }
            }
            _ => continue,
        };
        let Some(&i) = idx else { continue };
        let s = &mut states[i];
        if rank == REG_DEV && s.max >= REG_DEV {
            open_segment(s, &mut report);
        }
        let needed = match rank {
            BROADCAST => 0,
            REG_DEV if s.first => BROADCAST,
            REG_DEV => 0,
            r => r - 1,
        };
        let in_order = s.max >= needed && (rank >= s.max || (rank == BROADCAST && s.max == 0));
        if !in_order {
            report.violations.push(format!(
                "t={} pair (app {}, agent {}): stage {} after stage {}",
                rec.t_ms, pairs[i].app, pairs[i].agent, stage_name(rank), stage_name(s.max)
            ));
        }
        s.max = s.max.max(rank);
        if rank == RUN_SERV && !s.reached_run {
            s.reached_run = true;
            s.ever_ran = true;
            if s.rejoin {
                report.rejoins_running += 1;
            }
        }
    }
    report.running = states.iter().filter(|s| s.ever_ran).count();
    report
}

fn open_segment(s: &mut PairState, report: &mut ConformanceReport) {
    s.max = 0;
    s.first = false;
    s.rejoin = true;
    s.reached_run = false;
    report.rejoins += 1;
}

fn stage_name(rank: u8) -> &'static str {
    match rank {
        0 => "start",
        BROADCAST => "broadcastMsg",
        REG_DEV => "regDevMsg",
        ASGN_AGN => "asgnAgnMsg",
        READY => "readyMsg",
        AGN_READY => "agnReadyMsg",
        RUN_SERV => "runServMsg",
        _ => "sensingMsg/actuationMsg",
    }
}
