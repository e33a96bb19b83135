//! Self-integration protocol binding application agents (device side) to
//! service agents through a data-agnostic gateway.

mod agents;
mod conformance;
mod gateway;
mod protocol;

pub use agents::{AgentLink, ApplicationAgent, Device, Operator, Service, ServiceAgent, StaticDevice};
pub use conformance::{check_protocol_order, AgentPair, ConformanceReport};
pub use gateway::{AgentSlot, GatewayPeerlet, GatewayPhase, GatewayState, Outbound};
pub use protocol::*;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BootstrapError {
    #[error("operation not allowed in phase {0}")]
    WrongPhase(&'static str),
    #[error("capacity")]
    Capacity,
    #[error("unknown service {0:?}")]
    UnknownService(String),
    #[error("unknown agent {0}")]
    UnknownAgent(String),
    #[error("service needs {needed} agents, {assigned} assigned")]
    NotEnoughAgents { needed: usize, assigned: usize },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("service is not running")]
    NotRunning,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("transport: {0}")]
    Transport(String),
}
