//! Decentralized multi-agent testbed.

pub mod bootstrap;
pub mod conformance;
pub mod data;
pub mod dias;
pub mod dynamics;
pub mod epos;
pub mod messaging;
pub mod monitoring;
pub mod runtime;
pub mod scenario;
