//! Independent checks: exhaustive and replay oracles for tiny instances and
//! the long-running soak under injected dynamics.

mod oracle;
mod soak;

pub use oracle::{
    aggregate_at, dias_oracle, epos_oracle, parse_event_log, EposOptimum, ExactAggregate, OracleResult, SupplierChange, SupplierEvent,
    MAX_AGENTS, MAX_DIM, MAX_PLANS,
};
pub use soak::{soak, SoakReport};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("instance out of bounds: {0}")]
    Bounds(String),
    #[error("malformed event log at entry {line}: {message}")]
    MalformedLog { line: usize, message: String },
}
