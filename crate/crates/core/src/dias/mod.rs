//! Decentralized aggregation: suppliers summarize raw readings into one of
//! k possible states and push them to consumers found through gossip;
//! consumers keep duplicate-insensitive aggregates and correct them when a
//! supplier changes state or leaves.

mod aggregation;
mod bloom;
mod gossip;
mod service;

pub use aggregation::{AggregateEstimate, AggregationState, SessionMessage, SessionOutcome};
pub use bloom::BloomFilter;
pub use gossip::{gossip_round, PeerView};
pub use service::{
    DiasConfig, DiasDevice, DiasService, MSG_DIAS_ACK, MSG_DIAS_CHANGE, MSG_DIAS_CHANGE_ACK, MSG_DIAS_ESTIMATE, MSG_DIAS_GOSSIP,
    MSG_DIAS_GOSSIP_REPLY, MSG_DIAS_JOINED, MSG_DIAS_LEAVE, MSG_DIAS_QUERY, MSG_DIAS_SESSION,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiasError {
    #[error("empty set of possible states")]
    NoStates,
    #[error("non-finite state value")]
    NonFinite,
    #[error("version regression for {supplier}: recorded {recorded}, received {received}")]
    VersionRegression { supplier: String, recorded: u64, received: u64 },
    #[error("malformed: {0}")]
    Malformed(String),
}

/// Summarization alphabet, sorted ascending without duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct PossibleStates {
    states: Vec<f64>,
}

impl PossibleStates {
    /// Sorts and deduplicates the given values.
    pub fn new(mut states: Vec<f64>) -> Result<Self, DiasError> {
        if states.is_empty() {
            return Err(DiasError::NoStates);
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(DiasError::NonFinite);
        }
        states.sort_by(f64::total_cmp);
        states.dedup();
        Ok(PossibleStates { states })
    }

    pub fn values(&self) -> &[f64] {
        &self.states
    }

    pub fn k(&self) -> usize {
        self.states.len()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.states[i]
    }

    pub fn to_text(&self) -> String {
        self.states.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }

    pub fn parse(text: &str) -> Result<Self, DiasError> {
        let values = text
            .split(',')
            .filter(|v| !v.trim().is_empty())
            .map(|v| v.trim().parse::<f64>().map_err(|_| DiasError::Malformed(format!("state {v}"))))
            .collect::<Result<Vec<_>, _>>()?;
        PossibleStates::new(values)
    }
}

/// A supplier's current summarized state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectedState {
    pub state_index: usize,
    pub value: f64,
    pub version: u64,
}

/// Index of the state nearest to `raw`; on a tie the lower state wins.
pub fn summarize(raw: f64, states: &PossibleStates) -> usize {
    let mut best = 0;
    for (i, s) in states.values().iter().enumerate() {
        if (raw - s).abs() < (raw - states.values()[best]).abs() {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn summarize_examples() {
        let s = PossibleStates::new(vec![20.0, 10.0]).unwrap();
        assert_eq!(s.values(), &[10.0, 20.0]);
        assert_eq!(summarize(20.0, &s), 1);
        assert_eq!(summarize(14.0, &s), 0);
        assert_eq!(summarize(15.0, &s), 0);
        assert_eq!(summarize(15.5, &s), 1);
        assert_eq!(PossibleStates::new(vec![]), Err(DiasError::NoStates));
    }

    #[test]
    fn states_text_round_trip() {
        let s = PossibleStates::new(vec![3.0, 1.5, 3.0]).unwrap();
        assert_eq!(s.k(), 2);
        assert_eq!(PossibleStates::parse(&s.to_text()).unwrap(), s);
    }

    proptest! {
        #[test]
        fn summarize_picks_a_nearest_state(raw in -100.0f64..100.0, vals in proptest::collection::vec(-100.0f64..100.0, 1..12)) {
            let s = PossibleStates::new(vals).unwrap();
            let i = summarize(raw, &s);
            let d = (raw - s.get(i)).abs();
            prop_assert!(s.values().iter().all(|v| (raw - v).abs() >= d));
            prop_assert!(s.values()[..i].iter().all(|v| (raw - v).abs() > d));
        }
    }
}
