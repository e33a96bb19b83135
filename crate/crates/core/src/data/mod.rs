//! Synthetic datasets: EV-style charging plans and a bursty per-source news
//! count stream, plus an HTTP client for live count endpoints.

mod news;

pub use news::{NewsSource, NewsStreamSpec, NewsTick, SyntheticNews};

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dias::PossibleStates;
use crate::epos::{write_plan_file, Plan, PlanSet};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown horizon {0:?}")]
    UnknownHorizon(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("empty window")]
    EmptyWindow,
    #[error("endpoint unavailable and no earlier values: {0}")]
    Skipped(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Planning horizon; one value per minute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    D1,
    D3,
    D7,
    /// Reduced dimension for desk-scale runs; treated as one day.
    Reduced(usize),
}

impl Horizon {
    pub fn dim(&self) -> usize {
        match self {
            Horizon::D1 => 1440,
            Horizon::D3 => 4320,
            Horizon::D7 => 10080,
            Horizon::Reduced(d) => *d,
        }
    }

    pub fn days(&self) -> usize {
        match self {
            Horizon::D3 => 3,
            Horizon::D7 => 7,
            _ => 1,
        }
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Horizon::D1 => f.write_str("D1"),
            Horizon::D3 => f.write_str("D3"),
            Horizon::D7 => f.write_str("D7"),
            Horizon::Reduced(d) => write!(f, "reduced:{d}"),
        }
    }
}

impl FromStr for Horizon {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "D1" | "1" => Ok(Horizon::D1),
            "D3" | "3" => Ok(Horizon::D3),
            "D7" | "7" => Ok(Horizon::D7),
            other => other
                .strip_prefix("REDUCED:")
                .and_then(|d| d.parse::<usize>().ok())
                .filter(|d| *d > 0)
                .map(Horizon::Reduced)
                .ok_or_else(|| DataError::UnknownHorizon(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanDatasetSpec {
    pub num_agents: usize,
    pub plans_per_agent: usize,
    pub horizon: Horizon,
    pub seed: u64,
}

/// One plan set per agent. Each plan charges a fixed energy need evenly over
/// a random window; the local cost is drawn uniformly from `[0, 1]`.
pub fn generate_plans(spec: &PlanDatasetSpec) -> Result<Vec<PlanSet>, DataError> {
    if spec.num_agents == 0 || spec.plans_per_agent == 0 {
        return Err(DataError::InvalidSpec("agents and plans per agent must be positive".into()));
    }
    let d = spec.horizon.dim();
    (0..spec.num_agents)
        .map(|a| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (a as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let energy: f64 = rng.random_range(10.0..40.0);
            let plans = (0..spec.plans_per_agent)
                .map(|_| {
                    let min_len = (d / 24).max(1);
                    let max_len = (d / 6).max(min_len);
                    let len = rng.random_range(min_len..=max_len);
                    let start = rng.random_range(0..d);
                    let mut values = vec![0.0; d];
                    let rate = energy / len as f64;
                    for i in 0..len {
                        values[(start + i) % d] = rate;
                    }
                    Plan::new(values, rng.random_range(0.0..=1.0)).expect("finite non-negative values")
                })
                .collect();
            Ok(PlanSet::new(plans).expect("same dimension"))
        })
        .collect()
}

/// Writes `agent-NNNN.plans` files and returns their paths.
pub fn write_dataset(dir: &Path, sets: &[PlanSet]) -> Result<Vec<PathBuf>, DataError> {
    fs::create_dir_all(dir)?;
    sets.iter()
        .enumerate()
        .map(|(i, s)| {
            let path = dir.join(format!("agent-{i:04}.plans"));
            write_plan_file(&path, s)?;
            Ok(path)
        })
        .collect()
}

/// Steering signal encouraging night consumption: `level` between 22:00 and
/// 06:00 of each day of the horizon, 0 otherwise.
pub fn night_steering(horizon: Horizon, level: f64) -> Vec<f64> {
    let d = horizon.dim();
    let per_day = (d / horizon.days()).max(1);
    (0..d)
        .map(|i| {
            let minute = (i % per_day) * 1440 / per_day;
            if !(360..1320).contains(&minute) {
                level
            } else {
                0.0
            }
        })
        .collect()
}

/// Samples `k` states uniformly from the distinct values among the last 27
/// observations. With fewer distinct values, the set is padded with ±1, ±2,
/// ... offsets around existing values; the second field reports padding.
pub fn derive_possible_states(window: &[f64], k: usize, seed: u64) -> Result<(PossibleStates, bool), DataError> {
    let recent = &window[window.len().saturating_sub(27)..];
    if recent.is_empty() || k == 0 {
        return Err(DataError::EmptyWindow);
    }
    let mut distinct: Vec<f64> = recent.iter().copied().filter(|v| v.is_finite()).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.is_empty() {
        return Err(DataError::EmptyWindow);
    }
    if distinct.len() >= k {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked: Vec<f64> = sample(&mut rng, distinct.len(), k).into_iter().map(|i| distinct[i]).collect();
        return Ok((PossibleStates::new(picked).expect("finite"), false));
    }
    let base = distinct.clone();
    let mut offset = 1.0;
    while distinct.len() < k {
        for v in &base {
            for c in [v + offset, v - offset] {
                if distinct.len() < k && !distinct.contains(&c) {
                    distinct.push(c);
                }
            }
        }
        offset += 1.0;
    }
    Ok((PossibleStates::new(distinct).expect("finite"), true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_profile_shape() {
        let spec = PlanDatasetSpec { num_agents: 50, plans_per_agent: 4, horizon: Horizon::D1, seed: 1 };
        let sets = generate_plans(&spec).unwrap();
        assert_eq!(sets.len(), 50);
        assert!(sets.iter().all(|s| s.len() == 4 && s.dim() == 1440));
        assert_eq!(sets, generate_plans(&spec).unwrap());
        assert!(sets.iter().flat_map(|s| s.plans()).all(|p| (0.0..=1.0).contains(&p.local_cost)));
    }

    #[test]
    fn horizon_dimensions() {
        assert_eq!("D3".parse::<Horizon>().unwrap().dim(), 4320);
        assert_eq!("d7".parse::<Horizon>().unwrap().dim(), 10080);
        assert_eq!("reduced:64".parse::<Horizon>().unwrap(), Horizon::Reduced(64));
        assert!("D2".parse::<Horizon>().is_err());
    }

    #[test]
    fn dataset_files() {
        let dir = tempfile::tempdir().unwrap();
        let sets = generate_plans(&PlanDatasetSpec { num_agents: 3, plans_per_agent: 4, horizon: Horizon::Reduced(16), seed: 9 }).unwrap();
        let paths = write_dataset(dir.path(), &sets).unwrap();
        assert_eq!(paths.len(), 3);
        assert_eq!(crate::epos::read_plan_file(&paths[2]).unwrap(), sets[2]);
    }

    #[test]
    fn steering_is_zero_by_day() {
        let s = night_steering(Horizon::D1, 2.0);
        assert_eq!(s[0], 2.0);
        assert_eq!(s[12 * 60], 0.0);
        assert_eq!(s[23 * 60], 2.0);
    }

    #[test]
    fn states_from_distinct_window() {
        let w: Vec<f64> = (0..27).map(f64::from).collect();
        let (s, padded) = derive_possible_states(&w, 9, 4).unwrap();
        assert!(!padded);
        assert_eq!(s.k(), 9);
        assert_eq!(s, derive_possible_states(&w, 9, 4).unwrap().0);
    }

    #[test]
    fn constant_window_is_padded() {
        let (s, padded) = derive_possible_states(&[5.0; 27], 9, 0).unwrap();
        assert!(padded);
        assert_eq!(s.values(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        assert!(derive_possible_states(&[], 9, 0).is_err());
    }

    proptest! {
        #[test]
        fn states_come_from_recent_window(w in proptest::collection::vec(0u32..60, 27..60), seed in any::<u64>()) {
            let w: Vec<f64> = w.into_iter().map(f64::from).collect();
            let (s, padded) = derive_possible_states(&w, 9, seed).unwrap();
            prop_assert_eq!(s.k(), 9);
            if !padded {
                let recent = &w[w.len() - 27..];
                prop_assert!(s.values().iter().all(|v| recent.contains(v)));
            }
        }
    }
}
