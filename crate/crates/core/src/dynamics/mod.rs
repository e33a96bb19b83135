//! Dynamics harness: intensity schedules, change injection, driver peers
//! and the evaluation metrics.

mod driver;
mod metrics;

pub use driver::{AgentHandle, DiasDriver, DiasDriverConfig, DiasSample, DiasWorkload, EposDriver, EposDriverConfig, EposRunRecord};
pub use metrics::{metrics_csv, parse_metrics_csv, MetricsRecord, METRICS_HEADER};

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("intensity cycle is empty")]
    EmptyCycle,
    #[error("rate {0} outside [0, 1]")]
    InvalidRate(f64),
    #[error("{0} must be positive")]
    InvalidPeriod(&'static str),
    #[error("undefined: {0}")]
    Undefined(&'static str),
    #[error("no estimates")]
    EmptyEstimates,
    #[error("unknown intensity level {0:?}")]
    UnknownLevel(String),
    #[error("malformed metrics: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Low,
    Medium,
    High,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Low, Level::Medium, Level::High];
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Low => "LOW",
            Level::Medium => "MEDIUM",
            Level::High => "HIGH",
        })
    }
}

impl FromStr for Level {
    type Err = DynamicsError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LOW" => Ok(Level::Low),
            "MEDIUM" | "MED" => Ok(Level::Medium),
            "HIGH" => Ok(Level::High),
            _ => Err(DynamicsError::UnknownLevel(s.to_string())),
        }
    }
}

/// Per-run change probabilities for collective learning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EposRates {
    pub plan_change: f64,
    pub weight_change: f64,
    /// System-wide, drawn once per run.
    pub gcf_change: f64,
    pub churn: f64,
}

/// Change periods for aggregation, in (desk-scaled) milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiasPeriods {
    pub possible_states_ms: u64,
    pub selected_state_ms: u64,
    /// Time an agent stays away, and stays present, per churn cycle.
    pub churn_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityLevel {
    pub level: Level,
    pub epos: EposRates,
    pub dias: DiasPeriods,
}

/// Virtual milliseconds standing in for one 8-hour intensity period.
pub const DESK_PERIOD_MS: u64 = 60_000;
/// Virtual milliseconds standing in for one minute of aggregation dynamics.
pub const DESK_MINUTE_MS: u64 = 2_000;

impl IntensityLevel {
    pub fn new(level: Level, epos: EposRates, dias: DiasPeriods) -> Result<Self, DynamicsError> {
        for r in [epos.plan_change, epos.weight_change, epos.gcf_change, epos.churn] {
            if !(0.0..=1.0).contains(&r) {
                return Err(DynamicsError::InvalidRate(r));
            }
        }
        if dias.possible_states_ms == 0 || dias.selected_state_ms == 0 || dias.churn_ms == 0 {
            return Err(DynamicsError::InvalidPeriod("aggregation change period"));
        }
        Ok(IntensityLevel { level, epos, dias })
    }

    /// The published rate matrix, with one minute mapped to `minute_ms`.
    pub fn table(level: Level, minute_ms: u64) -> Self {
        let (p, states_min, selected_min, churn_min) = match level {
            Level::Low => (0.10, 180, 5, 10),
            Level::Medium => (0.20, 120, 2, 5),
            Level::High => (0.50, 60, 1, 2),
        };
        IntensityLevel {
            level,
            epos: EposRates { plan_change: p, weight_change: p, gcf_change: p, churn: p },
            dias: DiasPeriods {
                possible_states_ms: states_min * minute_ms,
                selected_state_ms: selected_min * minute_ms,
                churn_ms: churn_min * minute_ms,
            },
        }
    }
}

/// Time-boxed intensity periods repeated cyclically.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensitySchedule {
    pub period_length_ms: u64,
    pub cycle: Vec<IntensityLevel>,
}

impl IntensitySchedule {
    pub fn new(period_length_ms: u64, cycle: Vec<IntensityLevel>) -> Result<Self, DynamicsError> {
        if cycle.is_empty() {
            return Err(DynamicsError::EmptyCycle);
        }
        if period_length_ms == 0 {
            return Err(DynamicsError::InvalidPeriod("period length"));
        }
        Ok(IntensitySchedule { period_length_ms, cycle })
    }

    /// Table rates for the given levels.
    pub fn from_levels(levels: &[Level], period_length_ms: u64, minute_ms: u64) -> Result<Self, DynamicsError> {
        IntensitySchedule::new(period_length_ms, levels.iter().map(|l| IntensityLevel::table(*l, minute_ms)).collect())
    }

    pub fn period_index(&self, t_ms: u64) -> u64 {
        t_ms / self.period_length_ms
    }

    pub fn level_at(&self, t_ms: u64) -> &IntensityLevel {
        &self.cycle[(self.period_index(t_ms) % self.cycle.len() as u64) as usize]
    }
}

/// Relative global cost difference `(sim - live) / sim`.
pub fn relative_difference(sim_value: f64, live_value: f64) -> Result<f64, DynamicsError> {
    if sim_value == 0.0 {
        return Err(DynamicsError::Undefined("relative difference with zero simulation value"));
    }
    Ok((sim_value - live_value) / sim_value)
}

/// Execution time under dynamics relative to static execution time.
pub fn latency(varying_ms: f64, static_ms: f64) -> Result<f64, DynamicsError> {
    if static_ms <= 0.0 || !static_ms.is_finite() {
        return Err(DynamicsError::InvalidPeriod("static execution time"));
    }
    if varying_ms < 0.0 {
        return Err(DynamicsError::InvalidPeriod("varying execution time"));
    }
    Ok(varying_ms / static_ms)
}

/// Working time over adaptivity time; infinite when nothing was adapted.
pub fn wat(working_ms: f64, adaptivity_ms: f64) -> Result<f64, DynamicsError> {
    if working_ms < 0.0 || adaptivity_ms < 0.0 {
        return Err(DynamicsError::InvalidPeriod("working and adaptivity time"));
    }
    if adaptivity_ms == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(working_ms / adaptivity_ms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ChangeKind {
    PlanChange,
    WeightChange,
    GcfChange,
    Join,
    Leave,
    PossibleStatesChange,
    SelectedStateChange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Target {
    Agent(usize),
    System,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeEvent {
    pub t_ms: u64,
    pub kind: ChangeKind,
    pub target: Target,
    pub payload: String,
}

impl ChangeEvent {
    fn agent(t_ms: u64, kind: ChangeKind, i: usize, payload: impl Into<String>) -> Self {
        ChangeEvent { t_ms, kind, target: Target::Agent(i), payload: payload.into() }
    }
}

/// Seeded per-run change draws for collective learning.
#[derive(Debug, Clone)]
pub struct EposInjector {
    rng: ChaCha8Rng,
    min_present: usize,
    next_cost_is_rmse: bool,
    pub skipped_leaves: u64,
}

impl EposInjector {
    /// Leaves that would take the population below `min_present` are
    /// skipped.
    pub fn new(seed: u64, min_present: usize) -> Self {
        EposInjector { rng: ChaCha8Rng::seed_from_u64(seed), min_present, next_cost_is_rmse: true, skipped_leaves: 0 }
    }

    /// Changes for one run. `present[i]` tells whether agent `i` is in the
    /// network; absent agents join with the churn probability, present ones
    /// leave with it. Plan and weight changes target agents present before
    /// and after the churn draws. The cost function payload names the
    /// function to switch to.
    pub fn draw_run(&mut self, t_ms: u64, rates: &EposRates, present: &[bool]) -> Vec<ChangeEvent> {
        let mut events = Vec::new();
        let mut count = present.iter().filter(|p| **p).count();
        let mut stays = present.to_vec();
        for (i, p) in present.iter().enumerate() {
            if !self.rng.random_bool(rates.churn) {
                continue;
            }
            if *p {
                if count <= self.min_present {
                    self.skipped_leaves += 1;
                    continue;
                }
                count -= 1;
                stays[i] = false;
                events.push(ChangeEvent::agent(t_ms, ChangeKind::Leave, i, ""));
            } else {
                count += 1;
                events.push(ChangeEvent::agent(t_ms, ChangeKind::Join, i, ""));
            }
        }
        for i in (0..present.len()).filter(|i| present[*i] && stays[*i]) {
            if self.rng.random_bool(rates.plan_change) {
                let seed: u64 = self.rng.random();
                events.push(ChangeEvent::agent(t_ms, ChangeKind::PlanChange, i, seed.to_string()));
            }
            if self.rng.random_bool(rates.weight_change) {
                let alpha: f64 = self.rng.random_range(0.0..=1.0);
                events.push(ChangeEvent::agent(t_ms, ChangeKind::WeightChange, i, format!("{alpha},{}", 1.0 - alpha)));
            }
        }
        if self.rng.random_bool(rates.gcf_change) {
            let name = if self.next_cost_is_rmse { "MIN_RMSE" } else { "MIN_VAR" };
            self.next_cost_is_rmse = !self.next_cost_is_rmse;
            events.push(ChangeEvent { t_ms, kind: ChangeKind::GcfChange, target: Target::System, payload: name.into() });
        }
        events
    }
}

/// How aggregation agents are spread over the churn cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiasChurn {
    /// All agents leave together after one churn period and return one
    /// period later.
    Synchronous,
    /// Each agent follows the same cycle shifted by a seeded offset.
    Staggered,
}

/// Periodic aggregation changes in `[from_ms, to_ms)`, ordered by time.
/// Periods follow the intensity in force when each event fires.
pub fn dias_events(
    schedule: &IntensitySchedule,
    n_agents: usize,
    from_ms: u64,
    to_ms: u64,
    churn: DiasChurn,
    seed: u64,
) -> Vec<ChangeEvent> {
    let mut events = Vec::new();
    let mut t = from_ms;
    loop {
        t += schedule.level_at(t).dias.selected_state_ms;
        if t >= to_ms {
            break;
        }
        events.push(ChangeEvent { t_ms: t, kind: ChangeKind::SelectedStateChange, target: Target::System, payload: String::new() });
    }
    let mut t = from_ms;
    loop {
        t += schedule.level_at(t).dias.possible_states_ms;
        if t >= to_ms {
            break;
        }
        events.push(ChangeEvent { t_ms: t, kind: ChangeKind::PossibleStatesChange, target: Target::System, payload: String::new() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_agents {
        let first = schedule.level_at(from_ms).dias.churn_ms;
        let offset = match churn {
            DiasChurn::Synchronous => 0,
            DiasChurn::Staggered => rng.random_range(0..2 * first),
        };
        let mut t = from_ms + offset;
        loop {
            let c = schedule.level_at(t).dias.churn_ms;
            let leave = t + c;
            if leave >= to_ms {
                break;
            }
            events.push(ChangeEvent::agent(leave, ChangeKind::Leave, i, ""));
            let join = leave + c;
            if join >= to_ms {
                break;
            }
            events.push(ChangeEvent::agent(join, ChangeKind::Join, i, ""));
            t = join;
        }
    }
    events.sort_by(|a, b| (a.t_ms, a.kind, a.target).cmp(&(b.t_ms, b.kind, b.target)));
    events
}

/// `|true_sum - mean(estimates)|`.
pub fn dias_error(true_sum: f64, estimates: &[f64]) -> Result<f64, DynamicsError> {
    if estimates.is_empty() {
        return Err(DynamicsError::EmptyEstimates);
    }
    Ok((true_sum - estimates.iter().sum::<f64>() / estimates.len() as f64).abs())
}

/// Instant and rolling-mean estimation error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSample {
    pub instant: f64,
    pub rolling: f64,
}

/// Rolling mean of the last `window` instant errors.
#[derive(Debug, Clone)]
pub struct RollingError {
    window: usize,
    values: VecDeque<f64>,
}

impl RollingError {
    pub fn new(window: usize) -> Self {
        RollingError { window: window.max(1), values: VecDeque::new() }
    }

    pub fn record(&mut self, true_sum: f64, estimates: &[f64]) -> Result<ErrorSample, DynamicsError> {
        let instant = dias_error(true_sum, estimates)?;
        if self.values.len() == self.window {
            self.values.pop_front();
        }
        self.values.push_back(instant);
        let rolling = self.values.iter().sum::<f64>() / self.values.len() as f64;
        Ok(ErrorSample { instant, rolling })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        assert_eq!(relative_difference(10.0, 9.0).unwrap(), 0.1);
        assert_eq!(relative_difference(7.5, 7.5).unwrap(), 0.0);
        assert_eq!(relative_difference(10.0, 11.0).unwrap(), -0.1);
        assert!(relative_difference(0.0, 1.0).is_err());
        assert_eq!(latency(1500.0, 1000.0).unwrap(), 1.5);
        assert_eq!(latency(1000.0, 1000.0).unwrap(), 1.0);
        assert!(latency(10.0, 0.0).is_err());
        assert_eq!(wat(40000.0, 10000.0).unwrap(), 4.0);
        assert_eq!(wat(300.0, 300.0).unwrap(), 1.0);
        assert_eq!(wat(300.0, 0.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn table_rates() {
        let low = IntensityLevel::table(Level::Low, 60_000);
        assert_eq!(low.epos.plan_change, 0.10);
        assert_eq!(low.dias.selected_state_ms, 5 * 60_000);
        assert_eq!(low.dias.possible_states_ms, 3 * 3_600_000);
        let high = IntensityLevel::table(Level::High, 60_000);
        assert_eq!((high.epos.churn, high.dias.churn_ms), (0.50, 120_000));
        assert_eq!(IntensityLevel::table(Level::Medium, 1).dias.selected_state_ms, 2);
        let bad = EposRates { plan_change: 1.5, ..low.epos };
        assert_eq!(IntensityLevel::new(Level::Low, bad, low.dias), Err(DynamicsError::InvalidRate(1.5)));
    }

    #[test]
    fn schedule_cycles() {
        assert_eq!(IntensitySchedule::new(10, vec![]), Err(DynamicsError::EmptyCycle));
        let s = IntensitySchedule::from_levels(&Level::ALL, 100, 1).unwrap();
        assert_eq!(s.level_at(0).level, Level::Low);
        assert_eq!(s.level_at(150).level, Level::Medium);
        assert_eq!(s.level_at(299).level, Level::High);
        assert_eq!(s.level_at(300).level, Level::Low);
        assert_eq!("med".parse::<Level>().unwrap(), Level::Medium);
    }

    #[test]
    fn plan_change_count_matches_rate() {
        // Churn off so that all 100 agents are eligible: binomial(100, 0.1).
        let rates = EposRates { churn: 0.0, ..IntensityLevel::table(Level::Low, 1).epos };
        let present = vec![true; 100];
        let total: usize = (0..50u64)
            .map(|seed| {
                let mut inj = EposInjector::new(seed, 0);
                inj.draw_run(0, &rates, &present).iter().filter(|e| e.kind == ChangeKind::PlanChange).count()
            })
            .sum();
        let mean = total as f64 / 50.0;
        let sigma = (100.0f64 * 0.1 * 0.9 / 50.0).sqrt();
        assert!((mean - 10.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn every_kind_follows_its_rate() {
        let rates = IntensityLevel::table(Level::High, 1).epos;
        let present = vec![true; 100];
        let mut leaves = 0.0;
        let mut gcf = 0.0;
        for seed in 0..50u64 {
            let ev = EposInjector::new(seed, 0).draw_run(0, &rates, &present);
            leaves += ev.iter().filter(|e| e.kind == ChangeKind::Leave).count() as f64;
            gcf += ev.iter().filter(|e| e.kind == ChangeKind::GcfChange).count() as f64;
        }
        let sigma = (100.0f64 * 0.25 / 50.0).sqrt();
        assert!((leaves / 50.0 - 50.0).abs() < 3.0 * sigma);
        assert!((gcf / 50.0 - 0.5).abs() < 3.0 * (0.25f64 / 50.0).sqrt());
    }

    #[test]
    fn injection_is_deterministic_and_keeps_floor() {
        let rates = IntensityLevel::table(Level::High, 1).epos;
        let present = vec![true; 20];
        let a = EposInjector::new(3, 15).draw_run(5, &rates, &present);
        assert_eq!(a, EposInjector::new(3, 15).draw_run(5, &rates, &present));
        assert!(a.iter().filter(|e| e.kind == ChangeKind::Leave).count() <= 5);
        let absent = vec![false; 20];
        let joins = EposInjector::new(3, 15).draw_run(5, &rates, &absent);
        assert!(joins.iter().all(|e| e.kind == ChangeKind::Join || e.kind == ChangeKind::GcfChange));
    }

    #[test]
    fn cost_function_alternates() {
        let rates = EposRates { plan_change: 0.0, weight_change: 0.0, gcf_change: 1.0, churn: 0.0 };
        let mut inj = EposInjector::new(0, 0);
        let names: Vec<String> = (0..3).map(|_| inj.draw_run(0, &rates, &[true]).pop().unwrap().payload).collect();
        assert_eq!(names, ["MIN_RMSE", "MIN_VAR", "MIN_RMSE"]);
    }

    #[test]
    fn weights_sum_to_one() {
        let rates = EposRates { plan_change: 0.0, weight_change: 1.0, gcf_change: 0.0, churn: 0.0 };
        for e in EposInjector::new(1, 0).draw_run(0, &rates, &[true; 10]) {
            let (a, b) = e.payload.split_once(',').unwrap();
            let (a, b): (f64, f64) = (a.parse().unwrap(), b.parse().unwrap());
            assert!((0.0..=1.0).contains(&a));
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn high_churn_leaves_and_returns_every_two_minutes() {
        let minute = 60_000;
        let s = IntensitySchedule::from_levels(&[Level::High], 8 * 60 * minute, minute).unwrap();
        let ev = dias_events(&s, 1, 0, 9 * minute, DiasChurn::Synchronous, 0);
        let churn: Vec<(u64, ChangeKind)> =
            ev.iter().filter(|e| matches!(e.kind, ChangeKind::Join | ChangeKind::Leave)).map(|e| (e.t_ms / minute, e.kind)).collect();
        assert_eq!(churn, vec![(2, ChangeKind::Leave), (4, ChangeKind::Join), (6, ChangeKind::Leave), (8, ChangeKind::Join)]);
        let selected = ev.iter().filter(|e| e.kind == ChangeKind::SelectedStateChange).count();
        assert_eq!(selected, 8);
    }

    #[test]
    fn staggered_churn_never_empties_the_network() {
        let s = IntensitySchedule::from_levels(&[Level::High], 60_000, 2_000).unwrap();
        let n = 20;
        let ev = dias_events(&s, n, 0, 60_000, DiasChurn::Staggered, 11);
        assert_eq!(ev, dias_events(&s, n, 0, 60_000, DiasChurn::Staggered, 11));
        let mut present = n as i64;
        let mut min = present;
        for e in &ev {
            match e.kind {
                ChangeKind::Leave => present -= 1,
                ChangeKind::Join => present += 1,
                _ => {}
            }
            min = min.min(present);
        }
        assert!(min > 0);
    }

    #[test]
    fn error_examples() {
        assert_eq!(dias_error(21.0, &[21.0, 21.0]).unwrap(), 0.0);
        assert_eq!(dias_error(21.0, &[19.0, 21.0]).unwrap(), 1.0);
        assert_eq!(dias_error(1.0, &[]), Err(DynamicsError::EmptyEstimates));
        let mut r = RollingError::new(2);
        assert_eq!(r.record(10.0, &[6.0]).unwrap().rolling, 4.0);
        assert_eq!(r.record(10.0, &[10.0]).unwrap().rolling, 2.0);
        let s = r.record(10.0, &[10.0]).unwrap();
        assert_eq!((s.instant, s.rolling), (0.0, 0.0));
    }
}
