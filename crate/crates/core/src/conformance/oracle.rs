use std::collections::BTreeMap;
use std::fmt;

use super::OracleError;
use crate::epos::{GlobalCostFunction, PlanSet};

pub const MAX_AGENTS: usize = 6;
pub const MAX_PLANS: usize = 3;
pub const MAX_DIM: usize = 4;

/// An oracle value next to the value the system produced.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub instance: String,
    pub oracle: f64,
    pub system: f64,
    /// `(system - oracle) / |oracle|`, or the plain difference when the
    /// oracle value is zero.
    pub gap: f64,
}

impl OracleResult {
    pub fn new(instance: impl Into<String>, oracle: f64, system: f64) -> Self {
        let diff = system - oracle;
        let gap = if oracle == 0.0 { diff } else { diff / oracle.abs() };
        OracleResult { instance: instance.into(), oracle, system, gap }
    }
}

impl fmt::Display for OracleResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: oracle {} system {} gap {}", self.instance, self.oracle, self.system, self.gap)
    }
}

/// Best plan combination found by enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct EposOptimum {
    pub cost: f64,
    /// Plan index per agent.
    pub selection: Vec<usize>,
    pub combinations: u64,
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

fn rmse(v: &[f64], target: &[f64]) -> f64 {
    let n = v.len() as f64;
    (v.iter().zip(target).map(|(x, t)| (x - t).powi(2)).sum::<f64>() / n).sqrt()
}

/// Enumerates every plan combination and returns the one with the lowest
/// global cost, ties going to the lexicographically first selection.
pub fn epos_oracle(plans: &[PlanSet], cost: &GlobalCostFunction) -> Result<EposOptimum, OracleError> {
    if plans.is_empty() || plans.len() > MAX_AGENTS {
        return Err(OracleError::Bounds(format!("{} agents, allowed 1..={MAX_AGENTS}", plans.len())));
    }
    let dim = plans[0].dim();
    if dim == 0 || dim > MAX_DIM {
        return Err(OracleError::Bounds(format!("dimension {dim}, allowed 1..={MAX_DIM}")));
    }
    for (i, s) in plans.iter().enumerate() {
        if s.len() > MAX_PLANS {
            return Err(OracleError::Bounds(format!("agent {i} has {} plans, allowed {MAX_PLANS}", s.len())));
        }
        if s.dim() != dim {
            return Err(OracleError::Bounds(format!("agent {i} has dimension {}, expected {dim}", s.dim())));
        }
    }
    let target = match cost {
        GlobalCostFunction::MinVar => None,
        GlobalCostFunction::MinRmse(t) if t.len() == dim => Some(t.as_slice()),
        GlobalCostFunction::MinRmse(t) => {
            return Err(OracleError::Bounds(format!("steering length {}, expected {dim}", t.len())));
        }
    };
    let mut pick = vec![0usize; plans.len()];
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut combinations = 0u64;
    loop {
        let mut total = vec![0.0; dim];
        for (s, j) in plans.iter().zip(&pick) {
            for (acc, v) in total.iter_mut().zip(&s.plans()[*j].values) {
                *acc += v;
            }
        }
        let c = match target {
            None => variance(&total),
            Some(t) => rmse(&total, t),
        };
        combinations += 1;
        if best.as_ref().is_none_or(|(b, _)| c < *b) {
            best = Some((c, pick.clone()));
        }
        // Mixed-radix increment, last agent fastest.
        let mut i = plans.len();
        loop {
            if i == 0 {
                let (cost, selection) = best.expect("at least one combination");
                return Ok(EposOptimum { cost, selection, combinations });
            }
            i -= 1;
            pick[i] += 1;
            if pick[i] < plans[i].len() {
                break;
            }
            pick[i] = 0;
        }
    }
}

/// A change to one supplier's contribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SupplierChange {
    Join(f64),
    Set(f64),
    Leave,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupplierEvent {
    pub t_ms: u64,
    pub supplier: String,
    pub change: SupplierChange,
}

impl SupplierEvent {
    pub fn new(t_ms: u64, supplier: impl Into<String>, change: SupplierChange) -> Self {
        SupplierEvent { t_ms, supplier: supplier.into(), change }
    }
}

/// Exact aggregates over the suppliers present at `t_ms`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactAggregate {
    pub t_ms: u64,
    pub sum: f64,
    pub count: usize,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

/// Parses one event per line: `<t_ms> <supplier> join <value>`,
/// `<t_ms> <supplier> set <value>` or `<t_ms> <supplier> leave`. Blank
/// lines and `#` comments are skipped.
pub fn parse_event_log(text: &str) -> Result<Vec<SupplierEvent>, OracleError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |why: &str| OracleError::MalformedLog { line: n + 1, message: why.to_string() };
        let f: Vec<&str> = line.split_whitespace().collect();
        let t_ms = f.first().and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad time"))?;
        let supplier = f.get(1).ok_or_else(|| bad("missing supplier"))?;
        let value = || -> Result<f64, OracleError> {
            match f.get(3).map(|v| v.parse::<f64>()) {
                Some(Ok(v)) if f.len() == 4 => Ok(v),
                _ => Err(bad("expected one numeric value")),
            }
        };
        let change = match f.get(2).copied() {
            Some("join") => SupplierChange::Join(value()?),
            Some("set") => SupplierChange::Set(value()?),
            Some("leave") if f.len() == 3 => SupplierChange::Leave,
            _ => return Err(bad("expected join, set or leave")),
        };
        out.push(SupplierEvent::new(t_ms, *supplier, change));
    }
    Ok(out)
}

/// Replays the supplier history centrally and returns the exact aggregates
/// after the last event of every distinct timestamp.
pub fn dias_oracle(log: &[SupplierEvent]) -> Result<Vec<ExactAggregate>, OracleError> {
    let mut present: BTreeMap<&str, f64> = BTreeMap::new();
    let mut out: Vec<ExactAggregate> = Vec::new();
    let mut last_t = 0;
    for (i, e) in log.iter().enumerate() {
        let bad = |why: String| OracleError::MalformedLog { line: i + 1, message: why };
        if e.t_ms < last_t {
            return Err(bad(format!("time {} before {last_t}", e.t_ms)));
        }
        last_t = e.t_ms;
        let s = e.supplier.as_str();
        match e.change {
            SupplierChange::Join(v) | SupplierChange::Set(v) if !v.is_finite() => return Err(bad(format!("non-finite value for {s}"))),
            SupplierChange::Join(v) => {
                if present.insert(s, v).is_some() {
                    return Err(bad(format!("{s} joined twice")));
                }
            }
            SupplierChange::Set(v) => match present.get_mut(s) {
                Some(old) => *old = v,
                None => return Err(bad(format!("{s} changed while absent"))),
            },
            SupplierChange::Leave => {
                if present.remove(s).is_none() {
                    return Err(bad(format!("{s} left while absent")));
                }
            }
        }
        let agg = ExactAggregate {
            t_ms: e.t_ms,
            sum: present.values().sum(),
            count: present.len(),
            min: present.values().copied().reduce(f64::min),
            max: present.values().copied().reduce(f64::max),
        };
        match out.last_mut() {
            Some(prev) if prev.t_ms == e.t_ms => *prev = agg,
            _ => out.push(agg),
        }
    }
    Ok(out)
}

/// The aggregate in force at `t_ms`, `None` before the first event.
pub fn aggregate_at(series: &[ExactAggregate], t_ms: u64) -> Option<&ExactAggregate> {
    series.iter().take_while(|a| a.t_ms <= t_ms).last()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epos::Plan;

    fn set(plans: &[&[f64]]) -> PlanSet {
        PlanSet::new(plans.iter().map(|p| Plan::new(p.to_vec(), 0.0).unwrap()).collect()).unwrap()
    }

    #[test]
    fn single_agent_picks_the_flat_plan() {
        let o = epos_oracle(&[set(&[&[1.0, 0.0], &[1.0, 1.0]])], &GlobalCostFunction::MinVar).unwrap();
        assert_eq!(o.cost, 0.0);
        assert_eq!(o.selection, vec![1]);
    }

    #[test]
    fn three_agents_two_plans_enumerate_eight() {
        let s = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let o = epos_oracle(&[s.clone(), s.clone(), s], &GlobalCostFunction::MinVar).unwrap();
        assert_eq!(o.combinations, 8);
        // Odd agent count: best split is 2/1, totals (2,1) or (1,2).
        assert_eq!(o.cost, 0.25);
    }

    #[test]
    fn rmse_matches_hand_value() {
        let s = set(&[&[2.0, 0.0], &[0.0, 0.0]]);
        let o = epos_oracle(&[s], &GlobalCostFunction::MinRmse(vec![2.0, 2.0])).unwrap();
        // (0,4) squared errors over 2 entries: sqrt(2).
        assert!((o.cost - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(o.selection, vec![0]);
    }

    #[test]
    fn out_of_bounds_instances_are_rejected() {
        let s = set(&[&[1.0]]);
        assert!(matches!(epos_oracle(&vec![s.clone(); 7], &GlobalCostFunction::MinVar), Err(OracleError::Bounds(_))));
        assert!(matches!(epos_oracle(&[], &GlobalCostFunction::MinVar), Err(OracleError::Bounds(_))));
        let wide = set(&[&[1.0; 5]]);
        assert!(matches!(epos_oracle(&[wide], &GlobalCostFunction::MinVar), Err(OracleError::Bounds(_))));
        let many = set(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
        assert!(matches!(epos_oracle(&[many], &GlobalCostFunction::MinVar), Err(OracleError::Bounds(_))));
    }

    #[test]
    fn static_states_give_constant_series() {
        let log: Vec<_> = [5.0, 7.0, 9.0].iter().enumerate().map(|(i, v)| SupplierEvent::new(0, format!("s{i}"), SupplierChange::Join(*v))).collect();
        let series = dias_oracle(&log).unwrap();
        assert_eq!(series.len(), 1);
        assert_eq!((series[0].sum, series[0].count, series[0].min, series[0].max), (21.0, 3, Some(5.0), Some(9.0)));
        assert_eq!(aggregate_at(&series, 1_000_000).unwrap().sum, 21.0);
    }

    #[test]
    fn one_change_steps_the_sum() {
        let text = "0 a join 5\n0 b join 7\n0 c join 9\n# change\n100 a set 6\n";
        let series = dias_oracle(&parse_event_log(text).unwrap()).unwrap();
        let sums: Vec<f64> = series.iter().map(|a| a.sum).collect();
        assert_eq!(sums, vec![21.0, 22.0]);
        assert_eq!(aggregate_at(&series, 99).unwrap().sum, 21.0);
        assert_eq!(series[1].min, Some(6.0));
    }

    #[test]
    fn leaves_drop_contributions() {
        let text = "0 a join 5\n0 b join 7\n10 b leave\n20 b join 1\n";
        let series = dias_oracle(&parse_event_log(text).unwrap()).unwrap();
        let v: Vec<(f64, usize)> = series.iter().map(|a| (a.sum, a.count)).collect();
        assert_eq!(v, vec![(12.0, 2), (5.0, 1), (6.0, 2)]);
    }

    #[test]
    fn malformed_logs_are_rejected() {
        for bad in ["x a join 1", "0 a jump 1", "0 a join", "0 a leave 3", "0 a set 1", "0 a join 1\n0 a join 2", "5 a join 1\n4 b join 1", "0 a join nan"] {
            let r = parse_event_log(bad).and_then(|l| dias_oracle(&l));
            assert!(matches!(r, Err(OracleError::MalformedLog { .. })), "{bad}");
        }
    }
}
