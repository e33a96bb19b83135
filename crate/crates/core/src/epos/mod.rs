//! Iterative collective learning over a balanced binary tree: every agent
//! picks one of its plans so that the weighted sum of global cost, local
//! cost and unfairness is minimized.

mod engine;
mod planfile;
mod service;
mod tree;

pub use engine::{finalize, run_iteration, run_to_completion, EposAgent, IterationRecord, IterationState};
pub use planfile::{parse_plans, read_plan_file, render_plans, write_plan_file};
pub use service::{
    cost_text, EposConfig, EposDevice, EposService, IterationMode, RunOutcome, RunReport, MSG_EPOS_ACK, MSG_EPOS_CHANGE, MSG_EPOS_DOWN, MSG_EPOS_JOINED,
    MSG_EPOS_REPORT, MSG_EPOS_START, MSG_EPOS_UP,
};
pub use tree::{build_tree, TreeTopology};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EposError {
    #[error("empty plan set")]
    EmptyPlanSet,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid preferences: alpha={alpha}, beta={beta}")]
    InvalidPreferences { alpha: f64, beta: f64 },
    #[error("count must be at least 1")]
    ZeroCount,
    #[error("empty agent list")]
    NoAgents,
    #[error("disconnected topology: {0}")]
    Disconnected(String),
    #[error("iteration {t} beyond final iteration {f}")]
    Finished { t: usize, f: usize },
    #[error("finalize called at iteration {t} of {f}")]
    NotFinished { t: usize, f: usize },
    #[error("malformed: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub values: Vec<f64>,
    pub local_cost: f64,
}

impl Plan {
    pub fn new(values: Vec<f64>, local_cost: f64) -> Result<Plan, EposError> {
        if !local_cost.is_finite() || local_cost < 0.0 {
            return Err(EposError::InvalidPlan(format!("local cost {local_cost}")));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(EposError::InvalidPlan(format!("value {v}")));
        }
        Ok(Plan { values, local_cost })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanSet {
    plans: Vec<Plan>,
}

impl PlanSet {
    pub fn new(plans: Vec<Plan>) -> Result<PlanSet, EposError> {
        let first = plans.first().ok_or(EposError::EmptyPlanSet)?;
        let d = first.dim();
        if let Some(p) = plans.iter().find(|p| p.dim() != d) {
            return Err(EposError::DimensionMismatch { expected: d, got: p.dim() });
        }
        Ok(PlanSet { plans })
    }

    pub fn plans(&self) -> &[Plan] {
        &self.plans
    }

    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.plans[0].dim()
    }

    pub fn get(&self, i: usize) -> &Plan {
        &self.plans[i]
    }

    /// Index of the lowest local cost (lowest index on ties).
    pub fn local_argmin(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.plans.iter().enumerate() {
            if p.local_cost < self.plans[best].local_cost {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentPreferences {
    pub alpha: f64,
    pub beta: f64,
}

impl AgentPreferences {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, EposError> {
        let ok = (0.0..=1.0).contains(&alpha) && (0.0..=1.0).contains(&beta) && alpha + beta <= 1.0 + 1e-12;
        if ok {
            Ok(AgentPreferences { alpha, beta })
        } else {
            Err(EposError::InvalidPreferences { alpha, beta })
        }
    }

    pub fn global_weight(&self) -> f64 {
        1.0 - (self.alpha + self.beta)
    }
}

impl Default for AgentPreferences {
    fn default() -> Self {
        AgentPreferences { alpha: 0.0, beta: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GlobalCostFunction {
    MinVar,
    MinRmse(Vec<f64>),
}

impl GlobalCostFunction {
    pub fn evaluate(&self, total: &[f64]) -> Result<f64, EposError> {
        global_cost(self, total)
    }

    pub fn name(&self) -> &'static str {
        match self {
            GlobalCostFunction::MinVar => "MIN_VAR",
            GlobalCostFunction::MinRmse(_) => "MIN_RMSE",
        }
    }
}

impl fmt::Display for GlobalCostFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses `MIN_VAR` or `MIN_RMSE:v1,v2,...`.
impl FromStr for GlobalCostFunction {
    type Err = EposError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("MIN_VAR") || s.eq_ignore_ascii_case("MIN-VAR") {
            return Ok(GlobalCostFunction::MinVar);
        }
        let rest = s
            .strip_prefix("MIN_RMSE:")
            .or_else(|| s.strip_prefix("MIN-RMSE:"))
            .ok_or_else(|| EposError::Malformed(format!("unknown cost function {s}")))?;
        let steering = rest
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| EposError::Malformed(format!("steering value {v}"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(GlobalCostFunction::MinRmse(steering))
    }
}

/// MIN_VAR: population variance of the entries. MIN_RMSE: root mean square
/// deviation from the steering signal.
pub fn global_cost(f: &GlobalCostFunction, total: &[f64]) -> Result<f64, EposError> {
    let n = total.len();
    if n == 0 {
        return Err(EposError::DimensionMismatch { expected: 1, got: 0 });
    }
    match f {
        GlobalCostFunction::MinVar => {
            let mean = total.iter().sum::<f64>() / n as f64;
            Ok(total.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64)
        }
        GlobalCostFunction::MinRmse(steering) => {
            if steering.len() != n {
                return Err(EposError::DimensionMismatch { expected: steering.len(), got: n });
            }
            let ss: f64 = total.iter().zip(steering).map(|(v, s)| (v - s) * (v - s)).sum();
            Ok((ss / n as f64).sqrt())
        }
    }
}

/// Running first and second moments of selected local costs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub sum: f64,
    pub sumsq: f64,
    pub count: u64,
}

impl Moments {
    pub fn of(cost: f64) -> Moments {
        Moments { sum: cost, sumsq: cost * cost, count: 1 }
    }

    pub fn plus(self, o: Moments) -> Moments {
        Moments { sum: self.sum + o.sum, sumsq: self.sumsq + o.sumsq, count: self.count + o.count }
    }

    pub fn minus(self, o: Moments) -> Moments {
        Moments { sum: self.sum - o.sum, sumsq: self.sumsq - o.sumsq, count: self.count.saturating_sub(o.count) }
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Population standard deviation from running moments, clamped at zero.
pub fn unfairness(local_costs_sum: f64, local_costs_sumsq: f64, count: u64) -> Result<f64, EposError> {
    if count == 0 {
        return Err(EposError::ZeroCount);
    }
    let n = count as f64;
    let mean = local_costs_sum / n;
    Ok((local_costs_sumsq / n - mean * mean).max(0.0).sqrt())
}

/// The three cost terms of one candidate plan: global, local, unfairness.
pub fn plan_terms(plans: &PlanSet, gcf: &GlobalCostFunction, context: &[f64], moments: Moments) -> Result<Vec<[f64; 3]>, EposError> {
    if context.len() != plans.dim() {
        return Err(EposError::DimensionMismatch { expected: plans.dim(), got: context.len() });
    }
    let mut buf = vec![0.0; context.len()];
    plans
        .plans()
        .iter()
        .map(|p| {
            for (b, (c, v)) in buf.iter_mut().zip(context.iter().zip(&p.values)) {
                *b = c + v;
            }
            let g = global_cost(gcf, &buf)?;
            let m = moments.plus(Moments::of(p.local_cost));
            let u = unfairness(m.sum, m.sumsq, m.count)?;
            Ok([g, p.local_cost, u])
        })
        .collect()
}

/// Argmin of `(1-(a+b))*g + b*l + a*u`, lowest index on ties. With
/// `normalize`, each term is min-max scaled across the candidates first.
pub fn combine(terms: &[[f64; 3]], prefs: AgentPreferences, normalize: bool) -> usize {
    let mut scaled = terms.to_vec();
    if normalize {
        for k in 0..3 {
            let lo = terms.iter().map(|t| t[k]).fold(f64::INFINITY, f64::min);
            let hi = terms.iter().map(|t| t[k]).fold(f64::NEG_INFINITY, f64::max);
            for t in scaled.iter_mut() {
                t[k] = if hi > lo { (t[k] - lo) / (hi - lo) } else { 0.0 };
            }
        }
    }
    let mut best = 0;
    let mut best_score = f64::INFINITY;
    for (j, t) in scaled.iter().enumerate() {
        let score = prefs.global_weight() * t[0] + prefs.beta * t[1] + prefs.alpha * t[2];
        if score < best_score {
            best = j;
            best_score = score;
        }
    }
    best
}

/// Plan choice of one agent given the aggregate response and local-cost
/// moments of everyone else it knows about.
pub fn select_plan(
    plans: &PlanSet,
    prefs: AgentPreferences,
    gcf: &GlobalCostFunction,
    context: &[f64],
    moments: Moments,
    normalize: bool,
) -> Result<usize, EposError> {
    if plans.is_empty() {
        return Err(EposError::EmptyPlanSet);
    }
    let terms = plan_terms(plans, gcf, context, moments)?;
    Ok(combine(&terms, prefs, normalize))
}
