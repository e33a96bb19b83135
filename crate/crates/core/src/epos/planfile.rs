use std::fs;
use std::io;
use std::path::Path;

use super::{EposError, Plan, PlanSet};

/// Parses one plan per line, `local_cost:v1,v2,...,vd`. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_plans(text: &str) -> Result<PlanSet, EposError> {
    let mut plans = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| EposError::Malformed(format!("line {}: {what}", no + 1));
        let (cost, values) = line.split_once(':').ok_or_else(|| bad("missing ':'"))?;
        let cost: f64 = cost.trim().parse().map_err(|_| bad("local cost is not a number"))?;
        let values = values
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad("value is not a number")))
            .collect::<Result<Vec<_>, _>>()?;
        plans.push(Plan::new(values, cost).map_err(|e| bad(&e.to_string()))?);
    }
    PlanSet::new(plans)
}

/// Renders plans so that [`parse_plans`] restores them bit for bit.
pub fn render_plans(plans: &PlanSet) -> String {
    let mut out = String::new();
    for p in plans.plans() {
        out.push_str(&p.local_cost.to_string());
        out.push(':');
        for (i, v) in p.values.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn read_plan_file(path: &Path) -> io::Result<PlanSet> {
    let text = fs::read_to_string(path)?;
    parse_plans(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
}

pub fn write_plan_file(path: &Path, plans: &PlanSet) -> io::Result<()> {
    fs::write(path, render_plans(plans))
}
