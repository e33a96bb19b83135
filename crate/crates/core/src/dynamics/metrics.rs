use super::{DynamicsError, Level};

pub const METRICS_HEADER: &str = "run_id,t,g_s,g_l,l_s,l_l,rel_g,rel_l,latency,wat,dias_err,intensity";

/// One row of the metrics CSV; absent values are empty cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    /// Iteration for cost rows, virtual or wall-clock milliseconds for
    /// harness rows.
    pub t: u64,
    pub g_s: Option<f64>,
    pub g_l: Option<f64>,
    pub l_s: Option<f64>,
    pub l_l: Option<f64>,
    pub rel_g: Option<f64>,
    pub rel_l: Option<f64>,
    pub latency: Option<f64>,
    pub wat: Option<f64>,
    pub dias_err: Option<f64>,
    pub intensity: Option<Level>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    pub fn to_row(&self) -> String {
        let nums = [self.g_s, self.g_l, self.l_s, self.l_l, self.rel_g, self.rel_l, self.latency, self.wat, self.dias_err];
        let mut cells = vec![self.run_id.clone(), self.t.to_string()];
        cells.extend(nums.iter().map(|v| cell(*v)));
        cells.push(self.intensity.map(|l| l.to_string()).unwrap_or_default());
        cells.join(",")
    }

    pub fn from_row(row: &str) -> Result<MetricsRecord, DynamicsError> {
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != 12 {
            return Err(DynamicsError::Malformed(format!("expected 12 cells, got {}: {row:?}", f.len())));
        }
        let num = |i: usize| -> Result<Option<f64>, DynamicsError> {
            match f[i].trim() {
                "" => Ok(None),
                v => v.parse().map(Some).map_err(|_| DynamicsError::Malformed(format!("cell {v:?} in {row:?}"))),
            }
        };
        Ok(MetricsRecord {
            run_id: f[0].to_string(),
            t: f[1].trim().parse().map_err(|_| DynamicsError::Malformed(format!("t in {row:?}")))?,
            g_s: num(2)?,
            g_l: num(3)?,
            l_s: num(4)?,
            l_l: num(5)?,
            rel_g: num(6)?,
            rel_l: num(7)?,
            latency: num(8)?,
            wat: num(9)?,
            dias_err: num(10)?,
            intensity: match f[11].trim() {
                "" => None,
                v => Some(v.parse()?),
            },
        })
    }
}

/// Header plus one line per record.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_row());
        out.push('\n');
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>, DynamicsError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        other => return Err(DynamicsError::Malformed(format!("bad header {other:?}"))),
    }
    lines.map(MetricsRecord::from_row).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let r = MetricsRecord {
            run_id: "rep-3".into(),
            t: 12,
            g_s: Some(0.1),
            g_l: Some(1.0 / 3.0),
            wat: Some(f64::INFINITY),
            intensity: Some(Level::High),
            ..Default::default()
        };
        assert_eq!(r.to_row(), "rep-3,12,0.1,0.3333333333333333,,,,,,inf,,HIGH");
        let text = metrics_csv(&[r.clone(), MetricsRecord::default()]);
        assert_eq!(parse_metrics_csv(&text).unwrap(), vec![r, MetricsRecord::default()]);
        assert!(parse_metrics_csv("a,b\n").is_err());
        assert!(MetricsRecord::from_row("x,1,2").is_err());
    }
}
