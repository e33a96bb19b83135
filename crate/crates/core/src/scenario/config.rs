use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::ScenarioError;
use crate::data::Horizon;
use crate::dynamics::{DiasChurn, Level, DESK_MINUTE_MS, DESK_PERIOD_MS};
use crate::epos::IterationMode;
use crate::runtime::ExecutionMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServiceKind {
    Epos,
    Dias,
    Both,
}

impl ServiceKind {
    pub fn epos(&self) -> bool {
        matches!(self, ServiceKind::Epos | ServiceKind::Both)
    }

    pub fn dias(&self) -> bool {
        matches!(self, ServiceKind::Dias | ServiceKind::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    MinVar,
    MinRmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceLevel {
    Off,
    /// Bootstrap protocol messages only.
    Protocol,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EposSettings {
    pub profile: Option<u8>,
    pub agents: usize,
    pub plans: usize,
    pub horizon: Horizon,
    pub plan_dir: Option<PathBuf>,
    pub alpha: f64,
    pub beta: f64,
    pub cost: CostKind,
    pub iterations: usize,
    pub mode: IterationMode,
    pub straggler_ms: Option<u64>,
    pub tree_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiasSettings {
    pub agents: usize,
    pub k: usize,
    pub view_size: usize,
    pub gossip_period_ms: u64,
    pub dissemination_period_ms: u64,
    pub bloom_m: usize,
    pub bloom_h: u32,
    pub duration_ms: u64,
    pub warmup_ms: u64,
    pub churn: DiasChurn,
    pub sample_period_ms: u64,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsSettings {
    pub enabled: bool,
    pub levels: Vec<Level>,
    pub period_ms: u64,
    pub minute_ms: u64,
    pub duration_ms: u64,
    pub static_runs: u64,
    pub min_present_fraction: f64,
    pub step_timeout_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiveSettings {
    pub base_port: u16,
    pub timeout_s: u64,
}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub mode: ExecutionMode,
    pub service: ServiceKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub repetitions: u32,
    pub trace: TraceLevel,
    pub epos: EposSettings,
    pub dias: DiasSettings,
    pub dynamics: DynamicsSettings,
    pub live: LiveSettings,
}

pub const DEFAULT_CONFIG: &str = r#"# Execution mode: "sim" or "live".
mode = "sim"
# Services: "epos", "dias" or "both".
service = "epos"
seed = 1
output_dir = "out"
# Independent repetitions of a static run; each uses its own tree seed.
repetitions = 1
# Recorded events: "off", "protocol" (bootstrap messages) or "all".
trace = "protocol"

[epos]
# Profile 1-12 presets agents, horizon, alpha, beta and cost; keys given
# here override the preset.
# profile = 1
agents = 50
plans = 4
# "D1", "D3", "D7" or "reduced:<d>".
horizon = "reduced:64"
# Directory of agent-NNNN.plans files; generated from the seed when absent.
# plan_dir = "plans"
alpha = 0.0
beta = 0.0
# "MIN_VAR" or "MIN_RMSE".
cost = "MIN_VAR"
iterations = 50
# "lockstep" or "async".
mode = "lockstep"
# Straggler timeout; required for async.
# straggler_ms = 200
tree_seed = 0

[dias]
agents = 20
k = 9
view_size = 10
gossip_period_ms = 100
dissemination_period_ms = 200
bloom_m = 2048
bloom_h = 4
duration_ms = 20000
warmup_ms = 3000
# "synchronous" (every agent leaves and returns together) or "staggered".
churn = "synchronous"
sample_period_ms = 200
window = 20

[dynamics]
enabled = false
levels = ["LOW", "MEDIUM", "HIGH"]
# One intensity period (8 hours in the field).
period_ms = 60000
# One field minute of aggregation timings.
minute_ms = 2000
duration_ms = 180000
static_runs = 3
min_present_fraction = 0.75
step_timeout_ms = 5000

[live]
# Sequential ports from here; keep the range below the ephemeral ports.
base_port = 21000
timeout_s = 120
"#;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    mode: Option<String>,
    service: Option<String>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    repetitions: Option<u32>,
    trace: Option<String>,
    #[serde(default)]
    epos: RawEpos,
    #[serde(default)]
    dias: RawDias,
    #[serde(default)]
    dynamics: RawDynamics,
    #[serde(default)]
    live: RawLive,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEpos {
    profile: Option<i64>,
    agents: Option<usize>,
    plans: Option<usize>,
    horizon: Option<String>,
    plan_dir: Option<PathBuf>,
    alpha: Option<f64>,
    beta: Option<f64>,
    cost: Option<String>,
    iterations: Option<usize>,
    mode: Option<String>,
    straggler_ms: Option<u64>,
    tree_seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDias {
    agents: Option<usize>,
    k: Option<usize>,
    view_size: Option<usize>,
    gossip_period_ms: Option<u64>,
    dissemination_period_ms: Option<u64>,
    bloom_m: Option<usize>,
    bloom_h: Option<u32>,
    duration_ms: Option<u64>,
    warmup_ms: Option<u64>,
    churn: Option<String>,
    sample_period_ms: Option<u64>,
    window: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDynamics {
    enabled: Option<bool>,
    levels: Option<Vec<String>>,
    period_ms: Option<u64>,
    minute_ms: Option<u64>,
    duration_ms: Option<u64>,
    static_runs: Option<u64>,
    min_present_fraction: Option<f64>,
    step_timeout_ms: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLive {
    base_port: Option<u16>,
    timeout_s: Option<u64>,
}

/// Agents, horizon, alpha, beta and cost of a benchmark profile. Profiles
/// come in groups of four per scale: {no weights, selfish} x {variance,
/// RMSE}.
pub fn profile(n: u8) -> Option<(usize, Horizon, f64, f64, CostKind)> {
    if !(1..=12).contains(&n) {
        return None;
    }
    let i = (n - 1) as usize;
    let (agents, horizon) = [(50, Horizon::D1), (100, Horizon::D3), (300, Horizon::D7)][i / 4];
    let beta = if i % 2 == 1 { 1.0 } else { 0.0 };
    let cost = if i % 4 < 2 { CostKind::MinVar } else { CostKind::MinRmse };
    Some((agents, horizon, 0.0, beta, cost))
}

/// Line of `key` inside `[section]` (top level for an empty section), or
/// of the section header when the key is absent.
fn locate(text: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    let mut header = 1;
    for (no, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                header = no + 1;
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return no + 1;
                }
            }
        }
    }
    header
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

struct Checker<'a> {
    path: &'a str,
    text: &'a str,
}

impl Checker<'_> {
    fn fail<T>(&self, section: &str, key: &str, message: impl Into<String>) -> Result<T, ScenarioError> {
        let name = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
        Err(ScenarioError::Config { path: self.path.into(), line: locate(self.text, section, key), message: format!("{name}: {}", message.into()) })
    }

    fn positive<T: PartialOrd + Default + Copy>(&self, section: &str, key: &str, v: T) -> Result<T, ScenarioError> {
        if v <= T::default() {
            return self.fail(section, key, "must be positive");
        }
        Ok(v)
    }

    fn unit(&self, section: &str, key: &str, v: f64) -> Result<f64, ScenarioError> {
        if !(0.0..=1.0).contains(&v) {
            return self.fail(section, key, format!("{v} is outside [0, 1]"));
        }
        Ok(v)
    }
}

impl ScenarioConfig {
    pub fn defaults() -> ScenarioConfig {
        ScenarioConfig::parse(DEFAULT_CONFIG, "<defaults>").expect("defaults are valid")
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|_| ScenarioError::MissingFile(path.display().to_string()))?;
        let mut cfg = ScenarioConfig::parse(&text, &path.display().to_string())?;
        if let Some(dir) = &cfg.epos.plan_dir {
            if dir.is_relative() {
                cfg.epos.plan_dir = Some(path.parent().unwrap_or(Path::new(".")).join(dir));
            }
        }
        Ok(cfg)
    }

    /// Parses and validates a scenario; unset keys take their defaults.
    pub fn parse(text: &str, path: &str) -> Result<ScenarioConfig, ScenarioError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ScenarioError::Config {
            path: path.into(),
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(1),
            message: e.message().to_string(),
        })?;
        let c = Checker { path, text };

        let mode = match raw.mode.as_deref().unwrap_or("sim").to_ascii_lowercase().as_str() {
            "sim" => ExecutionMode::Sim,
            "live" => ExecutionMode::Live,
            other => return c.fail("", "mode", format!("unknown mode {other:?}, expected sim or live")),
        };
        let service = match raw.service.as_deref().unwrap_or("epos").to_ascii_lowercase().as_str() {
            "epos" => ServiceKind::Epos,
            "dias" => ServiceKind::Dias,
            "both" => ServiceKind::Both,
            other => return c.fail("", "service", format!("unknown service {other:?}, expected epos, dias or both")),
        };
        let trace = match raw.trace.as_deref().unwrap_or("protocol").to_ascii_lowercase().as_str() {
            "off" => TraceLevel::Off,
            "protocol" => TraceLevel::Protocol,
            "all" => TraceLevel::All,
            other => return c.fail("", "trace", format!("unknown trace level {other:?}")),
        };
        let repetitions = c.positive("", "repetitions", raw.repetitions.unwrap_or(1))?;

        let e = raw.epos;
        let preset = match e.profile {
            None => None,
            Some(p) => match u8::try_from(p).ok().and_then(profile) {
                Some(v) => Some(v),
                None => return c.fail("epos", "profile", format!("{p} is not a profile between 1 and 12")),
            },
        };
        let horizon = match &e.horizon {
            Some(h) => match h.parse::<Horizon>() {
                Ok(h) => h,
                Err(_) => return c.fail("epos", "horizon", format!("unknown horizon {h:?}")),
            },
            None => preset.map(|p| p.1).unwrap_or(Horizon::Reduced(64)),
        };
        let cost = match e.cost.as_deref() {
            Some(s) => match s.to_ascii_uppercase().replace('-', "_").as_str() {
                "MIN_VAR" => CostKind::MinVar,
                "MIN_RMSE" => CostKind::MinRmse,
                _ => return c.fail("epos", "cost", format!("unknown cost function {s:?}")),
            },
            None => preset.map(|p| p.4).unwrap_or(CostKind::MinVar),
        };
        let alpha = c.unit("epos", "alpha", e.alpha.or(preset.map(|p| p.2)).unwrap_or(0.0))?;
        let beta = c.unit("epos", "beta", e.beta.or(preset.map(|p| p.3)).unwrap_or(0.0))?;
        if alpha + beta > 1.0 {
            return c.fail("epos", "beta", format!("alpha + beta = {} exceeds 1", alpha + beta));
        }
        let iter_mode = match e.mode.as_deref().unwrap_or("lockstep").to_ascii_lowercase().as_str() {
            "lockstep" => IterationMode::Lockstep,
            "async" => IterationMode::Async,
            other => return c.fail("epos", "mode", format!("unknown iteration mode {other:?}")),
        };
        if let Some(ms) = e.straggler_ms {
            c.positive("epos", "straggler_ms", ms)?;
        }
        if iter_mode == IterationMode::Async && e.straggler_ms.is_none() {
            return c.fail("epos", "mode", "async iterations need straggler_ms");
        }
        let epos = EposSettings {
            profile: preset.and(e.profile.map(|p| p as u8)),
            agents: c.positive("epos", "agents", e.agents.or(preset.map(|p| p.0)).unwrap_or(50))?,
            plans: c.positive("epos", "plans", e.plans.unwrap_or(4))?,
            horizon,
            plan_dir: e.plan_dir,
            alpha,
            beta,
            cost,
            iterations: c.positive("epos", "iterations", e.iterations.unwrap_or(50))?,
            mode: iter_mode,
            straggler_ms: e.straggler_ms,
            tree_seed: e.tree_seed.unwrap_or(0),
        };

        let d = raw.dias;
        let churn = match d.churn.as_deref().unwrap_or("synchronous").to_ascii_lowercase().as_str() {
            "staggered" => DiasChurn::Staggered,
            "synchronous" => DiasChurn::Synchronous,
            other => return c.fail("dias", "churn", format!("unknown churn pattern {other:?}")),
        };
        let dias = DiasSettings {
            agents: c.positive("dias", "agents", d.agents.unwrap_or(20))?,
            k: c.positive("dias", "k", d.k.unwrap_or(9))?,
            view_size: c.positive("dias", "view_size", d.view_size.unwrap_or(10))?,
            gossip_period_ms: c.positive("dias", "gossip_period_ms", d.gossip_period_ms.unwrap_or(100))?,
            dissemination_period_ms: c.positive("dias", "dissemination_period_ms", d.dissemination_period_ms.unwrap_or(200))?,
            bloom_m: c.positive("dias", "bloom_m", d.bloom_m.unwrap_or(2048))?,
            bloom_h: c.positive("dias", "bloom_h", d.bloom_h.unwrap_or(4))?,
            duration_ms: c.positive("dias", "duration_ms", d.duration_ms.unwrap_or(20_000))?,
            warmup_ms: d.warmup_ms.unwrap_or(3_000),
            churn,
            sample_period_ms: c.positive("dias", "sample_period_ms", d.sample_period_ms.unwrap_or(200))?,
            window: c.positive("dias", "window", d.window.unwrap_or(20))?,
        };

        let y = raw.dynamics;
        let mut levels = Vec::new();
        for l in y.levels.unwrap_or_else(|| vec!["LOW".into(), "MEDIUM".into(), "HIGH".into()]) {
            match l.parse::<Level>() {
                Ok(v) => levels.push(v),
                Err(_) => return c.fail("dynamics", "levels", format!("unknown intensity {l:?}")),
            }
        }
        if levels.is_empty() {
            return c.fail("dynamics", "levels", "the intensity cycle is empty");
        }
        let dynamics = DynamicsSettings {
            enabled: y.enabled.unwrap_or(false),
            levels,
            period_ms: c.positive("dynamics", "period_ms", y.period_ms.unwrap_or(DESK_PERIOD_MS))?,
            minute_ms: c.positive("dynamics", "minute_ms", y.minute_ms.unwrap_or(DESK_MINUTE_MS))?,
            duration_ms: c.positive("dynamics", "duration_ms", y.duration_ms.unwrap_or(3 * DESK_PERIOD_MS))?,
            static_runs: y.static_runs.unwrap_or(3),
            min_present_fraction: c.unit("dynamics", "min_present_fraction", y.min_present_fraction.unwrap_or(0.75))?,
            step_timeout_ms: c.positive("dynamics", "step_timeout_ms", y.step_timeout_ms.unwrap_or(5_000))?,
        };
        if dynamics.enabled && service.epos() && dynamics.static_runs == 0 {
            return c.fail("dynamics", "static_runs", "latency needs at least one static run");
        }

        let base_port = raw.live.base_port.unwrap_or(21_000);
        let ports = 2 * (epos.agents + dias.agents) + 16;
        if mode == ExecutionMode::Live && (base_port < 10_000 || base_port as usize + ports > 65_535) {
            return c.fail("live", "base_port", format!("{base_port} leaves no room for {ports} five-digit ports"));
        }
        let live = LiveSettings { base_port, timeout_s: c.positive("live", "timeout_s", raw.live.timeout_s.unwrap_or(120))? };

        Ok(ScenarioConfig {
            mode,
            service,
            seed: raw.seed.unwrap_or(1),
            output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("out")),
            repetitions,
            trace,
            epos,
            dias,
            dynamics,
            live,
        })
    }

    /// One-line description used in reports.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "mode={:?} service={:?} seed={} repetitions={}", self.mode, self.service, self.seed, self.repetitions);
        if self.service.epos() {
            let e = &self.epos;
            let _ = write!(
                s,
                " epos(agents={} plans={} horizon={} alpha={} beta={} cost={:?} iterations={} mode={:?})",
                e.agents, e.plans, e.horizon, e.alpha, e.beta, e.cost, e.iterations, e.mode
            );
        }
        if self.service.dias() {
            let _ = write!(s, " dias(agents={} duration_ms={})", self.dias.agents, self.dias.duration_ms);
        }
        if self.dynamics.enabled {
            let levels: Vec<String> = self.dynamics.levels.iter().map(|l| l.to_string()).collect();
            let _ = write!(s, " dynamics(levels={} period_ms={} duration_ms={})", levels.join("/"), self.dynamics.period_ms, self.dynamics.duration_ms);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_line(text: &str) -> (usize, String) {
        match ScenarioConfig::parse(text, "t.toml") {
            Err(ScenarioError::Config { line, message, .. }) => (line, message),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn defaults_parse_and_empty_file_equals_defaults() {
        let d = ScenarioConfig::defaults();
        assert_eq!(d, ScenarioConfig::parse("", "empty").unwrap());
        assert_eq!(d.epos.horizon, Horizon::Reduced(64));
        assert_eq!(d.dynamics.levels, Level::ALL.to_vec());
    }

    #[test]
    fn profiles_follow_the_table() {
        assert_eq!(profile(1), Some((50, Horizon::D1, 0.0, 0.0, CostKind::MinVar)));
        assert_eq!(profile(2), Some((50, Horizon::D1, 0.0, 1.0, CostKind::MinVar)));
        assert_eq!(profile(3), Some((50, Horizon::D1, 0.0, 0.0, CostKind::MinRmse)));
        assert_eq!(profile(8), Some((100, Horizon::D3, 0.0, 1.0, CostKind::MinRmse)));
        assert_eq!(profile(9), Some((300, Horizon::D7, 0.0, 0.0, CostKind::MinVar)));
        assert_eq!(profile(0), None);
        assert_eq!(profile(13), None);
        let c = ScenarioConfig::parse("[epos]\nprofile = 2\nhorizon = \"reduced:32\"\n", "p").unwrap();
        assert_eq!((c.epos.agents, c.epos.beta, c.epos.horizon), (50, 1.0, Horizon::Reduced(32)));
    }

    #[test]
    fn errors_point_at_the_offending_line() {
        assert_eq!(err_line("seed = 1\n[epos]\nagents = 0\n").0, 3);
        assert_eq!(err_line("[epos]\nalpha = 0.7\nbeta = 0.6\n").0, 3);
        assert_eq!(err_line("[dias]\nk = 9\n[epos]\nalpha = 1.5\n").0, 4);
        assert_eq!(err_line("mode = \"cluster\"\n").0, 1);
        assert_eq!(err_line("seed = 1\nbogus = 2\n").0, 2);
        assert_eq!(err_line("seed = 1\n[epos]\nmode = \"async\"\n").0, 3);
        assert_eq!(err_line("[dynamics]\nlevels = []\n").0, 2);
        assert_eq!(err_line("[epos]\nprofile = 13\n").0, 2);
        assert_eq!(err_line("seed = \"x\"\n").0, 1);
        assert_eq!(err_line("mode = \"live\"\n[live]\nbase_port = 65500\n").0, 3);
    }

    #[test]
    fn optional_default_keys_parse_when_uncommented() {
        let text = DEFAULT_CONFIG.replace("# profile = 1", "profile = 1").replace("# straggler_ms = 200", "straggler_ms = 200");
        let c = ScenarioConfig::parse(&text, "d").unwrap();
        assert_eq!(c.epos.profile, Some(1));
        assert_eq!(c.epos.straggler_ms, Some(200));
    }
}
