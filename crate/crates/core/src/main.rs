use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use agentbed::conformance::soak;
use agentbed::data::{generate_plans, write_dataset, Horizon, NewsSource, NewsStreamSpec, PlanDatasetSpec};
use agentbed::dynamics::{metrics_csv, parse_metrics_csv};
use agentbed::runtime::ExecutionMode;
use agentbed::scenario::{compare_runs, report_from_metrics, run_scenario, ScenarioConfig, ScenarioError, DEFAULT_CONFIG};

#[derive(Parser)]
#[command(name = "agentbed", version, about = "Run multi-agent services in simulation or on live sockets")]
struct Cli {
    /// Print the documented default configuration and exit.
    #[arg(long)]
    print_defaults: bool,
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Common {
    /// Scenario configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// First port of the sequential LIVE port range.
    #[arg(long, global = true)]
    base_port: Option<u16>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sim,
    Live,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured scenario and write its artifacts.
    Run,
    /// Relative differences between a SIM and a LIVE metrics file.
    Compare { sim_csv: PathBuf, live_csv: PathBuf },
    /// Write a synthetic plan dataset, one file per agent.
    GenDataset {
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        plans: Option<usize>,
        /// D1, D3, D7 or reduced:<d>.
        #[arg(long)]
        horizon: Option<Horizon>,
    },
    /// Print per-source news counts as CSV, one line per tick.
    Stream {
        #[arg(long, conflicts_with = "endpoint")]
        synthetic: bool,
        /// HTTP endpoint returning one count per source.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = 28)]
        sources: usize,
        #[arg(long, default_value_t = 10)]
        ticks: u64,
        /// Pause between ticks.
        #[arg(long, default_value_t = 0)]
        period_ms: u64,
    },
    /// Summarize a metrics file.
    Report { metrics_csv: PathBuf },
    /// Run both services under cycling intensities and check for crashes
    /// and invariant violations.
    Soak {
        #[arg(long, default_value_t = 10)]
        minutes: u64,
    },
}

fn load(common: &Common) -> Result<ScenarioConfig, ScenarioError> {
    let mut cfg = match &common.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::defaults(),
    };
    if let Some(m) = common.mode {
        cfg.mode = match m {
            Mode::Sim => ExecutionMode::Sim,
            Mode::Live => ExecutionMode::Live,
        };
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = common.base_port {
        cfg.live.base_port = p;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|_| ScenarioError::MissingFile(path.display().to_string()))
}

fn execute(cli: Cli) -> Result<(), ScenarioError> {
    let command = cli.command.unwrap_or(Command::Run);
    let common = &cli.common;
    match command {
        Command::Run => {
            let cfg = load(common)?;
            let out = run_scenario(&cfg)?;
            print!("{}", out.report);
            println!("artifacts: {}", out.dir.display());
        }
        Command::Compare { sim_csv, live_csv } => {
            let c = compare_runs(&read(&sim_csv)?, &read(&live_csv)?)?;
            println!("iteration,mean_rel_g,mean_rel_l");
            for (t, g, l) in &c.per_iteration {
                println!("{t},{g},{l}");
            }
            println!("mean rel_g {}, mean rel_l {}", c.mean_rel_g, c.mean_rel_l);
            if let Some(out) = &common.out {
                fs::create_dir_all(out)?;
                fs::write(out.join("comparison.csv"), metrics_csv(&c.rows))?;
            }
        }
        Command::GenDataset { agents, plans, horizon } => {
            let cfg = load(common)?;
            let spec = PlanDatasetSpec {
                num_agents: agents.unwrap_or(cfg.epos.agents),
                plans_per_agent: plans.unwrap_or(cfg.epos.plans),
                horizon: horizon.unwrap_or(cfg.epos.horizon),
                seed: cfg.seed,
            };
            let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("plans"));
            let sets = generate_plans(&spec).map_err(|e| ScenarioError::Other(e.to_string()))?;
            let paths = write_dataset(&dir, &sets).map_err(|e| ScenarioError::Other(e.to_string()))?;
            println!("wrote {} plan files to {}", paths.len(), dir.display());
        }
        Command::Stream { synthetic: _, endpoint, sources, ticks, period_ms } => {
            let spec = NewsStreamSpec { num_sources: sources, tick_period_ms: period_ms, seed: common.seed.unwrap_or(0), endpoint };
            let mut src = NewsSource::new(&spec).map_err(|e| ScenarioError::Other(e.to_string()))?;
            for i in 0..ticks {
                match src.next_tick() {
                    Ok(t) => {
                        let cells: Vec<String> = t.counts.iter().map(|c| c.to_string()).collect();
                        println!("{},{}", t.tick, cells.join(","));
                    }
                    Err(e) => eprintln!("tick {i}: {e}"),
                }
                if period_ms > 0 && i + 1 < ticks {
                    thread::sleep(Duration::from_millis(period_ms));
                }
            }
        }
        Command::Report { metrics_csv } => {
            let records = parse_metrics_csv(&read(&metrics_csv)?).map_err(|e| ScenarioError::Other(e.to_string()))?;
            print!("{}", report_from_metrics(&records));
        }
        Command::Soak { minutes } => {
            let cfg = load(common)?;
            let dir = cfg.output_dir.clone();
            fs::create_dir_all(&dir)?;
            let rep = soak(&cfg, minutes * 60_000, Some(&dir.join("monitoring")))?;
            let text = rep.to_text();
            fs::write(dir.join("soak.txt"), &text)?;
            fs::write(dir.join("soak.csv"), rep.csv())?;
            print!("{text}");
            if !rep.passed() {
                return Err(ScenarioError::Aborted("soak failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.print_defaults {
        print!("{DEFAULT_CONFIG}");
        return ExitCode::SUCCESS;
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
