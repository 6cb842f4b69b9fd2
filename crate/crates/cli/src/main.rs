use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use hccn::baselines::{greedy_local_placement, oracle_cooperative_placement, random_placement};
use hccn::config::ConfigError;
use hccn::sim::{
    load_scenario, run_episode, run_pipeline, sweep, write_rows_csv, CacheState, Policy, Predictor, SimError, SweepAxis,
    SweepRow,
};
use hccn::solver::{solve, write_trace_csv};
use hccn::{parse_config, Placement, ProblemInstance, ScenarioConfig, SolverConfig};

#[derive(Parser)]
#[command(name = "hccn", version, about = "Proactive cooperative caching simulator for RSU/MBS vehicular networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Place files for one episode and report its metrics.
    Solve(Common),
    /// Run every episode once per capacity value.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// rsu_cap or mbs_cap.
        #[arg(long, default_value = "rsu_cap")]
        axis: String,
        /// Comma-separated capacities in Mb.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Run the built-in two-cluster scenario.
    Demo(Common),
    /// Check a config file and echo it with defaults filled in.
    Validate(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario TOML; the built-in scenario when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    /// Comma-separated policy names or `all`.
    #[arg(long)]
    policies: Option<String>,
    /// Worker threads; 1 is the reference mode.
    #[arg(long)]
    threads: Option<usize>,
    /// Write the solver iteration trace.
    #[arg(long)]
    trace: bool,
    /// section.key=value, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug)]
enum CliError {
    Config(ConfigError),
    Sim(SimError),
    Io(PathBuf, io::Error),
    Usage(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Sim(e)
    }
}

impl CliError {
    fn to_json(&self) -> Value {
        let (module, message) = match self {
            CliError::Config(e) => ("config".to_string(), e.to_string()),
            CliError::Sim(e) => {
                let text = e.to_string();
                match text.split_once(": ") {
                    Some((m, rest)) => (m.to_string(), rest.to_string()),
                    None => ("sim_engine".to_string(), text),
                }
            }
            CliError::Io(p, e) => ("io".to_string(), format!("{}: {e}", p.display())),
            CliError::Usage(m) => ("cli".to_string(), m.clone()),
        };
        json!({ "status": "error", "module": module, "message": message })
    }
}

/// Prints each distinct warning once.
struct StderrLogger {
    seen: Mutex<BTreeSet<String>>,
}

impl log::Log for StderrLogger {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::Level::Warn
    }

    fn log(&self, r: &log::Record) {
        if !self.enabled(r.metadata()) {
            return;
        }
        let line = format!("{}: {}", r.level().as_str().to_lowercase(), r.args());
        if self.seen.lock().map(|mut s| s.insert(line.clone())).unwrap_or(true) {
            eprintln!("{line}");
        }
    }

    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger { seen: Mutex::new(BTreeSet::new()) };

fn main() -> ExitCode {
    let _ = log::set_logger(&LOGGER).map(|()| log::set_max_level(log::LevelFilter::Warn));
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<Value, CliError> {
    let common = match &command {
        Command::Solve(c) | Command::Demo(c) | Command::Validate(c) => c,
        Command::Sweep { common, .. } => common,
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))?;
    }
    let config = load_config(common)?;
    match &command {
        Command::Validate(_) => Ok(json!({
            "command": "validate",
            "status": "ok",
            "config": serde_json::to_value(&config).expect("config serializes"),
        })),
        Command::Demo(c) => demo(c, &config),
        Command::Solve(c) => solve_one(c, &config),
        Command::Sweep { common, axis, values } => run_sweep(common, &config, axis, values),
    }
}

fn load_config(c: &Common) -> Result<ScenarioConfig, CliError> {
    Ok(match &c.config {
        Some(path) => parse_config(path, &c.overrides)?,
        None => ScenarioConfig::from_toml_str(&ScenarioConfig::example().to_toml_string(), &c.overrides)?,
    })
}

fn policies(c: &Common, default: &str) -> Result<Vec<Policy>, CliError> {
    Ok(Policy::parse_list(c.policies.as_deref().unwrap_or(default))?)
}

fn seed(c: &Common, config: &ScenarioConfig) -> u64 {
    c.seed.unwrap_or(config.scenario.seed)
}

fn create_file(dir: &Path, name: &str) -> Result<(PathBuf, io::BufWriter<fs::File>), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    let path = dir.join(name);
    let file = fs::File::create(&path).map_err(|e| CliError::Io(path.clone(), e))?;
    Ok((path, io::BufWriter::new(file)))
}

fn write_rows(dir: &Path, name: &str, rows: &[SweepRow]) -> Result<PathBuf, CliError> {
    let (path, mut out) = create_file(dir, name)?;
    write_rows_csv(rows, &mut out).and_then(|()| out.flush()).map_err(|e| CliError::Io(path.clone(), e))?;
    Ok(path)
}

fn opt(x: Option<f64>) -> Value {
    x.map_or(Value::Null, Value::from)
}

fn demo(c: &Common, config: &ScenarioConfig) -> Result<Value, CliError> {
    let seed = seed(c, config);
    let policies = policies(c, "all")?;
    let sc = load_scenario(config, seed)?;
    let report = run_pipeline(&sc, &policies, config)?;
    let rows = SweepRow::from_report(&report, config.capacities.rsu_cap);
    let path = write_rows(&c.out_dir, "demo.csv", &rows)?;
    let metrics: serde_json::Map<String, Value> = report
        .metrics
        .iter()
        .map(|m| (m.policy.to_string(), json!({ "hit_ratio": opt(m.hit_ratio()), "avg_delay_s": opt(m.avg_delay()) })))
        .collect();
    Ok(json!({
        "command": "demo",
        "status": "ok",
        "seed": seed,
        "episodes": sc.episodes,
        "requests": sc.requests.len(),
        "no_requests": report.no_requests(),
        "metrics": metrics,
        "ppm_mae": report.ppm_mae,
        "uniform_mae": report.uniform_mae,
        "serial_makespan_s": report.serial_makespan,
        "pipelined_makespan_s": report.pipelined_makespan,
        "csv": path.display().to_string(),
    }))
}

fn run_sweep(c: &Common, config: &ScenarioConfig, axis: &str, values: &[f64]) -> Result<Value, CliError> {
    let axis: SweepAxis = axis.parse()?;
    let seed = seed(c, config);
    let policies = policies(c, "all")?;
    let sc = load_scenario(config, seed)?;
    let rows = sweep(config, &sc, axis, values, &policies)?;
    let path = write_rows(&c.out_dir, "sweep.csv", &rows)?;
    Ok(json!({
        "command": "sweep",
        "status": "ok",
        "seed": seed,
        "axis": axis.name(),
        "values": values,
        "rows": rows.len(),
        "csv": path.display().to_string(),
    }))
}

/// Places files for the first episode with a single policy.
fn solve_one(c: &Common, config: &ScenarioConfig) -> Result<Value, CliError> {
    let policy = match policies(c, "predicted-cooperative")?.as_slice() {
        [Policy::Lru] => return Err(CliError::Usage("lru is reactive and has no placement to solve".into())),
        [p] => *p,
        _ => return Err(CliError::Usage("solve takes exactly one policy".into())),
    };
    let seed = seed(c, config);
    let sc = load_scenario(config, seed)?;
    let inputs = Predictor::new(&sc, config)?.predict_episode(&sc, 0)?;
    let net = &sc.network;
    let instance = |oracle: bool| -> Result<ProblemInstance, SimError> {
        let (res, dem) = if oracle {
            (inputs.oracle_residence.clone(), inputs.oracle_demand.clone())
        } else {
            (inputs.predicted_residence.clone(), inputs.predicted_demand.clone())
        };
        Ok(ProblemInstance::new(net.clone(), res, dem)?)
    };
    let cfg = SolverConfig::from(&config.solver);
    let mut trace = None;
    let mut iterations = 0;
    let mut termination = None;
    let placement = match policy {
        Policy::PredictedCooperative => {
            let report = solve(&instance(false)?, &cfg).map_err(SimError::from)?;
            iterations = report.iterations;
            termination = Some(report.termination.as_str());
            trace = Some(report.trace);
            report.placement
        }
        Policy::OracleCooperative => {
            let o = oracle_cooperative_placement(&instance(true)?, &cfg).map_err(SimError::from)?;
            iterations = o.iterations;
            o.placement
        }
        Policy::Noncooperative => greedy_local_placement(&instance(false)?),
        Policy::Random => random_placement(&net.catalog, &net.capacities, seed),
        Policy::Lru => unreachable!("rejected above"),
    };
    let result = run_episode(&sc, &mut CacheState::Fixed(placement.clone()), 0, config.scenario.warmup_fraction)?;
    let placement_path = write_placement(&c.out_dir, &placement)?;
    let mut summary = json!({
        "command": "solve",
        "status": "ok",
        "seed": seed,
        "policy": policy.name(),
        "iterations": iterations,
        "termination": termination,
        "expected_cost": hccn::objective::CostModel::new(&instance(false)?).placement_cost(&placement),
        "requests": result.requests(),
        "hit_ratio": opt((result.requests() > 0).then(|| result.hits as f64 / result.requests() as f64)),
        "avg_delay_s": opt((result.requests() > 0).then(|| result.total_delay / result.requests() as f64)),
        "placement": placement_path.display().to_string(),
    });
    if c.trace {
        let records = trace.unwrap_or_default();
        let (path, mut out) = create_file(&c.out_dir, "trace.csv")?;
        write_trace_csv(&records, &mut out).and_then(|()| out.flush()).map_err(|e| CliError::Io(path.clone(), e))?;
        summary["trace"] = Value::from(path.display().to_string());
    }
    Ok(summary)
}

fn write_placement(dir: &Path, p: &Placement) -> Result<PathBuf, CliError> {
    let (path, mut out) = create_file(dir, "placement.csv")?;
    let mut write = || -> io::Result<()> {
        writeln!(out, "tier,node,file")?;
        for r in 0..p.rsu_count() {
            for f in p.rsu_files(r) {
                writeln!(out, "rsu,{r},{f}")?;
            }
        }
        for m in 0..p.mbs_count() {
            for f in p.mbs_files(m) {
                writeln!(out, "mbs,{m},{f}")?;
            }
        }
        out.flush()
    };
    write().map_err(|e| CliError::Io(path.clone(), e))?;
    Ok(path)
}
