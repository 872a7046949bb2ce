//! Command-line front end.
//!
//! Exit codes: 0 success, 1 failed certificate or runtime failure, 2 usage
//! or file errors. Errors are printed as a single `error: <kind>: <message>`
//! line on stderr.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use super::{evaluate, write_histograms, write_report_csv, write_trajectory_csv, write_voltage_traces, EvalConfig};
use crate::checkpoint::{load_policy, Checkpoint, CheckpointBody, LoadedPolicy};
use crate::dynamics::{
    load_scenarios, rollout, rollout_trace, sample_scenario, save_scenarios, scenario_suite, EnvTrace, GridModel,
    RolloutConfig, Scenario, ScenarioConfig, ScenarioKind, EVAL_HORIZON,
};
use crate::grid::{generate_random_feeder, ImpedanceRange, RadialNetwork};
use crate::lyapunov::{certify_policy, CertifyConfig};
use crate::policy::{LocalPolicy, Policy, DEFAULT_EPS};
use crate::rl::{write_training_log, ActorKind, AgentScope, TrainConfig, Trainer, PROTOCOL_DT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "voltstab", version, about = "Stability-constrained RL for grid voltage control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a random radial feeder as JSON.
    GenerateNetwork(GenerateArgs),
    /// Roll out one policy on one scenario and write the trajectory CSV.
    Simulate(SimulateArgs),
    /// Train a policy with DDPG and write a checkpoint plus training log.
    Train(TrainArgs),
    /// Check the stability conditions for a checkpoint.
    Certify(CertifyArgs),
    /// Compare policies on a shared scenario suite.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, clap::Args)]
struct NetworkArg {
    /// Network JSON; defaults to the bundled 5-bus feeder.
    #[arg(long)]
    network: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct GenerateArgs {
    /// Number of non-substation buses.
    #[arg(long)]
    buses: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    r_min: Option<f64>,
    #[arg(long)]
    r_max: Option<f64>,
    #[arg(long)]
    x_min: Option<f64>,
    #[arg(long)]
    x_max: Option<f64>,
    /// Output path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    High,
    Low,
    Mixed,
}

impl From<KindArg> for ScenarioKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::High => ScenarioKind::HighVoltage,
            KindArg::Low => ScenarioKind::LowVoltage,
            KindArg::Mixed => ScenarioKind::Mixed,
        }
    }
}

#[derive(Debug, clap::Args)]
struct SimulateArgs {
    #[command(flatten)]
    network: NetworkArg,
    /// `linear`, `zero` or a checkpoint path.
    #[arg(long, default_value = "linear")]
    policy: String,
    /// Scenario JSON list; `--index` selects one entry.
    #[arg(long, conflicts_with = "env_trace")]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Exogenous voltage trace CSV (`t,bus_id,v_env`).
    #[arg(long)]
    env_trace: Option<PathBuf>,
    /// Scenario kind when sampling a fresh scenario.
    #[arg(long, value_enum, default_value = "high")]
    kind: KindArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = EVAL_HORIZON)]
    horizon: usize,
    #[arg(long, default_value_t = PROTOCOL_DT)]
    dt: f64,
    /// Output path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ActorArg {
    Stable,
    Unconstrained,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScopeArg {
    Decentralized,
    Joint,
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    #[command(flatten)]
    network: NetworkArg,
    /// JSON file with any subset of the training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    actor: Option<ActorArg>,
    #[arg(long, value_enum)]
    scope: Option<ScopeArg>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Log `wall_ms` as 0 so that logs are bit-reproducible.
    #[arg(long)]
    no_wall_clock: bool,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    log: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Json,
}

#[derive(Debug, clap::Args)]
struct CertifyArgs {
    #[command(flatten)]
    network: NetworkArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: FormatArg,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rollouts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Rollout horizon for the convergence clause.
    #[arg(long, default_value_t = EVAL_HORIZON)]
    horizon: usize,
    #[arg(long, default_value_t = PROTOCOL_DT)]
    dt: f64,
}

#[derive(Debug, clap::Args)]
struct EvaluateArgs {
    #[command(flatten)]
    network: NetworkArg,
    /// `name=spec` or `spec`, where spec is `linear`, `zero` or a checkpoint
    /// path. Repeatable.
    #[arg(long = "policy", required = true)]
    policies: Vec<String>,
    /// Number of sampled scenarios (ignored with `--scenario-file`).
    #[arg(long, default_value_t = 200)]
    scenarios: usize,
    #[arg(long)]
    scenario_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = EVAL_HORIZON)]
    horizon: usize,
    #[arg(long, default_value_t = PROTOCOL_DT)]
    dt: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Fail(String),
}

type CliResult = Result<i32, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn fail(e: impl std::fmt::Display) -> CliError {
    CliError::Fail(e.to_string())
}

/// Runs the CLI on `argv` (including the program name) and returns the
/// process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").to_string();
            report_error("usage", first.trim_start_matches("error: "));
            return EXIT_USAGE;
        }
    };
    let result = match cli.command {
        Command::GenerateNetwork(a) => generate_network(a),
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Certify(a) => certify(a),
        Command::Evaluate(a) => run_evaluate(a),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Usage(m)) => {
            report_error("usage", &m);
            EXIT_USAGE
        }
        Err(CliError::Fail(m)) => {
            report_error("failure", &m);
            EXIT_FAIL
        }
    }
}

fn report_error(kind: &str, msg: &str) {
    eprintln!("error: {kind}: {}", msg.replace('\n', " "));
}

fn load_network(arg: &NetworkArg) -> Result<RadialNetwork, CliError> {
    match &arg.network {
        None => Ok(RadialNetwork::five_bus()),
        Some(p) => {
            let loaded = RadialNetwork::load(p).map_err(usage)?;
            for w in &loaded.warnings {
                eprintln!("warning: {}: {w}", p.display());
            }
            Ok(loaded.value)
        }
    }
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    match path {
        None => Ok(Box::new(std::io::stdout().lock())),
        Some(p) => Ok(Box::new(BufWriter::new(
            File::create(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        ))),
    }
}

fn resolve_policy(spec: &str, model: &GridModel) -> Result<LoadedPolicy, CliError> {
    let body = match spec {
        "linear" => CheckpointBody::Linear {
            band: model.band.clone(),
        },
        "zero" => CheckpointBody::Zero {
            band: model.band.clone(),
        },
        path => {
            let p = load_policy(Path::new(path)).map_err(|e| usage(format!("{path}: {e}")))?;
            if p.band().len() != model.n() {
                return Err(usage(format!(
                    "{path}: policy has {} buses, network has {}",
                    p.band().len(),
                    model.n()
                )));
            }
            return Ok(p);
        }
    };
    Checkpoint::new(body).into_policy().map_err(usage)
}

fn generate_network(a: GenerateArgs) -> CliResult {
    let d = ImpedanceRange::default();
    let range = ImpedanceRange {
        r_min: a.r_min.unwrap_or(d.r_min),
        r_max: a.r_max.unwrap_or(d.r_max),
        x_min: a.x_min.unwrap_or(d.x_min),
        x_max: a.x_max.unwrap_or(d.x_max),
    };
    let net = generate_random_feeder(a.buses, a.seed, range).map_err(usage)?;
    let mut out = open_out(a.out.as_deref())?;
    writeln!(out, "{}", net.to_json()).map_err(fail)?;
    Ok(EXIT_OK)
}

fn simulate(a: SimulateArgs) -> CliResult {
    let net = load_network(&a.network)?;
    let model = GridModel::from_network(&net);
    let policy = resolve_policy(&a.policy, &model)?;
    let cfg = RolloutConfig {
        horizon: a.horizon,
        dt: a.dt,
        ..RolloutConfig::default()
    };
    let traj = if let Some(path) = &a.env_trace {
        let trace = EnvTrace::load(path, model.n()).map_err(usage)?;
        rollout_trace(&policy, &model, &trace, &vec![0.0; model.n()], &cfg).map_err(usage)?
    } else {
        let scenario = match &a.scenario {
            Some(path) => {
                let all = load_scenarios(path).map_err(usage)?;
                all.into_iter()
                    .nth(a.index)
                    .ok_or_else(|| usage(format!("{}: no scenario at index {}", path.display(), a.index)))?
            }
            None => {
                let scfg = ScenarioConfig {
                    kind: a.kind.into(),
                    seed: a.seed,
                    ..ScenarioConfig::default()
                };
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(a.seed);
                sample_scenario(&scfg, &model.band, model.v0, &mut rng)
            }
        };
        rollout(&policy, &model, &scenario.v_env, &scenario.q0, &cfg).map_err(usage)?
    };
    write_trajectory_csv(&traj, open_out(a.out.as_deref())?).map_err(fail)?;
    Ok(EXIT_OK)
}

fn train(a: TrainArgs) -> CliResult {
    let net = load_network(&a.network)?;
    let model = GridModel::from_network(&net);
    let mut cfg = match &a.config {
        None => TrainConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
    };
    if let Some(actor) = a.actor {
        cfg.actor = match actor {
            ActorArg::Stable => ActorKind::Stable,
            ActorArg::Unconstrained => ActorKind::Unconstrained,
        };
    }
    if let Some(scope) = a.scope {
        cfg.scope = match scope {
            ScopeArg::Decentralized => AgentScope::Decentralized,
            ScopeArg::Joint => AgentScope::Joint,
        };
    }
    if let Some(e) = a.episodes {
        cfg.episodes = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.no_wall_clock {
        cfg.record_wall_time = false;
    }
    let trainer = Trainer::new(model, cfg).map_err(usage)?;
    let outcome = trainer.train().map_err(fail)?;
    Checkpoint::from_trained(&outcome.policy).save(&a.checkpoint).map_err(usage)?;
    let log = File::create(&a.log).map_err(|e| usage(format!("{}: {e}", a.log.display())))?;
    write_training_log(&outcome.log, BufWriter::new(log)).map_err(fail)?;
    Ok(EXIT_OK)
}

fn certify(a: CertifyArgs) -> CliResult {
    let net = load_network(&a.network)?;
    let model = GridModel::from_network(&net);
    let path = a.checkpoint.display().to_string();
    let policy = resolve_policy(&path, &model)?;
    if !(a.dt.is_finite() && a.dt > 0.0) || a.horizon == 0 {
        return Err(usage("--dt must be positive and --horizon nonzero"));
    }
    let mut cfg = CertifyConfig {
        eps: policy.eps().unwrap_or(DEFAULT_EPS),
        dt: a.dt,
        horizon: a.horizon,
        ..CertifyConfig::default()
    };
    if let Some(r) = a.rollouts {
        cfg.rollouts = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let cert = certify_policy(&model, &policy, &path, &cfg).map_err(fail)?;
    let mut out = open_out(a.out.as_deref())?;
    match a.format {
        FormatArg::Text => write!(out, "{}", cert.summary()),
        FormatArg::Json => writeln!(out, "{}", serde_json::to_string_pretty(&cert).expect("certificate serializes")),
    }
    .map_err(fail)?;
    out.flush().map_err(fail)?;
    Ok(if cert.passed { EXIT_OK } else { EXIT_FAIL })
}

fn run_evaluate(a: EvaluateArgs) -> CliResult {
    let net = load_network(&a.network)?;
    let model = GridModel::from_network(&net);
    let scenarios: Vec<Scenario> = match &a.scenario_file {
        Some(p) => load_scenarios(p).map_err(usage)?,
        None => {
            let base = ScenarioConfig {
                seed: a.seed,
                ..ScenarioConfig::default()
            };
            scenario_suite(&base, &ScenarioKind::ALL, a.scenarios, &model.band, model.v0)
        }
    };
    if scenarios.is_empty() {
        return Err(usage("scenario count must be at least 1"));
    }
    let mut named: Vec<(String, LoadedPolicy)> = Vec::new();
    for spec in &a.policies {
        let (name, target) = match spec.split_once('=') {
            Some((n, t)) => (n.to_string(), t.to_string()),
            None => {
                let stem = Path::new(spec)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| spec.clone());
                (stem, spec.clone())
            }
        };
        if named.iter().any(|(n, _)| *n == name) {
            return Err(usage(format!("duplicate policy name `{name}`")));
        }
        named.push((name, resolve_policy(&target, &model)?));
    }
    let refs: Vec<(&str, &dyn Policy)> = named.iter().map(|(n, p)| (n.as_str(), p as &dyn Policy)).collect();
    let cfg = EvalConfig {
        horizon: a.horizon,
        dt: a.dt,
        ..EvalConfig::default()
    };
    let report = evaluate(&refs, &model, &scenarios, &cfg).map_err(usage)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| usage(format!("{}: {e}", a.out_dir.display())))?;
    let create = |name: &str| -> Result<BufWriter<File>, CliError> {
        let p = a.out_dir.join(name);
        Ok(BufWriter::new(File::create(&p).map_err(|e| usage(format!("{}: {e}", p.display())))?))
    };
    write_report_csv(&report, create("report.csv")?).map_err(fail)?;
    write_voltage_traces(&refs, &model, &scenarios, &cfg, create("voltage_traces.csv")?).map_err(fail)?;
    write_histograms(&report, model.v0, &cfg, create("terminal_histogram.csv")?).map_err(fail)?;
    save_scenarios(&a.out_dir.join("scenarios.json"), &scenarios).map_err(fail)?;
    for p in &report.policies {
        println!(
            "{}: stability {:.3}, recovery {:.2} steps, transient cost {:.4}",
            p.name, p.stability_rate, p.recovery_time.mean, p.transient_cost.mean
        );
    }
    println!("scenario hash {}", report.scenario_hash);
    Ok(EXIT_OK)
}
