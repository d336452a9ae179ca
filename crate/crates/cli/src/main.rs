use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sociallight::advantage::AdvantageMode;
use sociallight::config::{config_from_value, load_config, ControllerType, ExperimentConfig};
use sociallight::controllers::{ActionMode, Controller, ControllerKind};
use sociallight::env::FlowSource;
use sociallight::flows::{generate_flows, load_flows, save_flows, RateSchedule};
use sociallight::netmodel::{build_grid_network, default_phase_table, load_network, LinkTemplates};
use sociallight::nn::load_checkpoint;
use sociallight::trainer::{
    eval_seeds, evaluate, params_for, train, training_seed, EvalRow, EvalTable, Experiment, LogKind, LogRecord,
    MetricValues, Scenario, TrainOptions,
};

/// Overrides the number of OS threads used by training.
const THREADS_ENV: &str = "SOCIALLIGHT_THREADS";

#[derive(Parser)]
#[command(name = "sociallight", version, about = "Traffic signal control with counterfactual multi-agent actor-critic")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Poisson trip file for a network.
    GenFlows(GenFlowsArgs),
    /// Train a policy from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a classical controller.
    #[command(group(ArgGroup::new("source").required(true).multiple(false)))]
    Eval(EvalArgs),
    /// Train and evaluate several methods on identical seeds.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenFlowsArgs {
    /// Network file; a generated grid when absent.
    #[arg(long)]
    net: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    rows: usize,
    #[arg(long, default_value_t = 3)]
    cols: usize,
    /// Arrival rate in vehicles per second.
    #[arg(long)]
    rate: f64,
    /// Horizon in seconds.
    #[arg(long, default_value_t = 3600.0)]
    horizon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, group = "source")]
    checkpoint: Option<PathBuf>,
    /// fixed_time, greedy or max_pressure.
    #[arg(long, group = "source")]
    controller: Option<String>,
    /// Config file; defaults to the checkpoint's embedded config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON list of scenarios; the config's flows on held-out seeds when absent.
    #[arg(long)]
    scenarios: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated: learned modes and classical controllers.
    #[arg(long, value_delimiter = ',', required = true)]
    methods: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

/// An error in the invocation rather than a runtime fault.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<sociallight::Error>() {
        Some(sociallight::Error::Config(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenFlows(a) => cmd_gen_flows(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_gen_flows(a: GenFlowsArgs) -> Result<()> {
    if !(a.rate.is_finite() && a.rate > 0.0) {
        return Err(usage(format!("--rate must be positive, got {}", a.rate)));
    }
    if !(a.horizon.is_finite() && a.horizon > 0.0) {
        return Err(usage(format!("--horizon must be positive, got {}", a.horizon)));
    }
    let net = match &a.net {
        Some(path) => load_network(path).with_context(|| format!("loading {}", path.display()))?,
        None => {
            if a.rows == 0 || a.cols == 0 {
                return Err(usage("--rows and --cols must be >= 1"));
            }
            build_grid_network(a.rows, a.cols, &LinkTemplates::default(), &default_phase_table())?
        }
    };
    let flows = generate_flows(&net, a.rate, a.horizon, a.seed)?;
    save_flows(&flows, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} trips", flows.trips.len());
    Ok(())
}

fn thread_override() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    let exp = Experiment::new(cfg)?;
    let resume = match &a.resume {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let out = train(
        &exp,
        TrainOptions {
            out_dir: Some(a.out_dir.clone()),
            resume,
            threads: thread_override()?,
        },
    )?;
    let trained = out.log.iter().filter(|r| r.kind == LogKind::Train).count();
    println!("trained {trained} episodes, {} updates", out.checkpoint.version);
    if let Some(r) = out.log.iter().rev().find(|r| r.kind == LogKind::Eval) {
        println!(
            "final eval: mean return {:.2}, trip time {}",
            r.values.mean_return,
            fmt_opt(r.values.avg_trip_time)
        );
    }
    println!("outputs in {}", a.out_dir.display());
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.2}"))
}

/// One scenario entry in a `--scenarios` file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioEntry {
    name: String,
    rate: Option<f64>,
    schedule: Option<Vec<(f64, f64)>>,
    flows: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
}

fn load_scenarios(path: &Path, cfg: &ExperimentConfig) -> Result<Vec<Scenario>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let entries: Vec<ScenarioEntry> =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if entries.is_empty() {
        return Err(usage(format!("{} lists no scenarios", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let default_seeds = eval_seeds(cfg.training.seed, cfg.training.eval_seeds);
    entries
        .into_iter()
        .map(|e| {
            let source = match (e.rate, e.schedule, e.flows) {
                (Some(r), None, None) => poisson(RateSchedule::constant(r), cfg)?,
                (None, Some(s), None) => poisson(RateSchedule { segments: s }, cfg)?,
                (None, None, Some(f)) => FlowSource::Fixed(Arc::new(load_flows(&base.join(f))?)),
                (None, None, None) => cfg.flow_source()?,
                _ => {
                    return Err(usage(format!(
                        "scenario {:?}: give at most one of rate, schedule, flows",
                        e.name
                    )))
                }
            };
            Ok(Scenario {
                name: e.name,
                source,
                seeds: e.seeds.unwrap_or_else(|| default_seeds.clone()),
            })
        })
        .collect()
}

fn poisson(schedule: RateSchedule, cfg: &ExperimentConfig) -> Result<FlowSource> {
    schedule.validate().map_err(|e| usage(e.to_string()))?;
    Ok(FlowSource::Poisson {
        schedule,
        horizon: cfg.horizon_s(),
    })
}

fn default_scenario(exp: &Experiment) -> Scenario {
    let t = &exp.config.training;
    Scenario {
        name: "default".into(),
        source: exp.source.clone(),
        seeds: eval_seeds(t.seed, t.eval_seeds),
    }
}

/// Refuses evaluation seeds that a training run with this config used.
fn check_disjoint(cfg: &ExperimentConfig, scenarios: &[Scenario]) -> Result<()> {
    let t = &cfg.training;
    let used: std::collections::HashSet<u64> = (0..t.workers)
        .flat_map(|w| (0..t.episodes).map(move |e| training_seed(t.seed, w, e)))
        .collect();
    for sc in scenarios {
        if let Some(s) = sc.seeds.iter().find(|s| used.contains(s)) {
            return Err(usage(format!(
                "scenario {:?}: seed {s} was used for training",
                sc.name
            )));
        }
    }
    Ok(())
}

const METRIC_COLUMNS: [&str; 5] = [
    "avg_queue_length",
    "avg_speed",
    "avg_intersection_delay",
    "avg_cumulative_delay",
    "avg_trip_time",
];

fn metric_cells(v: &MetricValues) -> Vec<String> {
    let opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
    vec![
        v.avg_queue_length.to_string(),
        v.avg_speed.to_string(),
        v.avg_intersection_delay.to_string(),
        v.avg_cumulative_delay.to_string(),
        opt(v.avg_trip_time),
        v.mean_return.to_string(),
        v.vehicles_entered.to_string(),
        v.vehicles_exited.to_string(),
    ]
}

fn metric_header() -> Vec<&'static str> {
    let mut h = METRIC_COLUMNS.to_vec();
    h.extend(["mean_return", "vehicles_entered", "vehicles_exited"]);
    h
}

fn write_rows_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let mut header = vec!["scenario", "seed"];
    header.extend(metric_header());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.scenario.clone(), r.seed.to_string()];
        rec.extend(metric_cells(&r.values));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    controller: &'a str,
    episodes: usize,
    mean: &'a MetricValues,
    std: &'a MetricValues,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn parse_controller(name: &str) -> Result<ControllerKind> {
    ControllerKind::parse(name).ok_or_else(|| {
        usage(format!(
            "unknown controller {name:?}; expected fixed_time, greedy or max_pressure"
        ))
    })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let checkpoint = match &a.checkpoint {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let cfg = match (&a.config, &checkpoint) {
        (Some(p), _) => load_config(p).with_context(|| format!("loading {}", p.display()))?,
        (None, Some(ck)) => config_from_value(&ck.config).context("checkpoint config")?,
        (None, None) => ExperimentConfig::default(),
    };
    let exp = Experiment::new(cfg)?;
    let (controller, label) = match (&checkpoint, &a.controller) {
        (Some(ck), _) => {
            let params = params_for(&exp, ck).map_err(|e| usage(format!("refusing to evaluate: {e}")))?;
            (
                Controller::Policy {
                    params,
                    mode: ActionMode::Argmax,
                },
                "policy".to_string(),
            )
        }
        (None, Some(name)) => {
            let kind = parse_controller(name)?;
            (Controller::from_kind(kind, &exp.config.controller.plan), kind.name().to_string())
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let scenarios = match &a.scenarios {
        Some(p) => load_scenarios(p, &exp.config)?,
        None => vec![default_scenario(&exp)],
    };
    check_disjoint(&exp.config, &scenarios)?;
    let table = evaluate(&exp.net, exp.env_config(), &controller, &scenarios)?;
    fs::create_dir_all(&a.out)?;
    write_rows_csv(&a.out.join("metrics.csv"), &table.rows)?;
    write_json(
        &a.out.join("summary.json"),
        &Summary {
            controller: &label,
            episodes: table.rows.len(),
            mean: &table.mean,
            std: &table.std,
        },
    )?;
    write_json(&a.out.join("resolved_config.json"), &exp.config)?;
    print_table(&[(label, table)]);
    Ok(())
}

enum Method {
    Learned(AdvantageMode),
    Classical(ControllerKind),
}

fn parse_method(name: &str) -> Result<Method> {
    if let Some(m) = AdvantageMode::parse(name) {
        return Ok(Method::Learned(m));
    }
    if let Some(k) = ControllerKind::parse(name) {
        return Ok(Method::Classical(k));
    }
    let known: Vec<&str> = AdvantageMode::ALL
        .iter()
        .map(|m| m.name())
        .chain(["fixed_time", "greedy", "max_pressure"])
        .collect();
    Err(usage(format!("unknown method {name:?}; expected one of {}", known.join(", "))))
}

fn write_curve_csv(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["episode", "mean_return", "avg_speed", "avg_intersection_delay"])?;
    for r in log.iter().filter(|r| r.kind == LogKind::Train) {
        w.write_record([
            r.episode.to_string(),
            r.values.mean_return.to_string(),
            r.values.avg_speed.to_string(),
            r.values.avg_intersection_delay.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let methods = a
        .methods
        .iter()
        .map(|m| Ok((m.clone(), parse_method(m)?)))
        .collect::<Result<Vec<_>>>()?;
    let cfg = load_config(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    let exp = Experiment::new(cfg.clone())?;
    let scenario = default_scenario(&exp);
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("resolved_config.json"), &cfg)?;
    let threads = thread_override()?;
    let mut results = Vec::new();
    for (name, method) in methods {
        let controller = match method {
            Method::Classical(kind) => Controller::from_kind(kind, &cfg.controller.plan),
            Method::Learned(mode) => {
                let mut c = cfg.clone();
                c.advantage.mode = mode;
                c.controller.kind = ControllerType::Policy;
                let run = Experiment::new(c)?;
                eprintln!("training {name}");
                let out = train(
                    &run,
                    TrainOptions {
                        out_dir: Some(a.out.join(&name)),
                        resume: None,
                        threads,
                    },
                )?;
                write_curve_csv(&a.out.join(format!("curves_{name}.csv")), &out.log)?;
                Controller::Policy {
                    params: Arc::new(out.checkpoint.params),
                    mode: ActionMode::Argmax,
                }
            }
        };
        let table = evaluate(&exp.net, exp.env_config(), &controller, std::slice::from_ref(&scenario))?;
        results.push((name, table));
    }
    write_comparison(&a.out, &results)?;
    print_table(&results);
    Ok(())
}

fn write_comparison(out: &Path, results: &[(String, EvalTable)]) -> Result<()> {
    let path = out.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    let mut header = vec!["method".to_string()];
    for c in metric_header() {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    w.write_record(&header)?;
    for (name, t) in results {
        let mut rec = vec![name.clone()];
        for (m, s) in metric_cells(&t.mean).into_iter().zip(metric_cells(&t.std)) {
            rec.push(m);
            rec.push(s);
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    let json: Vec<_> = results
        .iter()
        .map(|(name, t)| {
            serde_json::json!({
                "method": name,
                "mean": t.mean,
                "std": t.std,
                "rows": t.rows,
            })
        })
        .collect();
    write_json(&out.join("comparison.json"), &json)
}

fn print_table(results: &[(String, EvalTable)]) {
    println!(
        "{:<18} {:>16} {:>16} {:>18} {:>18} {:>18}",
        "method", "queue length", "speed (m/s)", "int. delay (s)", "cum. delay (s)", "trip time (s)"
    );
    let cell = |m: f64, s: f64| format!("{m:.2} ({s:.2})");
    for (name, t) in results {
        let trip = match (t.mean.avg_trip_time, t.std.avg_trip_time) {
            (Some(m), Some(s)) => cell(m, s),
            _ => "n/a".into(),
        };
        println!(
            "{:<18} {:>16} {:>16} {:>18} {:>18} {:>18}",
            name,
            cell(t.mean.avg_queue_length, t.std.avg_queue_length),
            cell(t.mean.avg_speed, t.std.avg_speed),
            cell(t.mean.avg_intersection_delay, t.std.avg_intersection_delay),
            cell(t.mean.avg_cumulative_delay, t.std.avg_cumulative_delay),
            trip
        );
    }
}
