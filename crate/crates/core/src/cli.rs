//! Command-line front end: `run`, `sweep` and `solve`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bounds::{AssumptionParams, DataStats};
use crate::config::{parse_config, parse_config_str, set_toml_key, ExperimentConfig};
use crate::error::{Error, Result};
use crate::optimizer::{
    brute_force_opt, coopt_fl, gpu_closed_form, uniform_closed_form, AllocationResult, Binding,
    OfflineObjective, BRUTE_FORCE_MAX_BATCH, BRUTE_FORCE_MAX_CLIENTS,
};
use crate::sim::{run_experiment, RunReport, Summary};
use crate::system::{feasibility_check, Budget, ClientProfile};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "fedbatch",
    version,
    about = "Budgeted federated learning simulator and batch/round optimizer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write metrics, manifest and summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; falls back to FEDBATCH_OUT.
        #[arg(long, env = "FEDBATCH_OUT")]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a grid of experiments over one or more config keys.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `key=v1,v2,...`; repeat for a product grid.
        #[arg(long, required = true)]
        axis: Vec<String>,
        #[arg(long, env = "FEDBATCH_OUT")]
        out: PathBuf,
        /// Comma-separated seeds shared by every grid point.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Solve an offline allocation instance with every solver.
    Solve {
        #[arg(long)]
        instance: PathBuf,
        /// Constant per-step compute time model.
        #[arg(long)]
        gpu_mode: bool,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
/// Errors are printed as a single `error: <kind>: <message>` line.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(
                e.kind(),
                K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand {
                    2
                } else {
                    0
                };
            }
            let text = e.to_string();
            let reason: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .filter(|l| !l.is_empty())
                .collect();
            let reason = reason.join(" ");
            let reason = reason.trim_start_matches("error: ");
            eprintln!(
                "error: usage: {}",
                if reason.is_empty() {
                    "invalid arguments"
                } else {
                    reason
                }
            );
            return 2;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

/// Single-line error report.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', "; ");
    format!("error: {}: {}", e.kind(), msg)
}

pub fn execute<W: std::io::Write>(cmd: Command, out: &mut W) -> Result<()> {
    match cmd {
        Command::Run {
            config,
            out: dir,
            seed,
        } => {
            let summary = cmd_run(&config, &dir, seed)?;
            writeln!(
                out,
                "{}",
                serde_json::to_string(&summary).map_err(json_err)?
            )?;
        }
        Command::Sweep {
            config,
            axis,
            out: dir,
            seeds,
        } => {
            let axes = axis
                .iter()
                .map(|a| parse_axis(a))
                .collect::<Result<Vec<_>>>()?;
            let rows = cmd_sweep(&config, &axes, &seeds, &dir)?;
            writeln!(out, "{} runs written to {}", rows.len(), dir.display())?;
        }
        Command::Solve { instance, gpu_mode } => {
            let text = fs::read_to_string(&instance)
                .map_err(|e| Error::Config(format!("{}: {e}", instance.display())))?;
            let inst = parse_instance(&text)?;
            let report = cmd_solve(&inst, gpu_mode)?;
            write!(out, "{}", report.render())?;
        }
    }
    Ok(())
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

/// Resolved config plus the provenance needed to rerun it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub version: String,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", dir.display()),
        ))
    })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Runs a resolved config and writes `metrics.csv`, `manifest.json` and
/// `summary.json` into `dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<(RunReport, Summary)> {
    create_dir(dir)?;
    let report = run_experiment(cfg)?;
    let summary = report.summary();
    let manifest = Manifest {
        config: cfg.clone(),
        seed: cfg.seed,
        version: VERSION.to_string(),
    };
    write_file(&dir.join("metrics.csv"), report.metrics_csv().as_bytes())?;
    write_file(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)
            .map_err(json_err)?
            .as_bytes(),
    )?;
    write_file(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)
            .map_err(json_err)?
            .as_bytes(),
    )?;
    Ok((report, summary))
}

pub fn cmd_run(config: &Path, dir: &Path, seed: Option<u64>) -> Result<Summary> {
    let mut cfg = parse_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(run_to_dir(&cfg, dir)?.1)
}

/// One sweep dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    /// Name as given on the command line.
    pub name: String,
    /// Dotted config key.
    pub key: String,
    pub values: Vec<toml::Value>,
}

fn axis_key(name: &str) -> &str {
    match name {
        "controller" => "controller.kind",
        "buffer" => "clients.buffer",
        "K" | "rounds" => "rounds",
        "budget" | "cost" => "budget.cost",
        "time" | "deadline" => "budget.time",
        "pattern" => "stream.pattern",
        other => other,
    }
}

fn parse_scalar(v: &str) -> toml::Value {
    if let Ok(i) = v.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = v.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = v.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(v.to_string())
    }
}

/// Parses `name=v1,v2,...`.
pub fn parse_axis(spec: &str) -> Result<Axis> {
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("axis `{spec}` must look like key=v1,v2")))?;
    let name = name.trim();
    if name.is_empty() {
        return Err(Error::InvalidArgument(format!("axis `{spec}` has no key")));
    }
    let values: Vec<toml::Value> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(parse_scalar)
        .collect();
    if values.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "axis `{name}` has no values"
        )));
    }
    Ok(Axis {
        name: name.to_string(),
        key: axis_key(name).to_string(),
        values,
    })
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One line of `comparison.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub run: String,
    pub point: Vec<String>,
    pub seed: u64,
    pub summary: Summary,
}

pub const COMPARISON_TAIL: &str =
    "seed,rounds_executed,rounds_planned,final_accuracy,best_accuracy,total_cost,total_time,stopped_early";

/// Runs the grid, writing one directory per run plus `comparison.csv`.
pub fn cmd_sweep(config: &Path, axes: &[Axis], seeds: &[u64], dir: &Path) -> Result<Vec<SweepRow>> {
    if axes.is_empty() || axes.iter().any(|a| a.values.is_empty()) {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    let text = fs::read_to_string(config)
        .map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    let base: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.message().replace('\n', "; ")))?;
    let base_dir = config.parent().unwrap_or(Path::new("."));

    let mut points: Vec<Vec<usize>> = vec![vec![]];
    for a in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                (0..a.values.len()).map(move |i| {
                    let mut q = p.clone();
                    q.push(i);
                    q
                })
            })
            .collect();
    }

    create_dir(dir)?;
    let mut rows = Vec::new();
    for point in &points {
        let mut doc = base.clone();
        for (a, &i) in axes.iter().zip(point) {
            set_toml_key(&mut doc, &a.key, a.values[i].clone())?;
        }
        let rendered = toml::to_string(&doc).map_err(|e| Error::Format(e.to_string()))?;
        let mut cfg = parse_config_str(&rendered)?;
        resolve_paths(&mut cfg, base_dir);
        let seed_list: Vec<u64> = if seeds.is_empty() {
            vec![cfg.seed]
        } else {
            seeds.to_vec()
        };
        let labels: Vec<String> = axes
            .iter()
            .zip(point)
            .map(|(a, &i)| value_label(&a.values[i]))
            .collect();
        for &seed in &seed_list {
            cfg.seed = seed;
            let mut name: Vec<String> = axes
                .iter()
                .zip(&labels)
                .map(|(a, l)| format!("{}-{}", sanitize(&a.name), sanitize(l)))
                .collect();
            name.push(format!("seed-{seed}"));
            let run = name.join("_");
            let (_, summary) = run_to_dir(&cfg, &dir.join(&run))?;
            rows.push(SweepRow {
                run,
                point: labels.clone(),
                seed,
                summary,
            });
        }
    }
    let csv = comparison_csv(axes, &rows);
    write_file(&dir.join("comparison.csv"), csv.as_bytes())?;
    Ok(rows)
}

fn resolve_paths(cfg: &mut ExperimentConfig, base: &Path) {
    if let crate::config::DataSource::File { train, test } = &mut cfg.data {
        for p in [train, test] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn comparison_csv(axes: &[Axis], rows: &[SweepRow]) -> String {
    let mut s = String::from("run");
    for a in axes {
        s.push(',');
        s.push_str(&a.name);
    }
    let _ = writeln!(s, ",{COMPARISON_TAIL}");
    for r in rows {
        s.push_str(&r.run);
        for p in &r.point {
            s.push(',');
            s.push_str(p);
        }
        let m = &r.summary;
        let _ = writeln!(
            s,
            ",{},{},{},{},{},{},{},{}",
            r.seed,
            m.rounds_executed,
            m.rounds_planned,
            m.final_accuracy,
            m.best_accuracy,
            m.total_cost,
            m.total_time,
            m.stop_reason.is_some()
        );
    }
    s
}

/// Offline allocation instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub rounds: u64,
    #[serde(default = "default_tau_max")]
    pub tau_max: u32,
    /// Initial optimality gap `F(w0) - F*`.
    #[serde(default = "one")]
    pub initial_gap: f64,
    pub params: AssumptionParams,
    pub budget: Budget,
    #[serde(rename = "client")]
    pub clients: Vec<InstanceClient>,
}

fn default_tau_max() -> u32 {
    10
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceClient {
    pub speed: f64,
    pub upload_time: f64,
    pub data: u64,
    pub variance: f64,
    #[serde(default)]
    pub buffer: Option<u64>,
    #[serde(default)]
    pub compute_time: Option<f64>,
}

impl Instance {
    pub fn profiles(&self) -> Vec<ClientProfile> {
        self.clients
            .iter()
            .map(|c| ClientProfile {
                speed: c.speed,
                upload_time: c.upload_time,
                data_count: c.data,
                variance: c.variance,
                buffer_capacity: c.buffer,
                compute_time: c.compute_time,
            })
            .collect()
    }
}

pub fn parse_instance(text: &str) -> Result<Instance> {
    toml::from_str(text).map_err(|e: toml::de::Error| {
        Error::Config(format!("instance: {}", e.message().replace('\n', "; ")))
    })
}

/// Solver outputs for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub solutions: Vec<(String, AllocationResult)>,
    /// Solvers that were not run, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl SolveReport {
    pub fn get(&self, name: &str) -> Option<&AllocationResult> {
        self.solutions
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<12} {:>4} {:>22}  {:<24} {}\n",
            "solver", "tau", "objective", "batch", "binding"
        );
        for (name, r) in &self.solutions {
            let batch = r
                .batch
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(",");
            let binding = r
                .binding
                .iter()
                .map(|b| match b {
                    Binding::Cost => "cost",
                    Binding::Time => "time",
                    Binding::Data => "data",
                })
                .collect::<Vec<_>>()
                .join(",");
            let _ = writeln!(
                s,
                "{name:<12} {:>4} {:>22.15e}  {batch:<24} {binding}",
                r.tau, r.objective
            );
        }
        for (name, why) in &self.skipped {
            let _ = writeln!(s, "{name:<12} skipped: {why}");
        }
        s
    }
}

/// Runs the closed forms, CoOptFL and, when small enough, brute force.
pub fn cmd_solve(inst: &Instance, gpu_mode: bool) -> Result<SolveReport> {
    let profiles = inst.profiles();
    inst.params.validate()?;
    feasibility_check(&inst.budget, &profiles, inst.rounds).into_result()?;
    let mut report = SolveReport {
        solutions: Vec::new(),
        skipped: Vec::new(),
    };
    if gpu_mode {
        let r = gpu_closed_form(
            inst.rounds,
            &inst.budget,
            &profiles,
            &inst.params,
            inst.initial_gap,
            inst.tau_max,
        )?;
        report.solutions.push(("gpu".into(), r));
        return Ok(report);
    }
    let objective = OfflineObjective {
        rounds: inst.rounds,
        params: inst.params,
        stats: DataStats::from_profiles(&profiles),
        initial_gap: inst.initial_gap,
    };
    match uniform_closed_form(
        inst.rounds,
        &inst.budget,
        &profiles,
        &inst.params,
        inst.initial_gap,
        inst.tau_max,
    ) {
        Ok(r) => report.solutions.push(("uniform".into(), r)),
        Err(Error::Infeasible(why)) => report.skipped.push(("uniform".into(), why)),
        Err(e) => return Err(e),
    }
    let coopt = coopt_fl(
        &objective,
        &profiles,
        &inst.budget,
        inst.rounds,
        inst.tau_max,
    )?;
    report.solutions.push(("coopt-fl".into(), coopt));
    let s_cap = profiles
        .iter()
        .map(ClientProfile::data_cap)
        .max()
        .unwrap_or(1)
        .min(inst.budget.total_batch_cap(inst.rounds, 1).max(1));
    if profiles.len() <= BRUTE_FORCE_MAX_CLIENTS && s_cap <= BRUTE_FORCE_MAX_BATCH {
        let r = brute_force_opt(
            &objective,
            &profiles,
            &inst.budget,
            inst.rounds,
            inst.tau_max,
            s_cap,
        )?;
        report.solutions.push(("brute-force".into(), r));
    } else {
        report.skipped.push((
            "brute-force".into(),
            format!("needs at most {BRUTE_FORCE_MAX_CLIENTS} clients and batch cap {BRUTE_FORCE_MAX_BATCH}"),
        ));
    }
    Ok(report)
}
