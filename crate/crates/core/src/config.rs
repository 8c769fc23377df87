//! Experiment configuration: TOML schema, defaults and validation.
//!
//! A config file is parsed into loosely typed raw sections, then resolved
//! into an [`ExperimentConfig`] with every default filled in. Validation
//! problems are collected and reported together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::AssumptionParams;
use crate::data::{
    ArrivalPattern, BlobSpec, ClassMode, PartitionSpec, SamplingPolicy, StreamConfig,
};
use crate::error::{Error, Result};
use crate::model::LossKind;
use crate::system::Budget;

pub const DEFAULT_LEARNING_RATE: f64 = 0.005;
pub const DEFAULT_COST_PER_SAMPLE: f64 = 0.0005;
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_INITIAL_BATCH: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Dynamite,
    Fedavg,
    DynamicTau,
    NoStraggler,
    UniformStatic,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Dynamite => "dynamite",
            Self::Fedavg => "fedavg",
            Self::DynamicTau => "dynamic_tau",
            Self::NoStraggler => "no_straggler",
            Self::UniformStatic => "uniform_static",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamite" => Ok(Self::Dynamite),
            "fedavg" => Ok(Self::Fedavg),
            "dynamic_tau" => Ok(Self::DynamicTau),
            "no_straggler" => Ok(Self::NoStraggler),
            "uniform_static" => Ok(Self::UniformStatic),
            other => Err(Error::Config(format!(
                "unknown controller `{other}` (expected dynamite, fedavg, dynamic_tau, no_straggler or uniform_static)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    /// Fixed local steps for the fixed-plan controllers.
    pub tau: u32,
    /// Fixed per-client batch for the fixed-plan controllers.
    pub batch: u64,
    /// Loss-increase threshold for refreshing the variance estimate.
    pub epsilon: f64,
    /// Per-client batch for the first rounds, before estimates exist.
    pub initial_batch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(BlobSpec),
    File { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientSetup {
    /// True compute speed, samples per second.
    pub speed: f64,
    /// True per-round upload time, seconds.
    pub upload_time: f64,
    /// Buffer capacity; `None` stores the whole static partition.
    pub buffer: Option<u64>,
}

/// Fully resolved experiment description; also the run manifest payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: u64,
    pub tau_max: u32,
    pub learning_rate: f64,
    pub eval_stride: u64,
    /// Worker threads for client execution; 0 uses all cores.
    pub threads: usize,
    pub model: LossKind,
    pub lambda: f64,
    pub data: DataSource,
    pub partition: PartitionSpec,
    pub clients: Vec<ClientSetup>,
    /// Log-standard-deviation of the compute and upload time multipliers.
    pub noise: f64,
    pub budget: Budget,
    pub stream: Option<StreamConfig>,
    pub sampling: SamplingPolicy,
    pub controller: ControllerConfig,
    /// Initial values of the bound constants.
    pub bounds: AssumptionParams,
}

impl ExperimentConfig {
    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    /// Checks the resolved config, collecting every problem.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.tau_max < 1 {
            errs.push("tau_max: must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            errs.push(format!(
                "learning_rate: must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.eval_stride < 1 {
            errs.push("eval_stride: must be at least 1".into());
        }
        if !(self.lambda >= 0.0) {
            errs.push(format!(
                "model.lambda: must be nonnegative, got {}",
                self.lambda
            ));
        }
        if self.clients.is_empty() {
            errs.push("clients.count: must be at least 1".into());
        }
        for (i, c) in self.clients.iter().enumerate() {
            if !(c.speed > 0.0) || !c.speed.is_finite() {
                errs.push(format!(
                    "clients.speeds[{i}]: must be positive, got {}",
                    c.speed
                ));
            }
            if !(c.upload_time >= 0.0) || !c.upload_time.is_finite() {
                errs.push(format!(
                    "clients.upload_times[{i}]: must be nonnegative, got {}",
                    c.upload_time
                ));
            }
            if c.buffer == Some(0) {
                errs.push(format!("clients.buffer[{i}]: must be at least 1"));
            }
            if self.stream.is_some() && c.buffer.is_none() {
                errs.push(format!(
                    "clients.buffer[{i}]: required when [stream] is present"
                ));
            }
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            errs.push(format!(
                "clients.noise: must be nonnegative, got {}",
                self.noise
            ));
        }
        if let Err(e) = self.budget.validate() {
            errs.push(format!("budget: {e}"));
        }
        if let Some(s) = &self.stream {
            if let Err(e) = s.validate(self.rounds.max(1)) {
                errs.push(format!("stream: {e}"));
            }
        }
        let c = &self.controller;
        if c.tau < 1 || c.tau > self.tau_max.max(1) {
            errs.push(format!(
                "controller.tau: must lie in 1..={}, got {}",
                self.tau_max, c.tau
            ));
        }
        if c.batch < 1 {
            errs.push("controller.batch: must be at least 1".into());
        }
        if c.initial_batch < 1 {
            errs.push("controller.initial_batch: must be at least 1".into());
        }
        if !(c.epsilon >= 0.0) {
            errs.push(format!(
                "controller.epsilon: must be nonnegative, got {}",
                c.epsilon
            ));
        }
        if let Err(e) = self.bounds.validate() {
            errs.push(format!("bounds: {e}"));
        }
        if let DataSource::Synthetic(b) = &self.data {
            if b.dim == 0 || b.classes < 2 || b.train_per_class == 0 || b.test_per_class == 0 {
                errs.push(
                    "data: synthetic data needs dim >= 1, classes >= 2 and nonzero sample counts"
                        .into(),
                );
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    rounds: Option<u64>,
    tau_max: Option<u32>,
    learning_rate: Option<f64>,
    eval_stride: Option<u64>,
    threads: Option<usize>,
    sampling: Option<String>,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    data: RawData,
    clients: Option<RawClients>,
    budget: Option<RawBudget>,
    stream: Option<RawStream>,
    #[serde(default)]
    controller: RawController,
    #[serde(default)]
    bounds: RawBounds,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kind: Option<String>,
    lambda: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    source: Option<String>,
    dim: Option<usize>,
    classes: Option<usize>,
    train_per_class: Option<usize>,
    test_per_class: Option<usize>,
    separation: Option<f64>,
    spread: Option<f64>,
    train: Option<PathBuf>,
    test: Option<PathBuf>,
    partition: Option<String>,
    shards_per_client: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClients {
    count: Option<usize>,
    speeds: Option<OneOrMany<f64>>,
    upload_times: Option<OneOrMany<f64>>,
    buffer: Option<OneOrMany<u64>>,
    noise: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBudget {
    cost: Option<f64>,
    time: Option<f64>,
    cost_per_sample: Option<f64>,
    cost_per_round: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStream {
    pattern: Option<String>,
    class_mode: Option<String>,
    arrival_count: Option<u64>,
    interval: Option<u64>,
    burst_round: Option<u64>,
    trickle: Option<u64>,
    initial_count: Option<u64>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawController {
    kind: Option<String>,
    tau: Option<u32>,
    batch: Option<u64>,
    epsilon: Option<f64>,
    initial_batch: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBounds {
    rho: Option<f64>,
    beta: Option<f64>,
    c: Option<f64>,
    delta: Option<f64>,
    mu: Option<f64>,
    mu_g: Option<f64>,
}

fn broadcast<T: Copy>(
    name: &str,
    v: Option<OneOrMany<T>>,
    n: usize,
    default: Option<T>,
    errs: &mut Vec<String>,
) -> Vec<T> {
    match v {
        Some(OneOrMany::One(x)) => vec![x; n],
        Some(OneOrMany::Many(xs)) if xs.len() == n => xs,
        Some(OneOrMany::Many(xs)) => {
            errs.push(format!("{name}: expected {n} values, got {}", xs.len()));
            Vec::new()
        }
        None => match default {
            Some(d) => vec![d; n],
            None => {
                errs.push(format!("{name}: missing required field"));
                Vec::new()
            }
        },
    }
}

fn parse_enum<T>(
    name: &str,
    v: Option<String>,
    default: T,
    errs: &mut Vec<String>,
    f: impl Fn(&str) -> Option<T>,
) -> T {
    match v {
        None => default,
        Some(s) => f(&s).unwrap_or_else(|| {
            errs.push(format!("{name}: unrecognized value `{s}`"));
            default
        }),
    }
}

/// Turns TOML parse failures into one-line config errors with positions.
fn toml_error(e: toml::de::Error) -> Error {
    let msg = e.message().replace('\n', "; ");
    match e.span() {
        Some(_) => {
            let first = e.to_string().lines().next().unwrap_or_default().to_string();
            Error::Config(format!("{} {msg}", first.trim_end_matches(':').trim()))
        }
        None => Error::Config(msg),
    }
}

/// Parses TOML config text.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(toml_error)?;
    resolve(raw)
}

/// Reads a TOML config, or a JSON run manifest written by a previous run.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg = if path.extension().is_some_and(|e| e == "json") {
        let manifest: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let body = manifest.get("config").cloned().unwrap_or(manifest);
        let cfg: ExperimentConfig = serde_json::from_value(body)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        cfg
    } else {
        parse_config_str(&text)?
    };
    Ok(relative_to(cfg, path.parent()))
}

fn relative_to(mut cfg: ExperimentConfig, base: Option<&Path>) -> ExperimentConfig {
    if let (DataSource::File { train, test }, Some(base)) = (&mut cfg.data, base) {
        for p in [train, test] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    cfg
}

fn resolve(raw: RawConfig) -> Result<ExperimentConfig> {
    let mut errs = Vec::new();

    let rounds = raw.rounds.unwrap_or_else(|| {
        errs.push("rounds: missing required field".into());
        0
    });

    let model = parse_enum(
        "model.kind",
        raw.model.kind,
        LossKind::SquaredSvm,
        &mut errs,
        |s| match s {
            "squared-svm" => Some(LossKind::SquaredSvm),
            "logistic" => Some(LossKind::Logistic),
            _ => None,
        },
    );

    let d = raw.data;
    let source = d.source.unwrap_or_else(|| "synthetic".into());
    let data = match source.as_str() {
        "synthetic" => {
            let def = BlobSpec::default();
            DataSource::Synthetic(BlobSpec {
                dim: d.dim.unwrap_or(def.dim),
                classes: d.classes.unwrap_or(def.classes),
                train_per_class: d.train_per_class.unwrap_or(def.train_per_class),
                test_per_class: d.test_per_class.unwrap_or(def.test_per_class),
                separation: d.separation.unwrap_or(def.separation),
                spread: d.spread.unwrap_or(def.spread),
            })
        }
        "file" => match (d.train, d.test) {
            (Some(train), Some(test)) => DataSource::File { train, test },
            _ => {
                errs.push("data: file source needs both `train` and `test` paths".into());
                DataSource::Synthetic(BlobSpec::default())
            }
        },
        other => {
            errs.push(format!("data.source: unrecognized value `{other}`"));
            DataSource::Synthetic(BlobSpec::default())
        }
    };
    let partition = match d.partition.as_deref() {
        None | Some("label-skew") => PartitionSpec::LabelSkew {
            shards_per_client: d.shards_per_client.unwrap_or(2),
        },
        Some("iid") => PartitionSpec::Iid,
        Some(other) => {
            errs.push(format!("data.partition: unrecognized value `{other}`"));
            PartitionSpec::default()
        }
    };

    let (clients, noise) = match raw.clients {
        None => {
            errs.push("clients: missing required section".into());
            (Vec::new(), 0.0)
        }
        Some(c) => {
            let n = c.count.unwrap_or_else(|| match &c.speeds {
                Some(OneOrMany::Many(v)) => v.len(),
                _ => 0,
            });
            if n == 0 {
                errs.push("clients.count: missing or zero".into());
            }
            let speeds = broadcast("clients.speeds", c.speeds, n, None, &mut errs);
            let uploads = broadcast(
                "clients.upload_times",
                c.upload_times,
                n,
                Some(0.0),
                &mut errs,
            );
            let buffers: Vec<Option<u64>> = match c.buffer {
                None => vec![None; n],
                some => broadcast("clients.buffer", some, n, None, &mut errs)
                    .into_iter()
                    .map(Some)
                    .collect(),
            };
            let clients = if speeds.len() == n && uploads.len() == n && buffers.len() == n {
                (0..n)
                    .map(|i| ClientSetup {
                        speed: speeds[i],
                        upload_time: uploads[i],
                        buffer: buffers[i],
                    })
                    .collect()
            } else {
                Vec::new()
            };
            (clients, c.noise.unwrap_or(0.0))
        }
    };
    let n = clients.len().max(1);

    let budget = match raw.budget {
        None => {
            errs.push("budget: missing required section".into());
            Budget::new(1.0, 1.0, DEFAULT_COST_PER_SAMPLE, 0.0)
        }
        Some(b) => {
            if b.cost.is_none() {
                errs.push("budget.cost: missing required field".into());
            }
            if b.time.is_none() {
                errs.push("budget.time: missing required field".into());
            }
            Budget::new(
                b.cost.unwrap_or(1.0),
                b.time.unwrap_or(1.0),
                b.cost_per_sample.unwrap_or(DEFAULT_COST_PER_SAMPLE),
                b.cost_per_round.unwrap_or(n as f64 / 10.0),
            )
        }
    };

    let stream = raw.stream.map(|s| {
        let def = StreamConfig::default();
        StreamConfig {
            pattern: parse_enum(
                "stream.pattern",
                s.pattern,
                def.pattern,
                &mut errs,
                |v| match v {
                    "smooth" => Some(ArrivalPattern::Smooth),
                    "burst" => Some(ArrivalPattern::Burst),
                    "random" => Some(ArrivalPattern::Random),
                    _ => None,
                },
            ),
            class_mode: parse_enum(
                "stream.class_mode",
                s.class_mode,
                def.class_mode,
                &mut errs,
                |v| match v {
                    "iid" => Some(ClassMode::Iid),
                    "continuous" => Some(ClassMode::Continuous),
                    _ => None,
                },
            ),
            arrival_count: s.arrival_count.unwrap_or(def.arrival_count),
            interval: s.interval.unwrap_or(def.interval),
            burst_round: s.burst_round.unwrap_or(def.burst_round),
            trickle: s.trickle.unwrap_or(def.trickle),
            initial_count: s.initial_count.unwrap_or(def.initial_count),
            seed: s.seed.unwrap_or(def.seed),
        }
    });

    let sampling = parse_enum(
        "sampling",
        raw.sampling,
        SamplingPolicy::Reservoir,
        &mut errs,
        |s| s.parse().ok(),
    );

    let rc = raw.controller;
    let controller = ControllerConfig {
        kind: parse_enum(
            "controller.kind",
            rc.kind,
            ControllerKind::Dynamite,
            &mut errs,
            |s| s.parse().ok(),
        ),
        tau: rc.tau.unwrap_or(2),
        batch: rc.batch.unwrap_or(DEFAULT_INITIAL_BATCH),
        epsilon: rc
            .epsilon
            .unwrap_or(crate::estimation::DEFAULT_REFRESH_EPSILON),
        initial_batch: rc.initial_batch.unwrap_or(DEFAULT_INITIAL_BATCH),
    };

    let learning_rate = raw.learning_rate.unwrap_or(DEFAULT_LEARNING_RATE);
    let rb = raw.bounds;
    let bounds = AssumptionParams {
        rho: rb.rho.unwrap_or(1.0),
        beta: rb.beta.unwrap_or(1.0),
        c: rb.c.unwrap_or(0.5),
        delta: rb.delta.unwrap_or(0.1),
        eta: learning_rate,
        mu: rb.mu.unwrap_or(1.0),
        mu_g: rb.mu_g.unwrap_or(1.0),
    };

    let cfg = ExperimentConfig {
        seed: raw.seed.unwrap_or(0),
        rounds,
        tau_max: raw.tau_max.unwrap_or(10),
        learning_rate,
        eval_stride: raw.eval_stride.unwrap_or(1),
        threads: raw.threads.unwrap_or(0),
        model,
        lambda: raw.model.lambda.unwrap_or(DEFAULT_LAMBDA),
        data,
        partition,
        clients,
        noise,
        budget,
        stream,
        sampling,
        controller,
        bounds,
    };
    if let Err(Error::Config(more)) = cfg.validate() {
        if errs.is_empty() || !cfg.clients.is_empty() {
            errs.push(more);
        }
    }
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errs.join("; ")))
    }
}

/// Sets a dotted key in a TOML document, creating tables as needed.
pub fn set_toml_key(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts
        .split_last()
        .ok_or_else(|| Error::Config("empty axis key".into()))?;
    let mut table = doc;
    for p in path {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("axis key `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
