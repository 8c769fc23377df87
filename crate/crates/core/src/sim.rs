//! Round-by-round federated training simulator with budget accounting.
//!
//! Time is virtual: a local step on `s` samples takes `s / p_i` seconds,
//! optionally scaled by a seeded lognormal multiplier. Clients run in
//! parallel but every random stream is owned by one client, and every
//! cross-client reduction runs in client order, so results do not depend
//! on the thread count.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{AssumptionParams, DataStats};
use crate::config::{ControllerKind, DataSource, ExperimentConfig};
use crate::data::{
    class_order, generate_blobs, partition_static, read_dataset, Buffer, ClientStream, Dataset,
};
use crate::error::{Error, Result};
use crate::estimation::{
    aggregate_global_params, estimate_client_params, estimate_divergence, estimate_fhat,
    estimate_m, refresh_m_policy, BudgetTracker, CurvatureEstimate, Ema,
};
use crate::model::{
    aggregate, batch_gradient, batch_loss, local_update, DataSample, Loss, LossModel, ModelVector,
};
use crate::optimizer::{
    coopt_fl, optimize_tau, proportional_split, uniform_closed_form, OnlineObjective,
};
use crate::system::{Budget, ClientProfile};

/// Smoothing factor for measured speeds and upload times.
pub const EMA_FACTOR: f64 = 0.5;

/// RNG stream purposes.
mod purpose {
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const STREAM: u64 = 3;
    pub const BUFFER: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const ESTIMATE: u64 = 6;
    pub const NOISE: u64 = 7;
}

/// Independent generator for `(seed, purpose, index)`.
pub fn derive_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 40) | index);
    rng
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub tau: u32,
    pub batch: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Run(RoundPlan),
    Stop(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: u64,
    pub plan: RoundPlan,
    pub wall_time: f64,
    pub cost: f64,
    /// Mean loss over all data delivered so far; NaN when not evaluated.
    pub train_loss: f64,
    /// NaN when not evaluated.
    pub test_accuracy: f64,
    /// Per-client loss of the round-start global model on the previous
    /// round's last batch; NaN in the first round.
    pub client_losses: Vec<f64>,
    /// Clients whose buffer could not supply the planned batch.
    pub shortfall: Vec<bool>,
}

/// One line of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: u64,
    pub sim_time_s: f64,
    pub cum_cost: f64,
    pub tau: u32,
    pub mean_batch: f64,
    pub min_batch: u64,
    pub max_batch: u64,
    pub train_loss: f64,
    pub test_acc: f64,
    pub theta_c: f64,
    pub r_c: f64,
    pub est_rho: f64,
    pub est_beta: f64,
    pub est_c: f64,
    pub est_delta: f64,
}

pub const METRICS_HEADER: &str = "round,sim_time_s,cum_cost,tau,mean_batch,min_batch,max_batch,train_loss,test_acc,theta_c,R_c,est_rho,est_beta,est_c,est_delta";

/// Writes the metrics table as comma-separated text.
pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.round,
            r.sim_time_s,
            r.cum_cost,
            r.tau,
            r.mean_batch,
            r.min_batch,
            r.max_batch,
            r.train_loss,
            r.test_acc,
            r.theta_c,
            r.r_c,
            r.est_rho,
            r.est_beta,
            r.est_c,
            r.est_delta
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds_executed: u64,
    pub rounds_planned: u64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub total_cost: f64,
    pub total_time: f64,
    pub stop_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rows: Vec<MetricsRow>,
    pub outcomes: Vec<RoundOutcome>,
    pub stop_reason: Option<String>,
    pub rounds_planned: u64,
}

impl RunReport {
    pub fn summary(&self) -> Summary {
        let evaluated: Vec<f64> = self
            .rows
            .iter()
            .map(|r| r.test_acc)
            .filter(|a| !a.is_nan())
            .collect();
        Summary {
            rounds_executed: self.rows.len() as u64,
            rounds_planned: self.rounds_planned,
            final_accuracy: evaluated.last().copied().unwrap_or(f64::NAN),
            best_accuracy: evaluated.iter().copied().fold(f64::NAN, f64::max),
            total_cost: self.outcomes.iter().map(|o| o.cost).sum(),
            total_time: self.outcomes.iter().map(|o| o.wall_time).sum(),
            stop_reason: self.stop_reason.clone(),
        }
    }

    pub fn metrics_csv(&self) -> String {
        let mut buf = Vec::new();
        write_metrics_csv(&self.rows, &mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("metrics are ASCII")
    }
}

/// Mean loss and accuracy of `w` on `test`.
pub fn evaluate(w: &ModelVector, test: &[DataSample], m: &LossModel) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let loss = batch_loss(w, test, m)?;
    let correct = test.iter().filter(|x| m.is_correct(w, x)).count();
    Ok((loss, correct as f64 / test.len() as f64))
}

#[derive(Debug, Clone, Copy)]
struct ServerEstimates {
    curvature: CurvatureEstimate,
    delta: f64,
    loss_proxy: f64,
}

#[derive(Debug)]
struct ClientState {
    speed: f64,
    upload_time: f64,
    buffer: Buffer<DataSample>,
    stream: Option<ClientStream>,
    seen: Vec<DataSample>,
    buffer_rng: ChaCha8Rng,
    train_rng: ChaCha8Rng,
    est_rng: ChaCha8Rng,
    last_batch: Vec<DataSample>,
    last_local: Option<ModelVector>,
    curvature: CurvatureEstimate,
    variance: f64,
    prev_loss: Option<f64>,
    speed_est: Ema,
    upload_est: Ema,
}

struct ClientReport {
    model: ModelVector,
    weight: f64,
    shortfall: bool,
    estimate: Option<(CurvatureEstimate, f64, Vec<f64>)>,
}

impl ClientState {
    fn round(
        &mut self,
        k: u64,
        tau: u32,
        batch: u64,
        global: &ModelVector,
        cfg: &ExperimentConfig,
        m: &LossModel,
    ) -> Result<ClientReport> {
        let mut estimate = None;
        if let (Some(local), false) = (&self.last_local, self.last_batch.is_empty()) {
            let curv = estimate_client_params(global, local, &self.last_batch, m, self.curvature)?;
            let loss = batch_loss(global, &self.last_batch, m)?;
            let grad = batch_gradient(global, &self.last_batch, m)?;
            if let Some(prev) = self.prev_loss {
                if refresh_m_policy(loss, prev, cfg.controller.epsilon) {
                    self.variance = estimate_m(&self.buffer, global, m, &mut self.est_rng)?;
                }
            }
            self.prev_loss = Some(loss);
            self.curvature = curv;
            estimate = Some((curv, loss, grad));
        }

        let mut w = global.clone();
        if let Some(stream) = &mut self.stream {
            let arrivals = stream.generate_arrivals(k);
            self.seen.extend(arrivals.iter().cloned());
            self.buffer.update(arrivals, &mut self.buffer_rng);
        }

        let mut shortfall = false;
        for _ in 0..tau {
            let draw = match self
                .buffer
                .sample_batch(batch as usize, &mut self.train_rng)
            {
                Ok(d) => d,
                Err(Error::EmptyBatch) => {
                    shortfall = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            shortfall |= draw.shortfall;
            w = local_update(&w, &draw.items, cfg.learning_rate, m)?;
            self.last_batch = draw.items.into_iter().cloned().collect();
        }
        self.last_local = Some(w.clone());
        Ok(ClientReport {
            model: w,
            weight: self.buffer.stream_count() as f64,
            shortfall,
            estimate,
        })
    }
}

/// Full simulation state for one experiment.
pub struct Simulation {
    cfg: ExperimentConfig,
    model: LossModel,
    test: Dataset,
    clients: Vec<ClientState>,
    global: ModelVector,
    tracker: BudgetTracker,
    estimates: Option<ServerEstimates>,
    noise_rng: ChaCha8Rng,
    pool: rayon::ThreadPool,
    static_plan: Option<RoundPlan>,
    round: u64,
    rows: Vec<MetricsRow>,
    outcomes: Vec<RoundOutcome>,
    stop_reason: Option<String>,
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synthetic(spec) => {
            generate_blobs(spec, derive_rng(cfg.seed, purpose::DATA, 0).gen_seed())
        }
        DataSource::File { train, test } => {
            let train = read_dataset(train)?;
            let test = read_dataset(test)?;
            if train.dim != test.dim || train.classes != test.classes {
                return Err(Error::Config(format!(
                    "train data has dim {} / {} classes but test data has dim {} / {} classes",
                    train.dim, train.classes, test.dim, test.classes
                )));
            }
            Ok((train, test))
        }
    }
}

trait GenSeed {
    fn gen_seed(self) -> u64;
}

impl GenSeed for ChaCha8Rng {
    fn gen_seed(mut self) -> u64 {
        rand::Rng::gen(&mut self)
    }
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = load_data(&cfg)?;
        if test.is_empty() {
            return Err(Error::Config("test set is empty".into()));
        }
        let model = LossModel::new(cfg.model, cfg.lambda, train.classes)?;
        let n = cfg.clients.len();
        let parts = partition_static(
            &train,
            n,
            cfg.partition,
            &mut derive_rng(cfg.seed, purpose::PARTITION, 0),
        )?;
        let order = cfg
            .stream
            .map(|s| class_order(train.classes, s.seed ^ cfg.seed));
        let global = model.init(train.dim);
        let mut clients = Vec::with_capacity(n);
        for (i, (setup, part)) in cfg.clients.iter().zip(parts).enumerate() {
            let i64 = i as u64;
            let mut buffer_rng = derive_rng(cfg.seed, purpose::BUFFER, i64);
            let (buffer, stream, seen) = match &cfg.stream {
                Some(scfg) => {
                    let capacity = setup.buffer.unwrap_or(1) as usize;
                    let mut stream = ClientStream::new(
                        part,
                        train.classes,
                        *scfg,
                        order.clone().unwrap_or_default(),
                        derive_rng(cfg.seed, purpose::STREAM, i64),
                    );
                    let first = stream.initial();
                    if first.is_empty() {
                        return Err(Error::Config(format!(
                            "client {i} received no initial data"
                        )));
                    }
                    let mut buffer = Buffer::new(capacity, cfg.sampling)?;
                    buffer.update(first.iter().cloned(), &mut buffer_rng);
                    (buffer, Some(stream), first)
                }
                None => {
                    if let Some(b) = setup.buffer {
                        if (b as usize) < part.len() {
                            return Err(Error::Config(format!(
                                "clients.buffer[{i}]: static data needs a buffer of at least {} samples, got {b}",
                                part.len()
                            )));
                        }
                    }
                    (Buffer::from_static(part.clone())?, None, part)
                }
            };
            let b = cfg.bounds;
            let mut est_rng = derive_rng(cfg.seed, purpose::ESTIMATE, i64);
            let variance = estimate_m(&buffer, &global, &model, &mut est_rng)?;
            clients.push(ClientState {
                speed: setup.speed,
                upload_time: setup.upload_time,
                buffer,
                stream,
                seen,
                buffer_rng,
                train_rng: derive_rng(cfg.seed, purpose::TRAIN, i64),
                est_rng,
                last_batch: Vec::new(),
                last_local: None,
                curvature: CurvatureEstimate::new(b.c, b.rho, b.beta),
                variance,
                prev_loss: None,
                speed_est: Ema::with_initial(EMA_FACTOR, setup.speed),
                upload_est: Ema::with_initial(EMA_FACTOR, setup.upload_time),
            });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let mut sim = Self {
            tracker: BudgetTracker::new(cfg.budget.time, cfg.budget.cost),
            noise_rng: derive_rng(cfg.seed, purpose::NOISE, 0),
            cfg,
            model,
            test,
            clients,
            global,
            estimates: None,
            pool,
            static_plan: None,
            round: 0,
            rows: Vec::new(),
            outcomes: Vec::new(),
            stop_reason: None,
        };
        if sim.cfg.controller.kind == ControllerKind::UniformStatic && sim.cfg.rounds > 0 {
            sim.static_plan = Some(sim.solve_static()?);
        }
        Ok(sim)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn global_model(&self) -> &ModelVector {
        &self.global
    }

    pub fn loss_model(&self) -> &LossModel {
        &self.model
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn tracker(&self) -> &BudgetTracker {
        &self.tracker
    }

    /// Buffers in client order.
    pub fn buffers(&self) -> impl Iterator<Item = &Buffer<DataSample>> {
        self.clients.iter().map(|c| &c.buffer)
    }

    /// Last local batch of every client.
    pub fn last_batches(&self) -> Vec<&[DataSample]> {
        self.clients
            .iter()
            .map(|c| c.last_batch.as_slice())
            .collect()
    }

    fn current_params(&self) -> AssumptionParams {
        let mut p = self.cfg.bounds;
        if let Some(e) = &self.estimates {
            p.rho = e.curvature.rho;
            p.beta = e.curvature.beta;
            p.c = e.curvature.c;
            p.delta = e.delta;
        }
        p.eta = self.cfg.learning_rate;
        p
    }

    /// Mean loss over every sample delivered so far.
    pub fn train_loss(&self) -> Result<f64> {
        let w = &self.global;
        let m = &self.model;
        let sums: Vec<Result<(f64, usize)>> = self.pool.install(|| {
            self.clients
                .par_iter()
                .map(|c| {
                    let mut s = 0.0;
                    for x in &c.seen {
                        s += m.loss(w, x)?;
                    }
                    Ok((s, c.seen.len()))
                })
                .collect()
        });
        let mut total = 0.0;
        let mut count = 0;
        for r in sums {
            let (s, n) = r?;
            total += s;
            count += n;
        }
        Ok(total / count.max(1) as f64)
    }

    fn profiles(&self, data_from_buffer: bool) -> Vec<ClientProfile> {
        self.clients
            .iter()
            .map(|c| {
                let mut p = ClientProfile::new(
                    c.speed_est.value.unwrap_or(c.speed),
                    c.upload_est.value.unwrap_or(c.upload_time),
                    c.buffer.stream_count().max(1),
                    c.variance,
                );
                if data_from_buffer {
                    p = p.with_buffer(c.buffer.len().max(1) as u64);
                }
                p
            })
            .collect()
    }

    fn solve_static(&self) -> Result<RoundPlan> {
        let profiles = self.profiles(true);
        let params = self.cfg.bounds;
        let g0 = self.train_loss()?;
        let r = uniform_closed_form(
            self.cfg.rounds,
            &self.cfg.budget,
            &profiles,
            &params,
            g0,
            self.cfg.tau_max,
        )?;
        Ok(RoundPlan {
            tau: r.tau,
            batch: r.batch,
        })
    }

    /// Plan for the next round, or a stop decision when nothing fits.
    pub fn plan_next_round(&self) -> Result<Decision> {
        let k = self.round + 1;
        let n = self.clients.len();
        let c = &self.cfg.controller;
        let remaining_rounds = self.cfg.rounds - self.round;
        let budget = Budget::new(
            self.tracker.remaining_cost(),
            self.tracker.remaining_time(),
            self.cfg.budget.cost_per_sample,
            self.cfg.budget.cost_per_round,
        );
        let warmup = k <= 2 || self.estimates.is_none();
        let plan = match c.kind {
            ControllerKind::Fedavg => RoundPlan {
                tau: c.tau,
                batch: vec![c.batch; n],
            },
            ControllerKind::UniformStatic => self
                .static_plan
                .clone()
                .ok_or_else(|| Error::Config("static plan missing".into()))?,
            ControllerKind::NoStraggler => {
                let speeds: Vec<f64> = self
                    .clients
                    .iter()
                    .map(|c| c.speed_est.value.unwrap_or(c.speed))
                    .collect();
                RoundPlan {
                    tau: c.tau,
                    batch: proportional_split(c.batch * n as u64, &speeds),
                }
            }
            ControllerKind::Dynamite if warmup => RoundPlan {
                tau: 1,
                batch: vec![c.initial_batch; n],
            },
            ControllerKind::DynamicTau if warmup => RoundPlan {
                tau: 1,
                batch: vec![c.batch; n],
            },
            ControllerKind::Dynamite | ControllerKind::DynamicTau => {
                let profiles = self.profiles(true);
                let est = self.estimates.expect("estimates present after warmup");
                let objective = OnlineObjective {
                    params: self.current_params(),
                    stats: DataStats::from_profiles(&profiles),
                    loss_proxy: est.loss_proxy,
                };
                let result = if c.kind == ControllerKind::Dynamite {
                    coopt_fl(
                        &objective,
                        &profiles,
                        &budget,
                        remaining_rounds,
                        self.cfg.tau_max,
                    )
                } else {
                    let batch: Vec<u64> = self
                        .clients
                        .iter()
                        .map(|cl| c.batch.min(cl.buffer.len().max(1) as u64))
                        .collect();
                    optimize_tau(
                        &objective,
                        &profiles,
                        &budget,
                        remaining_rounds,
                        self.cfg.tau_max,
                        &batch,
                    )
                };
                match result {
                    Ok(r) => RoundPlan {
                        tau: r.tau,
                        batch: r.batch,
                    },
                    Err(Error::Infeasible(msg)) => return Ok(Decision::Stop(msg)),
                    Err(e) => return Err(e),
                }
            }
        };
        Ok(Decision::Run(self.clip(plan)))
    }

    /// Clips batches to `[1, |buffer_i|]`.
    fn clip(&self, mut plan: RoundPlan) -> RoundPlan {
        for (s, c) in plan.batch.iter_mut().zip(&self.clients) {
            *s = (*s).clamp(1, c.buffer.len().max(1) as u64);
        }
        plan
    }

    fn noise_multiplier(&mut self) -> f64 {
        let sigma = self.cfg.noise;
        if sigma == 0.0 {
            return 1.0;
        }
        let z: f64 = StandardNormal.sample(&mut self.noise_rng);
        (sigma * z - 0.5 * sigma * sigma).exp()
    }

    /// Plans and executes one round. `None` when the run is over.
    pub fn step(&mut self) -> Result<Option<RoundOutcome>> {
        if self.round >= self.cfg.rounds || self.stop_reason.is_some() {
            return Ok(None);
        }
        let plan = match self.plan_next_round()? {
            Decision::Run(p) => p,
            Decision::Stop(reason) => {
                self.stop_reason = Some(reason);
                return Ok(None);
            }
        };
        let tau = plan.tau;
        let multipliers: Vec<(f64, f64)> = (0..self.clients.len())
            .map(|_| (self.noise_multiplier(), self.noise_multiplier()))
            .collect();
        let wall_time = plan
            .batch
            .iter()
            .zip(&self.clients)
            .zip(&multipliers)
            .map(|((s, c), (mc, mu))| tau as f64 * *s as f64 / c.speed * mc + c.upload_time * mu)
            .fold(0.0, f64::max);
        let total: u64 = plan.batch.iter().sum();
        let cost = self.cfg.budget.cost_per_sample * tau as f64 * total as f64
            + self.cfg.budget.cost_per_round;
        if self.tracker.spent_cost + cost > self.tracker.cost
            || self.tracker.spent_time + wall_time > self.tracker.time
        {
            self.stop_reason = Some(format!(
                "round {} needs time {wall_time} and cost {cost} but only {} and {} remain",
                self.round + 1,
                self.tracker.remaining_time(),
                self.tracker.remaining_cost()
            ));
            return Ok(None);
        }

        let k = self.round + 1;
        let cfg = &self.cfg;
        let model = &self.model;
        let global = &self.global;
        let clients = &mut self.clients;
        let reports: Vec<Result<ClientReport>> = self.pool.install(|| {
            clients
                .par_iter_mut()
                .zip(plan.batch.par_iter())
                .map(|(c, s)| c.round(k, tau, *s, global, cfg, model))
                .collect()
        });
        let reports = reports.into_iter().collect::<Result<Vec<_>>>()?;

        let weights: Vec<f64> = reports.iter().map(|r| r.weight).collect();
        let models: Vec<ModelVector> = reports.iter().map(|r| r.model.clone()).collect();
        let client_losses: Vec<f64> = reports
            .iter()
            .map(|r| r.estimate.as_ref().map_or(f64::NAN, |e| e.1))
            .collect();
        if reports.iter().all(|r| r.estimate.is_some()) {
            let curvs: Vec<CurvatureEstimate> = reports
                .iter()
                .map(|r| r.estimate.as_ref().unwrap().0)
                .collect();
            let grads: Vec<Vec<f64>> = reports
                .iter()
                .map(|r| r.estimate.as_ref().unwrap().2.clone())
                .collect();
            let curvature = aggregate_global_params(&curvs, &weights)?;
            let (_, delta) = estimate_divergence(&grads, &weights)?;
            let loss_proxy = estimate_fhat(&client_losses, &weights)?;
            self.estimates = Some(ServerEstimates {
                curvature,
                delta,
                loss_proxy,
            });
        }
        self.global = aggregate(&models, &weights)?;

        for ((c, (mc, mu)), s) in self.clients.iter_mut().zip(&multipliers).zip(&plan.batch) {
            if *s > 0 {
                c.speed_est.update(c.speed / mc);
            }
            c.upload_est.update(c.upload_time * mu);
        }
        self.tracker.record(wall_time, cost);
        self.round = k;

        let evaluate_now = k % self.cfg.eval_stride == 0 || k == self.cfg.rounds;
        let (train_loss, test_accuracy) = if evaluate_now {
            let (_, acc) = evaluate(&self.global, &self.test.samples, &self.model)?;
            (self.train_loss()?, acc)
        } else {
            (f64::NAN, f64::NAN)
        };

        let params = self.current_params();
        let min_batch = plan.batch.iter().copied().min().unwrap_or(0);
        let max_batch = plan.batch.iter().copied().max().unwrap_or(0);
        self.rows.push(MetricsRow {
            round: k,
            sim_time_s: self.tracker.spent_time,
            cum_cost: self.tracker.spent_cost,
            tau,
            mean_batch: total as f64 / plan.batch.len() as f64,
            min_batch,
            max_batch,
            train_loss,
            test_acc: test_accuracy,
            theta_c: self.tracker.remaining_time(),
            r_c: self.tracker.remaining_cost(),
            est_rho: params.rho,
            est_beta: params.beta,
            est_c: params.c,
            est_delta: params.delta,
        });
        let outcome = RoundOutcome {
            round: k,
            plan,
            wall_time,
            cost,
            train_loss,
            test_accuracy,
            client_losses,
            shortfall: reports.iter().map(|r| r.shortfall).collect(),
        };
        self.outcomes.push(outcome.clone());
        Ok(Some(outcome))
    }

    /// Runs until the round limit or the first round that does not fit.
    pub fn run(mut self) -> Result<RunReport> {
        while self.step()?.is_some() {}
        Ok(RunReport {
            rows: self.rows,
            outcomes: self.outcomes,
            stop_reason: self.stop_reason,
            rounds_planned: self.cfg.rounds,
        })
    }
}

/// Builds and runs one experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    Simulation::new(cfg.clone())?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    fn config(extra: &str) -> ExperimentConfig {
        parse_config_str(&format!(
            r#"
seed = 3
rounds = 6
learning_rate = 0.05
{extra}
[data]
dim = 4
classes = 2
train_per_class = 40
test_per_class = 20
[clients]
count = 2
speeds = [10.0, 10.0]
upload_times = [1.0, 1.0]
[budget]
cost = 100.0
time = 1000.0
cost_per_sample = 0.001
cost_per_round = 1.0
[controller]
kind = "fedavg"
tau = 2
batch = 10
"#
        ))
        .unwrap()
    }

    #[test]
    fn wall_time_follows_the_straggler() {
        let mut cfg = config("");
        cfg.controller.kind = ControllerKind::NoStraggler;
        cfg.clients[1].speed = 30.0;
        let mut sim = Simulation::new(cfg).unwrap();
        let o = sim.step().unwrap().unwrap();
        assert_eq!(o.plan.batch, vec![5, 15]);
        assert_eq!(o.wall_time, 2.0);
        let mut sim = Simulation::new(config("")).unwrap();
        let o = sim.step().unwrap().unwrap();
        assert_eq!(o.wall_time, 3.0);
        assert!((o.cost - 1.04).abs() < 1e-12);
    }

    #[test]
    fn zero_rounds_gives_empty_series() {
        let mut cfg = config("");
        cfg.rounds = 0;
        let r = run_experiment(&cfg).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.metrics_csv(), format!("{METRICS_HEADER}\n"));
    }

    #[test]
    fn budget_for_three_rounds_runs_three() {
        let mut cfg = config("");
        // Each fedavg round costs 0.001 * 2 * 20 + 1 = 1.04.
        cfg.budget.cost = 3.0 * 1.04 + 0.5;
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(r.stop_reason.is_some());
        assert!(r.summary().total_cost <= cfg.budget.cost);
    }

    #[test]
    fn single_round_matches_pooled_sgd() {
        let mut cfg = config("");
        cfg.controller.tau = 1;
        cfg.partition = crate::data::PartitionSpec::Iid;
        let mut sim = Simulation::new(cfg.clone()).unwrap();
        let w0 = sim.global_model().clone();
        sim.step().unwrap().unwrap();
        // Equal data counts and batch sizes: the weighted average of one
        // step per client equals one step on the pooled batch.
        let pooled: Vec<DataSample> = sim.last_batches().concat();
        let expected = local_update(&w0, &pooled, cfg.learning_rate, sim.loss_model()).unwrap();
        for (a, b) in sim.global_model().iter().zip(expected.iter()) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn evaluation_conventions() {
        let m = LossModel::squared_svm(0.1);
        let test = vec![DataSample::new(vec![1.0], 1), DataSample::new(vec![1.0], 0)];
        let (_, acc) = evaluate(&ModelVector::zeros(1), &test, &m).unwrap();
        assert_eq!(acc, 0.5);
        let (_, acc) = evaluate(&ModelVector::from(vec![1.0]), &test[..1], &m).unwrap();
        assert_eq!(acc, 1.0);
        assert!(evaluate(&ModelVector::zeros(1), &[], &m).is_err());
    }

    #[test]
    fn eval_stride_leaves_gaps() {
        let mut cfg = config("");
        cfg.eval_stride = 4;
        let r = run_experiment(&cfg).unwrap();
        let evaluated: Vec<u64> = r
            .rows
            .iter()
            .filter(|x| !x.test_acc.is_nan())
            .map(|x| x.round)
            .collect();
        assert_eq!(evaluated, vec![4, 6]);
    }
}
