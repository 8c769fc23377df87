//! Joint selection of the local-step count `tau` and per-client batch sizes.
//!
//! Four solvers share one objective evaluator:
//! - [`uniform_closed_form`]: one batch size for every client.
//! - [`coopt_fl`]: heterogeneous batches by capped proportional allocation.
//! - [`gpu_closed_form`]: compute time independent of the batch size.
//! - [`brute_force_opt`]: exhaustive enumeration for small instances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{contraction_q, drift, drift_derivative, AssumptionParams, DataStats};
use crate::error::{Error, Result};
use crate::system::{feasibility_check, Budget, ClientProfile};

/// Bound minimized by the solvers.
///
/// Every supported bound is affine in `sum_i M_i D_i^2 / s_i` once `tau` is
/// fixed, so an objective is described by its per-`tau` offset and slope.
pub trait Objective: Sync {
    fn stats(&self) -> &DataStats;
    fn at_tau(&self, tau: u32) -> Result<StageObjective>;

    fn evaluate(&self, tau: u32, batch: &[u64]) -> Result<f64> {
        let stage = self.at_tau(tau)?;
        if batch.len() != stage.coefficients.len() || batch.iter().any(|s| *s < 1) {
            return Err(Error::InvalidArgument(format!(
                "batch {batch:?} does not fit {} clients",
                stage.coefficients.len()
            )));
        }
        Ok(stage.value(batch))
    }
}

/// `offset + slope * sum_i coefficients_i / s_i` for a fixed `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageObjective {
    pub tau: u32,
    pub offset: f64,
    pub slope: f64,
    /// `M_i D_i^2`.
    pub coefficients: Vec<f64>,
}

impl StageObjective {
    fn new(tau: u32, offset: f64, slope: f64, stats: &DataStats) -> Self {
        Self {
            tau,
            offset,
            slope,
            coefficients: stats
                .variance
                .iter()
                .zip(&stats.counts)
                .map(|(m, d)| m * d * d)
                .collect(),
        }
    }

    /// Term `i` of the variance sum at batch `s`.
    pub fn term(&self, client: usize, s: u64) -> f64 {
        self.coefficients[client] / s as f64
    }

    /// Objective value. Terms are sorted before summing so that the value
    /// depends only on the multiset of terms.
    pub fn value(&self, batch: &[u64]) -> f64 {
        let mut terms: Vec<f64> = batch
            .iter()
            .enumerate()
            .map(|(i, s)| self.term(i, *s))
            .collect();
        terms.sort_by(f64::total_cmp);
        self.offset + self.slope * terms.iter().sum::<f64>()
    }
}

/// Cumulative `K`-round bound with initial gap `G0`.
#[derive(Debug, Clone)]
pub struct OfflineObjective {
    pub rounds: u64,
    pub params: AssumptionParams,
    pub stats: DataStats,
    pub initial_gap: f64,
}

impl Objective for OfflineObjective {
    fn stats(&self) -> &DataStats {
        &self.stats
    }

    fn at_tau(&self, tau: u32) -> Result<StageObjective> {
        self.params.validate()?;
        let q = contraction_q(&self.params)?;
        let omq = self.params.eta * self.params.c * self.params.mu;
        let total = self.stats.total();
        let h = drift(tau as f64, &self.params);
        let rounds_factor = -(q.ln() * self.rounds as f64).exp_m1() / omq;
        let contraction = (q.ln() * self.rounds as f64 * tau as f64).exp();
        let per_round =
            self.params.beta * self.params.eta * self.params.eta * (1.0 - q.powi(tau as i32))
                / (2.0 * total * total * omq);
        Ok(StageObjective::new(
            tau,
            contraction * self.initial_gap + rounds_factor * self.params.rho * h * h,
            rounds_factor * per_round,
            &self.stats,
        ))
    }
}

/// One-round bound driven by the batch-loss proxy `F_hat`.
#[derive(Debug, Clone)]
pub struct OnlineObjective {
    pub params: AssumptionParams,
    pub stats: DataStats,
    pub loss_proxy: f64,
}

impl Objective for OnlineObjective {
    fn stats(&self) -> &DataStats {
        &self.stats
    }

    fn at_tau(&self, tau: u32) -> Result<StageObjective> {
        self.params.validate()?;
        let q = contraction_q(&self.params)?;
        let omq = self.params.eta * self.params.c * self.params.mu;
        let total = self.stats.total();
        let h = drift(tau as f64, &self.params);
        let qt = q.powi(tau as i32);
        let per_round = self.params.beta * self.params.eta * self.params.eta * (1.0 - qt)
            / (2.0 * total * total * omq);
        Ok(StageObjective::new(
            tau,
            qt * self.loss_proxy.max(0.0) + self.params.rho * h * h,
            per_round,
            &self.stats,
        ))
    }
}

/// Which constraint stopped a client's batch from growing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Binding {
    Cost,
    Time,
    Data,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub tau: u32,
    pub batch: Vec<u64>,
    pub objective: f64,
    pub binding: Vec<Binding>,
    /// Units of `s_tot(R)` left unspent because every client hit a cap.
    pub unused_batch: u64,
}

/// Work counters for complexity assertions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub taus_evaluated: u64,
    /// Proportional-share evaluations in the freeze loop.
    pub allocation_steps: u64,
    /// Single-unit increments in the leftover distribution.
    pub greedy_steps: u64,
    /// Lower-bound repairs and pairwise transfers.
    pub repair_steps: u64,
}

impl std::ops::AddAssign for OpCounters {
    fn add_assign(&mut self, o: Self) {
        self.taus_evaluated += o.taus_evaluated;
        self.allocation_steps += o.allocation_steps;
        self.greedy_steps += o.greedy_steps;
        self.repair_steps += o.repair_steps;
    }
}

fn validate_inputs(
    profiles: &[ClientProfile],
    budget: &Budget,
    rounds: u64,
    tau_max: u32,
) -> Result<()> {
    if profiles.is_empty() {
        return Err(Error::InvalidArgument("no clients".into()));
    }
    for p in profiles {
        p.validate()?;
    }
    budget.validate()?;
    if rounds < 1 {
        return Err(Error::InvalidArgument("need at least one round".into()));
    }
    if tau_max < 1 {
        return Err(Error::InvalidArgument("tau_max must be at least 1".into()));
    }
    feasibility_check(budget, profiles, rounds).into_result()?;
    Ok(())
}

fn check_stats(stats: &DataStats, profiles: &[ClientProfile]) -> Result<()> {
    if stats.len() != profiles.len() {
        return Err(Error::InvalidArgument(format!(
            "objective covers {} clients but {} profiles given",
            stats.len(),
            profiles.len()
        )));
    }
    Ok(())
}

/// Per-client upper bound at `tau` and the constraint that sets it.
fn client_caps(
    profiles: &[ClientProfile],
    budget: &Budget,
    rounds: u64,
    tau: u32,
) -> Vec<(u64, Binding)> {
    profiles
        .iter()
        .map(|p| {
            let time = budget.time_cap(p, rounds, tau);
            let data = p.data_cap();
            if time <= data {
                (time, Binding::Time)
            } else {
                (data, Binding::Data)
            }
        })
        .collect()
}

fn bindings(batch: &[u64], caps: &[(u64, Binding)]) -> Vec<Binding> {
    batch
        .iter()
        .zip(caps)
        .map(|(s, (cap, why))| if s == cap { *why } else { Binding::Cost })
        .collect()
}

/// Raises zero entries to one and, if that overspends `total`, takes units
/// back from the clients that lose the least.
fn repair_lower_bound(batch: &mut [u64], stage: &StageObjective, total: u64, ops: &mut OpCounters) {
    for s in batch.iter_mut() {
        if *s == 0 {
            *s = 1;
            ops.repair_steps += 1;
        }
    }
    let mut sum: u64 = batch.iter().sum();
    while sum > total {
        let mut best: Option<(usize, f64)> = None;
        for (i, s) in batch.iter().enumerate() {
            if *s > 1 {
                let loss = stage.term(i, s - 1) - stage.term(i, *s);
                if best.map_or(true, |(_, b)| loss < b) {
                    best = Some((i, loss));
                }
            }
        }
        match best {
            Some((i, _)) => {
                batch[i] -= 1;
                sum -= 1;
                ops.repair_steps += 1;
            }
            None => break,
        }
    }
}

/// Capped proportional allocation for one `tau`: freeze loop, lower-bound
/// repair, greedy leftover distribution, then pairwise exchange until no
/// single-unit transfer lowers the objective.
fn allocate_at_tau(
    stage: &StageObjective,
    caps: &[(u64, Binding)],
    total: u64,
    ops: &mut OpCounters,
) -> Vec<u64> {
    let n = caps.len();
    let weights: Vec<f64> = stage.coefficients.iter().map(|c| c.sqrt()).collect();
    let mut batch = vec![0u64; n];
    let mut active = vec![true; n];
    let mut remaining = total as f64;
    loop {
        let mut frozen = false;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            ops.allocation_steps += 1;
            let w_c: f64 = (0..n).filter(|j| active[*j]).map(|j| weights[j]).sum();
            let share = if w_c > 0.0 {
                (remaining * weights[i] / w_c).floor().max(0.0) as u64
            } else {
                0
            };
            let cap = caps[i].0;
            if share >= cap {
                batch[i] = cap;
                remaining -= cap as f64;
                active[i] = false;
                frozen = true;
            } else {
                batch[i] = share;
            }
        }
        if !frozen || active.iter().all(|a| !a) {
            break;
        }
    }

    repair_lower_bound(&mut batch, stage, total, ops);

    let mut sum: u64 = batch.iter().sum();
    while sum < total {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if batch[i] < caps[i].0 {
                let s = batch[i] as f64;
                let gain = stage.coefficients[i] / (s * (s + 1.0));
                if best.map_or(true, |(_, b)| gain > b) {
                    best = Some((i, gain));
                }
            }
        }
        match best {
            Some((i, _)) => {
                batch[i] += 1;
                sum += 1;
                ops.greedy_steps += 1;
            }
            None => break,
        }
    }

    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if batch[i] >= caps[i].0 {
                continue;
            }
            for j in 0..n {
                if i == j || batch[j] <= 1 {
                    continue;
                }
                let before = stage.term(i, batch[i]) + stage.term(j, batch[j]);
                let after = stage.term(i, batch[i] + 1) + stage.term(j, batch[j] - 1);
                let change = after - before;
                if change < -1e-13 * before && best.map_or(true, |(_, _, b)| change < b) {
                    best = Some((i, j, change));
                }
            }
        }
        match best {
            Some((i, j, _)) => {
                batch[i] += 1;
                batch[j] -= 1;
                ops.repair_steps += 1;
            }
            None => break,
        }
    }
    batch
}

fn reduce_by_tau(
    candidates: Vec<Result<Option<(AllocationResult, OpCounters)>>>,
    what: &str,
) -> Result<(AllocationResult, OpCounters)> {
    let mut best: Option<AllocationResult> = None;
    let mut ops = OpCounters::default();
    for c in candidates {
        if let Some((alloc, o)) = c? {
            ops += o;
            if best
                .as_ref()
                .map_or(true, |b| alloc.objective < b.objective)
            {
                best = Some(alloc);
            }
        }
    }
    best.map(|b| (b, ops)).ok_or_else(|| {
        Error::Infeasible(format!(
            "{what}: no tau admits a batch of at least one sample per client"
        ))
    })
}

/// Heterogeneous batch allocation, returning operation counters.
pub fn coopt_fl_counted<O: Objective + ?Sized>(
    objective: &O,
    profiles: &[ClientProfile],
    budget: &Budget,
    rounds: u64,
    tau_max: u32,
) -> Result<(AllocationResult, OpCounters)> {
    validate_inputs(profiles, budget, rounds, tau_max)?;
    check_stats(objective.stats(), profiles)?;
    let candidates: Vec<_> = (1..=tau_max)
        .into_par_iter()
        .map(|tau| -> Result<Option<(AllocationResult, OpCounters)>> {
            let mut ops = OpCounters {
                taus_evaluated: 1,
                ..Default::default()
            };
            let caps = client_caps(profiles, budget, rounds, tau);
            let total = budget.total_batch_cap(rounds, tau);
            if caps.iter().any(|(c, _)| *c < 1) || (profiles.len() as u64) > total {
                return Ok(None);
            }
            let stage = objective.at_tau(tau)?;
            let batch = allocate_at_tau(&stage, &caps, total, &mut ops);
            let used: u64 = batch.iter().sum();
            Ok(Some((
                AllocationResult {
                    tau,
                    objective: stage.value(&batch),
                    binding: bindings(&batch, &caps),
                    unused_batch: total - used,
                    batch,
                },
                ops,
            )))
        })
        .collect();
    reduce_by_tau(candidates, "co-optimization")
}

/// Heterogeneous batch allocation minimizing `objective` over `tau` and `s`.
pub fn coopt_fl<O: Objective + ?Sized>(
    objective: &O,
    profiles: &[ClientProfile],
    budget: &Budget,
    rounds: u64,
    tau_max: u32,
) -> Result<AllocationResult> {
    coopt_fl_counted(objective, profiles, budget, rounds, tau_max).map(|(a, _)| a)
}

/// Best `tau` for a fixed batch vector; the batch must fit every constraint.
pub fn optimize_tau<O: Objective + ?Sized>(
    objective: &O,
    profiles: &[ClientProfile],
    budget: &Budget,
    rounds: u64,
    tau_max: u32,
    batch: &[u64],
) -> Result<AllocationResult> {
    validate_inputs(profiles, budget, rounds, tau_max)?;
    check_stats(objective.stats(), profiles)?;
    if batch.len() != profiles.len() || batch.iter().any(|s| *s < 1) {
        return Err(Error::InvalidArgument(format!(
            "batch {batch:?} does not fit {} clients",
            profiles.len()
        )));
    }
    let sum: u64 = batch.iter().sum();
    let mut best: Option<AllocationResult> = None;
    for tau in 1..=tau_max {
        let caps = client_caps(profiles, budget, rounds, tau);
        let total = budget.total_batch_cap(rounds, tau);
        if sum > total || batch.iter().zip(&caps).any(|(s, (c, _))| s > c) {
            continue;
        }
        let v = objective.at_tau(tau)?.value(batch);
        if best.as_ref().map_or(true, |b| v < b.objective) {
            best = Some(AllocationResult {
                tau,
                batch: batch.to_vec(),
                objective: v,
                binding: bindings(batch, &caps),
                unused_batch: total - sum,
            });
        }
    }
    best.ok_or_else(|| Error::Infeasible(format!("batch {batch:?} fits no tau in 1..={tau_max}")))
}

/// Splits `total` in proportion to `weights`, rounding by largest remainder
/// so the parts sum to `total`. Remainder ties go to the lower index.
pub fn proportional_split(total: u64, weights: &[f64]) -> Vec<u64> {
    let w: f64 = weights.iter().sum();
    if weights.is_empty() || !(w > 0.0) {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|x| total as f64 * x / w).collect();
    let mut parts: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
    let assigned: u64 = parts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|a, b| {
        let ra = exact[*a] - exact[*a].floor();
        let rb = exact[*b] - exact[*b].floor();
        rb.total_cmp(&ra).then(a.cmp(b))
    });
    for i in order
        .into_iter()
        .take(total.saturating_sub(assigned) as usize)
    {
        parts[i] += 1;
    }
    parts
}

/// Largest supported brute-force instance.
pub const BRUTE_FORCE_MAX_CLIENTS: usize = 4;
pub const BRUTE_FORCE_MAX_BATCH: u64 = 64;

/// Exhaustive search over integer `(tau, s)` with `s_i <= s_cap`.
/// Ties go to the smaller `tau`, then the lexicographically smaller `s`.
pub fn brute_force_opt<O: Objective + ?Sized>(
    objective: &O,
    profiles: &[ClientProfile],
    budget: &Budget,
    rounds: u64,
    tau_max: u32,
    s_cap: u64,
) -> Result<AllocationResult> {
    if profiles.len() > BRUTE_FORCE_MAX_CLIENTS || s_cap > BRUTE_FORCE_MAX_BATCH {
        return Err(Error::TooLarge(format!(
            "exhaustive search limited to {BRUTE_FORCE_MAX_CLIENTS} clients and batch cap \
             {BRUTE_FORCE_MAX_BATCH}; got {} clients, cap {s_cap}",
            profiles.len()
        )));
    }
    validate_inputs(profiles, budget, rounds, tau_max)?;
    check_stats(objective.stats(), profiles)?;
    let n = profiles.len();
    let mut best: Option<AllocationResult> = None;
    for tau in 1..=tau_max {
        let caps = client_caps(profiles, budget, rounds, tau);
        let upper: Vec<u64> = caps.iter().map(|(c, _)| (*c).min(s_cap)).collect();
        let total = budget.total_batch_cap(rounds, tau);
        if upper.iter().any(|u| *u < 1) {
            continue;
        }
        let stage = objective.at_tau(tau)?;
        let mut s = vec![1u64; n];
        enumerate(0, &mut s, &upper, total, &mut |s: &[u64], sum: u64| {
            let v = stage.value(s);
            if best.as_ref().map_or(true, |b| v < b.objective) {
                best = Some(AllocationResult {
                    tau,
                    batch: s.to_vec(),
                    objective: v,
                    binding: bindings(s, &caps),
                    unused_batch: total - sum,
                });
            }
        });
    }
    best.ok_or_else(|| Error::Infeasible("exhaustive search found no feasible allocation".into()))
}

/// Visits every `s` with `1 <= s_i <= upper_i` and `sum s <= total` in
/// lexicographic order.
fn enumerate(
    k: usize,
    s: &mut [u64],
    upper: &[u64],
    total: u64,
    visit: &mut dyn FnMut(&[u64], u64),
) {
    if k == s.len() {
        let sum = s.iter().sum();
        if sum <= total {
            visit(s, sum);
        }
        return;
    }
    let fixed: u64 = s[..k].iter().sum();
    let rest = (s.len() - k - 1) as u64;
    let mut v = 1;
    while v <= upper[k] && fixed + v + rest <= total {
        s[k] = v;
        enumerate(k + 1, s, upper, total, visit);
        v += 1;
    }
    s[k] = 1;
}

/// Real-valued uniform objective `f(tau)` and its derivative.
///
/// The substituted batch satisfies `sum M_i D_i^2 / s(tau) = max(kappa tau, floor)`,
/// which covers both the uniform case (`s(tau) = min(C / tau, D_min)`) and the
/// constant-compute-time case (`kappa = W^2 a / (R - K b)`, no floor).
#[derive(Debug, Clone)]
pub struct TauCurve {
    params: AssumptionParams,
    q: f64,
    rounds: f64,
    initial_gap: f64,
    rounds_factor: f64,
    variance_coef: f64,
    kappa: f64,
    floor: f64,
}

impl TauCurve {
    fn new(
        rounds: u64,
        params: &AssumptionParams,
        stats: &DataStats,
        initial_gap: f64,
        kappa: f64,
        floor: f64,
    ) -> Result<Self> {
        params.validate()?;
        let q = contraction_q(params)?;
        let omq = params.eta * params.c * params.mu;
        let total = stats.total();
        Ok(Self {
            params: *params,
            q,
            rounds: rounds as f64,
            initial_gap,
            rounds_factor: -(q.ln() * rounds as f64).exp_m1() / omq,
            variance_coef: params.beta * params.eta * params.eta / (2.0 * total * total * omq),
            kappa,
            floor,
        })
    }

    /// Uniform batch `s(tau) = min(C / tau, D_min)`.
    pub fn uniform(
        rounds: u64,
        budget: &Budget,
        profiles: &[ClientProfile],
        params: &AssumptionParams,
        initial_gap: f64,
    ) -> Result<Self> {
        let stats = DataStats::from_profiles(profiles);
        let k = rounds as f64;
        let c_cost = (budget.cost - k * budget.cost_per_round)
            / (budget.cost_per_sample * k * profiles.len() as f64);
        let c_time = profiles
            .iter()
            .map(|p| p.speed * (budget.time / k - p.upload_time))
            .fold(f64::INFINITY, f64::min);
        let d_min = profiles
            .iter()
            .map(|p| p.data_cap() as f64)
            .fold(f64::INFINITY, f64::min);
        let weight: f64 = stats
            .variance
            .iter()
            .zip(&stats.counts)
            .map(|(m, d)| m * d * d)
            .sum();
        let c = c_cost.min(c_time);
        Self::new(
            rounds,
            params,
            &stats,
            initial_gap,
            weight / c,
            weight / d_min,
        )
    }

    /// Batch proportional to `sqrt(M_i) D_i` summing to `s_tot(tau)`.
    pub fn proportional(
        rounds: u64,
        budget: &Budget,
        profiles: &[ClientProfile],
        params: &AssumptionParams,
        initial_gap: f64,
    ) -> Result<Self> {
        let stats = DataStats::from_profiles(profiles);
        let w: f64 = profiles.iter().map(ClientProfile::allocation_weight).sum();
        let slack = (budget.cost - rounds as f64 * budget.cost_per_round) / rounds as f64;
        Self::new(
            rounds,
            params,
            &stats,
            initial_gap,
            w * w * budget.cost_per_sample / slack,
            0.0,
        )
    }

    fn psi(&self, tau: f64) -> (f64, f64) {
        let linear = self.kappa * tau;
        if linear >= self.floor {
            (linear, self.kappa)
        } else {
            (self.floor, 0.0)
        }
    }

    pub fn value(&self, tau: f64) -> f64 {
        let ln_q = self.q.ln();
        let h = drift(tau, &self.params);
        let (psi, _) = self.psi(tau);
        (ln_q * self.rounds * tau).exp() * self.initial_gap
            + self.rounds_factor
                * (self.variance_coef * (-(ln_q * tau).exp_m1()) * psi + self.params.rho * h * h)
    }

    pub fn derivative(&self, tau: f64) -> f64 {
        let ln_q = self.q.ln();
        let qt = (ln_q * tau).exp();
        let h = drift(tau, &self.params);
        let dh = drift_derivative(tau, &self.params);
        let (psi, dpsi) = self.psi(tau);
        self.rounds * ln_q * (ln_q * self.rounds * tau).exp() * self.initial_gap
            + self.rounds_factor
                * (self.variance_coef * (-ln_q * qt * psi + (1.0 - qt) * dpsi)
                    + self.params.rho * 2.0 * h * dh)
    }

    /// Stationary point on `[1, tau_max]` by bisection on the derivative,
    /// or an integer scan outside the convexity window `tau < 2 / ln(1/q)`.
    pub fn stationary_point(&self, tau_max: u32) -> f64 {
        let hi_end = tau_max as f64;
        let window = 2.0 / (1.0 / self.q).ln();
        let d_lo = self.derivative(1.0);
        let d_hi = self.derivative(hi_end);
        if hi_end < window && d_lo.is_finite() && d_hi.is_finite() {
            if d_lo >= 0.0 {
                return 1.0;
            }
            if d_hi <= 0.0 {
                return hi_end;
            }
            let (mut lo, mut hi) = (1.0, hi_end);
            while hi - lo > 1e-6 {
                let mid = 0.5 * (lo + hi);
                let d = self.derivative(mid);
                if !d.is_finite() {
                    return self.scan(tau_max) as f64;
                }
                if d < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        } else {
            self.scan(tau_max) as f64
        }
    }

    fn scan(&self, tau_max: u32) -> u32 {
        let mut best = (1, self.value(1.0));
        for tau in 2..=tau_max {
            let v = self.value(tau as f64);
            if v < best.1 {
                best = (tau, v);
            }
        }
        best.0
    }

    /// Better of `floor(tau_hat)` and `ceil(tau_hat)`; ties to the smaller.
    pub fn best_integer(&self, tau_max: u32) -> u32 {
        let t = self.stationary_point(tau_max);
        let lo = (t.floor() as u32).clamp(1, tau_max);
        let hi = (t.ceil() as u32).clamp(1, tau_max);
        if self.value(hi as f64) < self.value(lo as f64) {
            hi
        } else {
            lo
        }
    }
}

/// Single batch size for all clients; `tau` from the stationary point of
/// the substituted bound.
pub fn uniform_closed_form(
    rounds: u64,
    budget: &Budget,
    profiles: &[ClientProfile],
    params: &AssumptionParams,
    initial_gap: f64,
    tau_max: u32,
) -> Result<AllocationResult> {
    validate_inputs(profiles, budget, rounds, tau_max)?;
    let curve = TauCurve::uniform(rounds, budget, profiles, params, initial_gap)?;
    let mut tau = curve.best_integer(tau_max);
    let d_min = profiles
        .iter()
        .map(ClientProfile::data_cap)
        .min()
        .unwrap_or(1);
    let s = loop {
        let real = crate::bounds::uniform_batch_real(rounds, tau, budget, profiles);
        if real >= 1.0 {
            break (real.floor() as u64).clamp(1, d_min);
        }
        if tau == 1 {
            return Err(Error::Infeasible(
                "uniform batch below one sample even at tau = 1".into(),
            ));
        }
        tau -= 1;
    };
    let batch = vec![s; profiles.len()];
    let objective = OfflineObjective {
        rounds,
        params: *params,
        stats: DataStats::from_profiles(profiles),
        initial_gap,
    };
    let caps = client_caps(profiles, budget, rounds, tau);
    let total = budget.total_batch_cap(rounds, tau);
    Ok(AllocationResult {
        tau,
        objective: objective.evaluate(tau, &batch)?,
        binding: bindings(&batch, &caps),
        unused_batch: total.saturating_sub(s * profiles.len() as u64),
        batch,
    })
}

/// Allocation when each local step takes a constant `compute_time`
/// regardless of batch size.
pub fn gpu_closed_form(
    rounds: u64,
    budget: &Budget,
    profiles: &[ClientProfile],
    params: &AssumptionParams,
    initial_gap: f64,
    tau_max: u32,
) -> Result<AllocationResult> {
    validate_inputs(profiles, budget, rounds, tau_max)?;
    let k = rounds as f64;
    let mut tau_time = f64::INFINITY;
    for (i, p) in profiles.iter().enumerate() {
        let t = p.compute_time.ok_or_else(|| {
            Error::InvalidArgument(format!("client {i} has no constant compute time"))
        })?;
        if !(t > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "client {i} compute time must be positive, got {t}"
            )));
        }
        tau_time = tau_time.min((budget.time - k * p.upload_time) / (k * t));
    }
    if tau_time < 1.0 {
        return Err(Error::Infeasible(format!(
            "deadline admits only {tau_time:.3} local steps per round"
        )));
    }
    let curve = TauCurve::proportional(rounds, budget, profiles, params, initial_gap)?;
    let tau_cap = (tau_time.floor().min(tau_max as f64)) as u32;
    let mut tau = curve.best_integer(tau_max).min(tau_cap);

    let weights: Vec<f64> = profiles
        .iter()
        .map(ClientProfile::allocation_weight)
        .collect();
    let w: f64 = weights.iter().sum();
    let n = profiles.len() as u64;
    let (total, mut batch) = loop {
        let total = budget.total_batch_cap(rounds, tau);
        if total >= n {
            let real = budget.total_batch_real(rounds, tau);
            let batch: Vec<u64> = weights
                .iter()
                .zip(profiles)
                .map(|(wi, p)| ((real * wi / w).floor() as u64).min(p.data_cap()))
                .collect();
            break (total, batch);
        }
        if tau == 1 {
            return Err(Error::Infeasible(
                "cost budget below one sample per client".into(),
            ));
        }
        tau -= 1;
    };
    let objective = OfflineObjective {
        rounds,
        params: *params,
        stats: DataStats::from_profiles(profiles),
        initial_gap,
    };
    let stage = objective.at_tau(tau)?;
    let mut ops = OpCounters::default();
    repair_lower_bound(&mut batch, &stage, total, &mut ops);
    let caps: Vec<(u64, Binding)> = profiles
        .iter()
        .map(|p| (p.data_cap(), Binding::Data))
        .collect();
    let used: u64 = batch.iter().sum();
    Ok(AllocationResult {
        tau,
        objective: stage.value(&batch),
        binding: bindings(&batch, &caps),
        unused_batch: total - used,
        batch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> AssumptionParams {
        AssumptionParams::new(1.0, 1.0, 1.0, 0.0, 0.01)
    }

    fn offline(profiles: &[ClientProfile], rounds: u64) -> OfflineObjective {
        OfflineObjective {
            rounds,
            params: params(),
            stats: DataStats::from_profiles(profiles),
            initial_gap: 1.0,
        }
    }

    // One round, tau fixed at 1, s_tot(R) = 30.
    fn budget_30() -> Budget {
        Budget::new(30.0 * 0.001 + 1.0, 1e6, 0.001, 1.0)
    }

    #[test]
    fn symmetric_split() {
        let profiles = vec![ClientProfile::new(1e6, 0.0, 100, 1.0); 3];
        let r = coopt_fl(&offline(&profiles, 1), &profiles, &budget_30(), 1, 1).unwrap();
        assert_eq!(r.batch, vec![10, 10, 10]);
        assert!(r.binding.iter().all(|b| *b == Binding::Cost));
    }

    #[test]
    fn cauchy_proportional_allocation() {
        let profiles = vec![
            ClientProfile::new(1e6, 0.0, 1000, 1.0),
            ClientProfile::new(1e6, 0.0, 1000, 4.0),
        ];
        let mut obj = offline(&profiles, 1);
        obj.stats.counts = vec![10.0, 10.0];
        let r = coopt_fl(&obj, &profiles, &budget_30(), 1, 1).unwrap();
        assert_eq!(r.batch, vec![10, 20]);
    }

    #[test]
    fn time_capped_client_frees_budget() {
        // Client 2's deadline cap is 15 samples.
        let profiles = vec![
            ClientProfile::new(1e6, 0.0, 1000, 1.0),
            ClientProfile::new(15.0, 0.0, 1000, 4.0),
        ];
        let mut obj = offline(&profiles, 1);
        obj.stats.counts = vec![10.0, 10.0];
        let budget = Budget::new(30.0 * 0.001 + 1.0, 1.0, 0.001, 1.0);
        let r = coopt_fl(&obj, &profiles, &budget, 1, 1).unwrap();
        assert_eq!(r.batch, vec![15, 15]);
        assert_eq!(r.binding[1], Binding::Time);
        let bf = brute_force_opt(&obj, &profiles, &budget, 1, 1, 40).unwrap();
        assert_eq!(bf.batch, r.batch);
        assert_eq!(bf.objective, r.objective);
    }

    #[test]
    fn caps_below_budget_leave_slack() {
        let profiles = vec![ClientProfile::new(1e6, 0.0, 5, 1.0); 2];
        let r = coopt_fl(&offline(&profiles, 1), &profiles, &budget_30(), 1, 1).unwrap();
        assert_eq!(r.batch, vec![5, 5]);
        assert_eq!(r.unused_batch, 20);
        assert!(r.binding.iter().all(|b| *b == Binding::Data));
    }

    #[test]
    fn brute_force_guards_and_edges() {
        let profiles = vec![ClientProfile::new(1e6, 0.0, 100, 1.0); 5];
        let e =
            brute_force_opt(&offline(&profiles, 1), &profiles, &budget_30(), 1, 1, 10).unwrap_err();
        assert!(matches!(e, Error::TooLarge(_)));
        // Exactly one feasible point: s_tot = 2 with two clients.
        let profiles = vec![ClientProfile::new(1e6, 0.0, 100, 1.0); 2];
        let budget = Budget::new(2.0 * 0.001 + 1.0, 1e6, 0.001, 1.0);
        let r = brute_force_opt(&offline(&profiles, 1), &profiles, &budget, 1, 1, 10).unwrap();
        assert_eq!(r.batch, vec![1, 1]);
        // Nothing fits: s_tot = 1 with two clients.
        let budget = Budget::new(1.0 * 0.001 + 1.0, 1e6, 0.001, 1.0);
        let e = brute_force_opt(&offline(&profiles, 1), &profiles, &budget, 1, 1, 10).unwrap_err();
        assert!(matches!(e, Error::Infeasible(_)));
        assert!(matches!(
            coopt_fl(&offline(&profiles, 1), &profiles, &budget, 1, 1),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn uniform_cost_binding_matches_formula() {
        let profiles = vec![ClientProfile::new(1e4, 0.1, 100_000, 1.0); 4];
        let budget = Budget::new(50.0, 1e5, 0.001, 0.1);
        let p = AssumptionParams::new(1.0, 1.0, 1.0, 0.5, 0.01);
        let r = uniform_closed_form(20, &budget, &profiles, &p, 1.0, 10).unwrap();
        let expected = ((50.0 - 20.0 * 0.1) / (0.001 * 20.0 * r.tau as f64 * 4.0)).floor() as u64;
        assert_eq!(r.batch, vec![expected; 4]);
    }

    #[test]
    fn curve_matches_bound_at_integers() {
        let profiles = vec![
            ClientProfile::new(50.0, 0.5, 400, 2.0),
            ClientProfile::new(20.0, 1.0, 300, 0.5),
        ];
        let budget = Budget::new(40.0, 300.0, 0.002, 0.2);
        let p = AssumptionParams::new(1.0, 2.0, 0.5, 0.3, 0.02);
        let curve = TauCurve::uniform(10, &budget, &profiles, &p, 2.0).unwrap();
        for tau in 1..=8 {
            let f = crate::bounds::f_tau(tau, 10, &budget, &profiles, &p, 2.0).unwrap();
            assert!((curve.value(tau as f64) - f).abs() <= 1e-12 * f, "{tau}");
            let t = tau as f64 + 0.3;
            let fd = (curve.value(t + 1e-6) - curve.value(t - 1e-6)) / 2e-6;
            assert!(
                (fd - curve.derivative(t)).abs() <= 1e-5 * fd.abs().max(1e-8),
                "{tau}"
            );
        }
    }

    #[test]
    fn gpu_symmetric_and_deadline() {
        let profiles = vec![ClientProfile::new(1.0, 0.1, 10_000, 1.0).with_compute_time(0.05); 3];
        let budget = Budget::new(100.0, 1e4, 0.001, 0.1);
        let p = AssumptionParams::new(1.0, 1.0, 1.0, 0.0, 0.01);
        let r = gpu_closed_form(10, &budget, &profiles, &p, 10.0, 20).unwrap();
        assert!(r.batch.iter().all(|s| *s == r.batch[0]));
        // Deadline allows (theta - K t_u) / (K t_c) = (3 - 1) / 0.5 = 4 steps.
        let tight = Budget::new(100.0, 3.0, 0.001, 0.1);
        let r = gpu_closed_form(10, &tight, &profiles, &p, 10.0, 20).unwrap();
        assert_eq!(r.tau, 4);
        let missing = vec![ClientProfile::new(1.0, 0.1, 100, 1.0)];
        assert!(gpu_closed_form(10, &budget, &missing, &p, 1.0, 5).is_err());
    }

    #[test]
    fn proportional_split_examples() {
        assert_eq!(proportional_split(40, &[1.0, 3.0]), vec![10, 30]);
        assert_eq!(proportional_split(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(proportional_split(7, &[2.0, 5.0]).iter().sum::<u64>(), 7);
    }

    #[test]
    fn fixed_batch_tau_search() {
        let profiles = vec![ClientProfile::new(100.0, 0.5, 1000, 1.0); 2];
        let budget = Budget::new(30.0, 100.0, 0.001, 0.1);
        let obj = OnlineObjective {
            params: AssumptionParams::new(1.0, 1.0, 1.0, 0.0, 0.01),
            stats: DataStats::from_profiles(&profiles),
            loss_proxy: 1.0,
        };
        // With no drift more local steps only help, up to the deadline:
        // 10 (tau * 20 / 100 + 0.5) <= 100 gives tau <= 47.
        let r = optimize_tau(&obj, &profiles, &budget, 10, 60, &[20, 20]).unwrap();
        assert_eq!(r.tau, 47);
        assert!(optimize_tau(&obj, &profiles, &budget, 10, 60, &[5000, 5000]).is_err());
    }

    #[test]
    fn online_stage_is_affine() {
        let profiles = vec![ClientProfile::new(10.0, 0.0, 100, 1.0); 2];
        let obj = OnlineObjective {
            params: AssumptionParams::new(1.0, 2.0, 1.0, 0.2, 0.05),
            stats: DataStats::from_profiles(&profiles),
            loss_proxy: 0.7,
        };
        let v = obj.evaluate(3, &[4, 6]).unwrap();
        let direct =
            crate::bounds::approx_marginal_bound(3, &[4.0, 6.0], &obj.params, &obj.stats, 0.7)
                .unwrap();
        assert!((v - direct).abs() <= 1e-14 * direct);
    }
}
