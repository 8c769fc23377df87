//! Convergence-bound evaluators used as controller objectives.
//!
//! All functions take real-valued batch sizes; rounding to integers is the
//! optimizer's job. Every bound divides by `1 - q`, so a contraction factor
//! outside `(0, 1)` is an error rather than a clamp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::{Budget, ClientProfile};

/// Constants of the smoothness, PL and moment assumptions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionParams {
    /// Quadratic-continuity constant `rho`.
    pub rho: f64,
    /// Smoothness `beta`.
    pub beta: f64,
    /// PL constant `c`.
    pub c: f64,
    /// Weighted gradient divergence `delta`.
    pub delta: f64,
    /// Learning rate `eta`.
    pub eta: f64,
    #[serde(default = "one")]
    pub mu: f64,
    #[serde(default = "one")]
    pub mu_g: f64,
}

fn one() -> f64 {
    1.0
}

impl AssumptionParams {
    pub fn new(rho: f64, beta: f64, c: f64, delta: f64, eta: f64) -> Self {
        Self {
            rho,
            beta,
            c,
            delta,
            eta,
            mu: 1.0,
            mu_g: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rho", self.rho),
            ("beta", self.beta),
            ("c", self.c),
            ("eta", self.eta),
            ("mu", self.mu),
            ("mu_g", self.mu_g),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::Parameter(format!(
                "delta must be nonnegative, got {}",
                self.delta
            )));
        }
        if self.mu_g < self.mu {
            return Err(Error::Parameter(format!(
                "mu_g ({}) must be at least mu ({})",
                self.mu_g, self.mu
            )));
        }
        if self.c > self.beta || self.c > 2.0 * self.rho {
            return Err(Error::Parameter(format!(
                "PL constant c = {} must satisfy c <= beta = {} and c <= 2 rho = {}",
                self.c,
                self.beta,
                2.0 * self.rho
            )));
        }
        Ok(())
    }

    /// Largest admissible learning rate, `mu / (beta mu_g^2)`.
    pub fn max_learning_rate(&self) -> f64 {
        self.mu / (self.beta * self.mu_g * self.mu_g)
    }

    /// Clamps `eta` into `(0, mu / (beta mu_g^2)]`, returning a warning when it moved.
    pub fn clamp_learning_rate(&mut self) -> Option<String> {
        let max = self.max_learning_rate();
        if self.eta > max {
            let msg = format!("learning rate {} exceeds {max}; clamped", self.eta);
            log::warn!("{msg}");
            self.eta = max;
            Some(msg)
        } else {
            None
        }
    }

    /// `1 - q = eta c mu`, computed without cancellation.
    fn one_minus_q(&self) -> f64 {
        self.eta * self.c * self.mu
    }
}

/// Per-client variance bounds and data counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataStats {
    /// `M_i`.
    pub variance: Vec<f64>,
    /// `D_i` or `D_i^k`.
    pub counts: Vec<f64>,
}

impl DataStats {
    pub fn new(variance: Vec<f64>, counts: Vec<f64>) -> Result<Self> {
        if variance.len() != counts.len() {
            return Err(Error::InvalidArgument(format!(
                "{} variance bounds but {} data counts",
                variance.len(),
                counts.len()
            )));
        }
        if let Some(m) = variance.iter().find(|m| !(**m >= 0.0) || !m.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "variance bound {m} is negative"
            )));
        }
        if let Some(d) = counts.iter().find(|d| !(**d >= 1.0) || !d.is_finite()) {
            return Err(Error::InvalidArgument(format!("data count {d} is below 1")));
        }
        Ok(Self { variance, counts })
    }

    pub fn from_profiles(profiles: &[ClientProfile]) -> Self {
        Self {
            variance: profiles.iter().map(|p| p.variance).collect(),
            counts: profiles.iter().map(|p| p.data_count as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// `sum_i M_i D_i^2 / s_i`.
    ///
    /// Terms are summed in ascending order so the result depends only on the
    /// multiset of terms: allocations that permute batch sizes among
    /// identical clients evaluate bit-identically.
    pub fn variance_sum(&self, batch: &[f64]) -> Result<f64> {
        if batch.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "{} batch sizes for {} clients",
                batch.len(),
                self.len()
            )));
        }
        let mut terms = Vec::with_capacity(batch.len());
        for ((m, d), s) in self.variance.iter().zip(&self.counts).zip(batch) {
            if !(*s >= 1.0) {
                return Err(Error::InvalidArgument(format!("batch size {s} is below 1")));
            }
            terms.push(m * d * d / s);
        }
        terms.sort_by(f64::total_cmp);
        Ok(terms.iter().sum())
    }
}

/// Contraction factor `q = 1 - eta c mu`, required to lie in `(0, 1)`.
pub fn contraction_q(params: &AssumptionParams) -> Result<f64> {
    let q = 1.0 - params.one_minus_q();
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Parameter(format!(
            "contraction factor q = {q} outside (0, 1); eta = {} too large or zero",
            params.eta
        )));
    }
    Ok(q)
}

/// Local drift bound `h(tau) = delta/beta ((eta beta + 1)^tau - 1) - eta delta tau`.
pub fn local_bias_h(tau: u32, params: &AssumptionParams) -> Result<f64> {
    if tau < 1 {
        return Err(Error::InvalidArgument("tau must be at least 1".into()));
    }
    Ok(drift(tau as f64, params))
}

/// `h` on real `tau`. For small `tau * eta * beta` the binomial tail
/// `sum_{j >= 2} C(tau, j) x^j` is summed directly, which avoids cancelling
/// the linear term.
pub(crate) fn drift(tau: f64, params: &AssumptionParams) -> f64 {
    if params.delta == 0.0 {
        return 0.0;
    }
    let x = params.eta * params.beta;
    if tau == tau.floor() && tau * x < 1.0 {
        let n = tau as u64;
        let mut term = tau * x; // C(n,1) x
        let mut tail = 0.0;
        for j in 2..=n {
            term *= (n - j + 1) as f64 / j as f64 * x;
            tail += term;
            if term <= tail * 1e-18 {
                break;
            }
        }
        params.delta / params.beta * tail
    } else {
        params.delta / params.beta * (tau * x.ln_1p()).exp_m1() - params.eta * params.delta * tau
    }
}

/// Derivative of [`drift`] in `tau`.
pub(crate) fn drift_derivative(tau: f64, params: &AssumptionParams) -> f64 {
    let x = params.eta * params.beta;
    params.delta / params.beta * (tau * x.ln_1p()).exp() * x.ln_1p() - params.eta * params.delta
}

fn check_common(
    tau: u32,
    batch: &[f64],
    params: &AssumptionParams,
    stats: &DataStats,
) -> Result<f64> {
    params.validate()?;
    if tau < 1 {
        return Err(Error::InvalidArgument("tau must be at least 1".into()));
    }
    if batch.len() != stats.len() {
        return Err(Error::InvalidArgument(format!(
            "{} batch sizes for {} clients",
            batch.len(),
            stats.len()
        )));
    }
    contraction_q(params)
}

/// Per-round variance coefficient `beta eta^2 (1 - q^tau) / (2 D^2 (1 - q))`
/// applied to `sum M_i D_i^2 / s_i`.
fn variance_term(
    tau: u32,
    batch: &[f64],
    params: &AssumptionParams,
    stats: &DataStats,
) -> Result<f64> {
    let q = contraction_q(params)?;
    let total = stats.total();
    let geometric = (1.0 - q.powi(tau as i32)) / params.one_minus_q();
    Ok(
        params.beta * params.eta * params.eta * geometric / (2.0 * total * total)
            * stats.variance_sum(batch)?,
    )
}

/// Expected error after `K` rounds of `tau` local steps with batch sizes `s`.
pub fn cumulative_bound(
    rounds: u64,
    tau: u32,
    batch: &[f64],
    params: &AssumptionParams,
    stats: &DataStats,
    initial_gap: f64,
) -> Result<f64> {
    let q = check_common(tau, batch, params, stats)?;
    if rounds < 1 {
        return Err(Error::InvalidArgument("need at least one round".into()));
    }
    if !(initial_gap >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "initial gap must be nonnegative, got {initial_gap}"
        )));
    }
    let h = drift(tau as f64, params);
    let rounds_factor = -(q.ln() * rounds as f64).exp_m1() / params.one_minus_q();
    let contraction = (q.ln() * (rounds as f64) * tau as f64).exp();
    Ok(contraction * initial_gap
        + rounds_factor * (variance_term(tau, batch, params, stats)? + params.rho * h * h))
}

/// One-round bound with data-freshness term `psi`.
pub fn marginal_bound(
    tau: u32,
    batch: &[f64],
    params: &AssumptionParams,
    stats: &DataStats,
    prev_gap: f64,
    psi: f64,
) -> Result<f64> {
    let q = check_common(tau, batch, params, stats)?;
    let h = drift(tau as f64, params);
    Ok(q.powi(tau as i32) * (prev_gap + psi)
        + variance_term(tau, batch, params, stats)?
        + params.rho * h * h)
}

/// Online objective: the one-round bound with `F* = 0` and the contraction
/// term driven by the batch-loss proxy `loss_proxy`. Negative proxies are
/// clamped to zero.
pub fn approx_marginal_bound(
    tau: u32,
    batch: &[f64],
    params: &AssumptionParams,
    stats: &DataStats,
    loss_proxy: f64,
) -> Result<f64> {
    let proxy = if loss_proxy < 0.0 {
        log::warn!("negative loss proxy {loss_proxy} clamped to 0");
        0.0
    } else {
        loss_proxy
    };
    marginal_bound(tau, batch, params, stats, proxy, 0.0)
}

/// Real-valued uniform batch `s*(tau)`: the smaller of the cost-limited and
/// deadline-limited batch, capped by the smallest dataset.
pub fn uniform_batch_real(
    rounds: u64,
    tau: u32,
    budget: &Budget,
    profiles: &[ClientProfile],
) -> f64 {
    let n = profiles.len() as f64;
    let cost_side = budget.total_batch_real(rounds, tau) / n;
    let time_side = profiles
        .iter()
        .map(|p| budget.time_cap_real(p, rounds, tau))
        .fold(f64::INFINITY, f64::min);
    let data_side = profiles
        .iter()
        .map(|p| p.data_cap() as f64)
        .fold(f64::INFINITY, f64::min);
    cost_side.min(time_side).min(data_side)
}

/// Uniform-batch objective `f(tau)` with `s*(tau)` substituted (real-valued).
pub fn f_tau(
    tau: u32,
    rounds: u64,
    budget: &Budget,
    profiles: &[ClientProfile],
    params: &AssumptionParams,
    initial_gap: f64,
) -> Result<f64> {
    crate::system::feasibility_check(budget, profiles, rounds).into_result()?;
    let s = uniform_batch_real(rounds, tau, budget, profiles);
    if !(s >= 1.0) {
        return Err(Error::Infeasible(format!(
            "uniform batch s*({tau}) = {s} is below one sample"
        )));
    }
    let stats = DataStats::from_profiles(profiles);
    cumulative_bound(
        rounds,
        tau,
        &vec![s; profiles.len()],
        params,
        &stats,
        initial_gap,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> AssumptionParams {
        AssumptionParams::new(1.0, 2.0, 1.0, 1.0, 0.1)
    }

    #[test]
    fn q_examples() {
        let p = AssumptionParams::new(1.0, 1.0, 1.0, 0.0, 0.005);
        assert!((contraction_q(&p).unwrap() - 0.995).abs() < 1e-15);
        let p = AssumptionParams::new(1.0, 2.0, 2.0, 0.0, 0.01);
        assert!((contraction_q(&p).unwrap() - 0.98).abs() < 1e-15);
        let mut p = AssumptionParams::new(1.0, 1.0, 1.0, 0.0, 0.005);
        p.eta = 0.0;
        assert!(matches!(contraction_q(&p), Err(Error::Parameter(_))));
    }

    #[test]
    fn h_examples() {
        let p = params();
        assert!(local_bias_h(1, &p).unwrap().abs() <= 1e-12);
        let h2 = local_bias_h(2, &p).unwrap();
        assert!((h2 - 0.02).abs() / 0.02 < 1e-9, "{h2}");
        let mut iid = p;
        iid.delta = 0.0;
        for tau in 1..20 {
            assert_eq!(local_bias_h(tau, &iid).unwrap(), 0.0);
        }
        assert!(local_bias_h(0, &p).is_err());
    }

    #[test]
    fn h_series_and_closed_form_agree() {
        let p = AssumptionParams::new(1.0, 3.0, 1.0, 0.7, 0.01);
        for tau in [3.0, 7.0, 20.0, 33.0] {
            let series = drift(tau, &p);
            let closed =
                p.delta / p.beta * ((1.0 + p.eta * p.beta).powf(tau) - 1.0) - p.eta * p.delta * tau;
            assert!(
                (series - closed).abs() <= 1e-12 * closed.abs().max(1e-6),
                "{tau}"
            );
        }
    }

    #[test]
    fn pure_contraction_without_noise() {
        let p = AssumptionParams::new(1.0, 1.0, 1.0, 0.0, 0.01);
        let stats = DataStats::new(vec![0.0, 0.0], vec![10.0, 20.0]).unwrap();
        let v = cumulative_bound(5, 3, &[4.0, 2.0], &p, &stats, 2.0).unwrap();
        let q: f64 = 0.99;
        assert!((v - q.powi(15) * 2.0).abs() < 1e-14);
    }

    #[test]
    fn single_client_single_round() {
        let p = AssumptionParams::new(1.0, 2.0, 1.0, 0.3, 0.05);
        let stats = DataStats::new(vec![3.0], vec![40.0]).unwrap();
        let v = cumulative_bound(1, 1, &[8.0], &p, &stats, 1.5).unwrap();
        let q = 1.0 - 0.05;
        let expected = q * 1.5 + p.beta * p.eta * p.eta * 3.0 / (2.0 * 8.0);
        assert!((v - expected).abs() < 1e-14 * expected, "{v} vs {expected}");
    }

    #[test]
    fn marginal_reduces_to_one_round_slice() {
        let p = AssumptionParams::new(1.0, 2.0, 0.5, 0.4, 0.02);
        let stats = DataStats::new(vec![1.0, 2.0], vec![30.0, 50.0]).unwrap();
        let s = [5.0, 7.0];
        let m = marginal_bound(3, &s, &p, &stats, 0.8, 0.0).unwrap();
        let c = cumulative_bound(1, 3, &s, &p, &stats, 0.8).unwrap();
        assert!((m - c).abs() < 1e-14);
        let approx = approx_marginal_bound(3, &s, &p, &stats, 0.8 + 0.1).unwrap();
        let with_psi = marginal_bound(3, &s, &p, &stats, 0.8, 0.1).unwrap();
        assert!((approx - with_psi).abs() < 1e-14);
    }

    #[test]
    fn marginal_tau_one_has_no_bias() {
        let p = AssumptionParams::new(1.0, 2.0, 0.5, 0.0, 0.02);
        let stats = DataStats::new(vec![1.0, 2.0], vec![30.0, 50.0]).unwrap();
        let v = marginal_bound(1, &[5.0, 7.0], &p, &stats, 0.4, 0.2).unwrap();
        let q = 1.0 - 0.01;
        let var = p.beta * p.eta * p.eta / (2.0 * 80.0 * 80.0) * (900.0 / 5.0 + 2.0 * 2500.0 / 7.0);
        assert!((v - (q * 0.6 + var)).abs() < 1e-15);
    }

    #[test]
    fn negative_proxy_is_clamped() {
        let p = params();
        let stats = DataStats::new(vec![1.0], vec![10.0]).unwrap();
        let a = approx_marginal_bound(2, &[3.0], &p, &stats, -1.0).unwrap();
        let b = approx_marginal_bound(2, &[3.0], &p, &stats, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bias_eventually_dominates() {
        let p = AssumptionParams::new(5.0, 2.0, 1.0, 2.0, 0.05);
        let stats = DataStats::new(vec![1.0], vec![100.0]).unwrap();
        let values: Vec<f64> = (1..=20)
            .map(|t| approx_marginal_bound(t, &[10.0], &p, &stats, 1.0).unwrap())
            .collect();
        assert!(values[19] > values[0]);
    }

    #[test]
    fn s_star_example() {
        let budget = Budget::new(1000.0, 100.0, 0.001, 10.0);
        let profiles = vec![ClientProfile::new(10.0, 2.0, 1_000_000, 1.0); 5];
        let s = uniform_batch_real(10, 2, &budget, &profiles);
        assert!((s - 40.0).abs() < 1e-9);
        let small = vec![ClientProfile::new(10.0, 2.0, 12, 1.0); 5];
        assert_eq!(uniform_batch_real(10, 2, &budget, &small), 12.0);
    }

    #[test]
    fn invalid_pl_constant_rejected() {
        let p = AssumptionParams::new(0.1, 2.0, 1.0, 0.0, 0.01);
        assert!(p.validate().is_err());
    }

    #[test]
    fn learning_rate_clamp_warns() {
        let mut p = AssumptionParams::new(1.0, 10.0, 1.0, 0.0, 0.5);
        assert!(p.clamp_learning_rate().is_some());
        assert!((p.eta - 0.1).abs() < 1e-15);
        assert!(p.clamp_learning_rate().is_none());
    }
}
