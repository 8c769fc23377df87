//! Client system profiles, budgets and the time/cost accounting shared by the
//! optimizers and the simulator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-client system and data descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    /// Compute speed `p_i`, samples per second.
    pub speed: f64,
    /// Per-round communication time `t_ui`, seconds.
    pub upload_time: f64,
    /// Data count `D_i` (or the stream counter `D_i^k`).
    pub data_count: u64,
    /// Gradient-variance bound `M_i`.
    pub variance: f64,
    /// Buffer capacity `B_i`; `None` for static datasets.
    #[serde(default)]
    pub buffer_capacity: Option<u64>,
    /// Constant per-step compute time, used only when batch size does not
    /// affect compute time.
    #[serde(default)]
    pub compute_time: Option<f64>,
}

impl ClientProfile {
    pub fn new(speed: f64, upload_time: f64, data_count: u64, variance: f64) -> Self {
        Self {
            speed,
            upload_time,
            data_count,
            variance,
            buffer_capacity: None,
            compute_time: None,
        }
    }

    pub fn with_buffer(mut self, capacity: u64) -> Self {
        self.buffer_capacity = Some(capacity);
        self
    }

    pub fn with_compute_time(mut self, t: f64) -> Self {
        self.compute_time = Some(t);
        self
    }

    /// Largest batch the client can draw from: `min(D_i, B_i)`.
    pub fn data_cap(&self) -> u64 {
        match self.buffer_capacity {
            Some(b) => b.min(self.data_count),
            None => self.data_count,
        }
    }

    /// Allocation weight `sqrt(M_i) * D_i`.
    pub fn allocation_weight(&self) -> f64 {
        self.variance.max(0.0).sqrt() * self.data_count as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.speed > 0.0) || !self.speed.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "client speed must be positive, got {}",
                self.speed
            )));
        }
        if !(self.upload_time >= 0.0) || !self.upload_time.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "upload time must be nonnegative, got {}",
                self.upload_time
            )));
        }
        if self.data_count < 1 {
            return Err(Error::InvalidArgument("client holds no data".into()));
        }
        if !(self.variance >= 0.0) || !self.variance.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "variance bound must be nonnegative, got {}",
                self.variance
            )));
        }
        if self.buffer_capacity == Some(0) {
            return Err(Error::InvalidArgument(
                "buffer capacity must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Cost and completion-time budgets with the linear cost model
/// `K (a tau sum_i s_i + b) <= R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    /// Total cost budget `R`.
    pub cost: f64,
    /// Completion-time budget `theta`, seconds.
    pub time: f64,
    /// Cost per processed sample `a`.
    pub cost_per_sample: f64,
    /// Cost per aggregation round `b`.
    pub cost_per_round: f64,
}

impl Budget {
    pub fn new(cost: f64, time: f64, cost_per_sample: f64, cost_per_round: f64) -> Self {
        Self {
            cost,
            time,
            cost_per_sample,
            cost_per_round,
        }
    }

    /// Real-valued total batch per local step, `(R - K b) / (a K tau)`.
    pub fn total_batch_real(&self, rounds: u64, tau: u32) -> f64 {
        let k = rounds as f64;
        (self.cost - k * self.cost_per_round) / (self.cost_per_sample * k * tau as f64)
    }

    /// `s_tot(R) = floor((R - K b) / (a K tau))`, zero when the budget is exhausted.
    pub fn total_batch_cap(&self, rounds: u64, tau: u32) -> u64 {
        let v = self.total_batch_real(rounds, tau);
        if v.is_finite() && v >= 1.0 {
            v.floor() as u64
        } else {
            0
        }
    }

    /// Real-valued per-client time cap `p_i (theta / (K tau) - t_ui / tau)`.
    pub fn time_cap_real(&self, client: &ClientProfile, rounds: u64, tau: u32) -> f64 {
        client.speed * (self.time / (rounds as f64 * tau as f64) - client.upload_time / tau as f64)
    }

    /// `s_i(theta)`, floored; zero when not even one sample fits.
    pub fn time_cap(&self, client: &ClientProfile, rounds: u64, tau: u32) -> u64 {
        let v = self.time_cap_real(client, rounds, tau);
        if v.is_finite() && v >= 1.0 {
            v.floor() as u64
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cost budget", self.cost),
            ("time budget", self.time),
            ("cost per sample", self.cost_per_sample),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.cost_per_round >= 0.0) || !self.cost_per_round.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "cost per round must be nonnegative, got {}",
                self.cost_per_round
            )));
        }
        Ok(())
    }
}

/// Wall-clock time of one round: the straggler's `tau s_i / p_i + t_ui`.
pub fn round_time(tau: u32, batch: &[u64], profiles: &[ClientProfile]) -> f64 {
    batch
        .iter()
        .zip(profiles)
        .map(|(s, p)| tau as f64 * *s as f64 / p.speed + p.upload_time)
        .fold(0.0, f64::max)
}

/// Cost of one round: `a tau sum_i s_i + b`.
pub fn round_cost(tau: u32, batch: &[u64], budget: &Budget) -> f64 {
    let total: u64 = batch.iter().sum();
    budget.cost_per_sample * tau as f64 * total as f64 + budget.cost_per_round
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientFeasibility {
    pub client: usize,
    /// `theta - K t_ui`; must be strictly positive.
    pub time_slack: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// `R - K b`; must be strictly positive.
    pub cost_slack: f64,
    pub clients: Vec<ClientFeasibility>,
    pub violations: Vec<String>,
}

impl FeasibilityReport {
    pub fn into_result(self) -> Result<Self> {
        if self.feasible {
            Ok(self)
        } else {
            Err(Error::Infeasible(self.violations.join("; ")))
        }
    }
}

/// Checks `R > K b` and `theta > K t_ui` for every client. Report only.
pub fn feasibility_check(
    budget: &Budget,
    profiles: &[ClientProfile],
    rounds: u64,
) -> FeasibilityReport {
    let k = rounds as f64;
    let cost_slack = budget.cost - k * budget.cost_per_round;
    let mut violations = Vec::new();
    if !(cost_slack > 0.0) {
        violations.push(format!(
            "cost budget {} does not exceed K*b = {}",
            budget.cost,
            k * budget.cost_per_round
        ));
    }
    let clients: Vec<ClientFeasibility> = profiles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let time_slack = budget.time - k * p.upload_time;
            let feasible = time_slack > 0.0;
            if !feasible {
                violations.push(format!(
                    "client {i}: deadline {} does not exceed K*t_u = {}",
                    budget.time,
                    k * p.upload_time
                ));
            }
            ClientFeasibility {
                client: i,
                time_slack,
                feasible,
            }
        })
        .collect();
    if profiles.is_empty() {
        violations.push("no clients".into());
    }
    FeasibilityReport {
        feasible: violations.is_empty(),
        cost_slack,
        clients,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn client(t_u: f64) -> ClientProfile {
        ClientProfile::new(10.0, t_u, 100, 1.0)
    }

    #[test]
    fn deadline_boundary_is_infeasible() {
        let b = Budget::new(100.0, 20.0, 0.001, 1.0);
        let r = feasibility_check(&b, &[client(1.0), client(2.0)], 10);
        assert!(!r.feasible);
        assert!(r.clients[0].feasible);
        assert!(!r.clients[1].feasible);
    }

    #[test]
    fn cost_boundary_is_infeasible() {
        let b = Budget::new(10.0, 1000.0, 0.001, 1.0);
        let r = feasibility_check(&b, &[client(1.0)], 10);
        assert!(!r.feasible);
        assert_eq!(r.cost_slack, 0.0);
    }

    #[test]
    fn generous_budgets_report_slack() {
        let b = Budget::new(1000.0, 1000.0, 0.001, 1.0);
        let r = feasibility_check(&b, &[client(1.0), client(2.0)], 10);
        assert!(r.feasible);
        assert_eq!(r.cost_slack, 990.0);
        assert_eq!(r.clients[1].time_slack, 980.0);
        assert!(r.into_result().is_ok());
    }

    #[test]
    fn round_accounting() {
        let profiles = [
            ClientProfile::new(10.0, 1.0, 50, 1.0),
            ClientProfile::new(10.0, 2.0, 50, 1.0),
        ];
        assert_eq!(round_time(2, &[10, 10], &profiles), 4.0);
        let b = Budget::new(1.0, 1.0, 0.001, 1.0);
        assert!((round_cost(2, &[10, 10], &b) - 1.04).abs() < 1e-12);
        let p = [
            ClientProfile::new(10.0, 1.0, 50, 1.0),
            ClientProfile::new(10.0, 1.0, 50, 1.0),
        ];
        assert_eq!(round_time(2, &[10, 20], &p), 5.0);
    }

    #[test]
    fn caps() {
        let b = Budget::new(1000.0, 100.0, 0.001, 10.0);
        assert_eq!(b.total_batch_cap(10, 2), 45_000);
        let c = ClientProfile::new(10.0, 2.0, 100, 1.0);
        // 10 * (100/20 - 2/2) = 40
        assert_eq!(b.time_cap(&c, 10, 2), 40);
        assert_eq!(c.with_buffer(30).data_cap(), 30);
    }
}
