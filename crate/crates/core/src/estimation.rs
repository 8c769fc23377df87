//! Online estimates of the bound constants and system parameters.

use std::borrow::Borrow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Buffer;
use crate::error::{Error, Result};
use crate::model::{batch_gradient, batch_loss, dot, DataSample, Loss, ModelVector};

/// Denominators below this are treated as zero.
pub const DEGENERATE: f64 = 1e-12;

/// Subsample size for the gradient-variance estimate.
pub const VARIANCE_SUBSAMPLE: usize = 512;

/// Default loss-increase threshold for refreshing `M_i`.
pub const DEFAULT_REFRESH_EPSILON: f64 = 0.05;

/// Per-client curvature estimates `(c_i, rho_i, beta_i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureEstimate {
    pub c: f64,
    pub rho: f64,
    pub beta: f64,
    /// Some value was carried over from the previous estimate.
    pub fallback: bool,
}

impl CurvatureEstimate {
    pub fn new(c: f64, rho: f64, beta: f64) -> Self {
        Self {
            c,
            rho,
            beta,
            fallback: false,
        }
    }
}

/// Everything one client reports to the server after a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEstimates {
    pub curvature: CurvatureEstimate,
    /// `M_i`.
    pub variance: f64,
    /// Smoothed `p_i`, samples per second.
    pub speed: f64,
    pub batch_loss_at_global: f64,
    pub gradient_at_global: Vec<f64>,
}

/// Server-side aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalEstimates {
    pub rho: f64,
    pub beta: f64,
    pub c: f64,
    pub delta: f64,
    pub client_delta: Vec<f64>,
    pub remaining_time: f64,
    pub remaining_cost: f64,
    pub upload_times: Vec<f64>,
}

/// Estimates `c_i`, `rho_i` and `beta_i` from one batch evaluated at the
/// round-start global model and the client's last local model.
///
/// Degenerate denominators keep the corresponding value from `previous`.
pub fn estimate_client_params<L: Loss + ?Sized, S: Borrow<DataSample>>(
    w_global: &ModelVector,
    w_local: &ModelVector,
    batch: &[S],
    m: &L,
    previous: CurvatureEstimate,
) -> Result<CurvatureEstimate> {
    if w_global.len() != w_local.len() {
        return Err(Error::DimensionMismatch {
            expected: w_global.len(),
            got: w_local.len(),
        });
    }
    let f_global = batch_loss(w_global, batch, m)?;
    let g_global = batch_gradient(w_global, batch, m)?;
    let mut out = CurvatureEstimate {
        fallback: false,
        ..previous
    };

    let grad_sq = dot(&g_global, &g_global);
    let c = grad_sq / (2.0 * f_global);
    if f_global < DEGENERATE || !c.is_finite() {
        out.fallback = true;
    } else {
        out.c = c;
    }

    let step_sq = w_local.distance(w_global).powi(2);
    if step_sq.sqrt() < DEGENERATE {
        out.fallback = true;
        return Ok(out);
    }
    let f_local = batch_loss(w_local, batch, m)?;
    let g_local = batch_gradient(w_local, batch, m)?;
    let rho = (f_local - f_global).abs() / step_sq;
    let grad_diff: f64 = g_local
        .iter()
        .zip(g_global.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let beta = grad_diff / step_sq.sqrt();
    if rho.is_finite() && beta.is_finite() {
        out.rho = rho;
        out.beta = beta;
    } else {
        out.fallback = true;
    }
    Ok(out)
}

/// Mean squared deviation of per-sample gradients from their mean.
/// Zero for fewer than two samples.
pub fn gradient_variance<L: Loss + ?Sized, S: Borrow<DataSample>>(
    w: &ModelVector,
    samples: &[S],
    m: &L,
) -> Result<f64> {
    if samples.len() < 2 {
        return Ok(0.0);
    }
    let grads = samples
        .iter()
        .map(|x| crate::model::sample_gradient(w, x.borrow(), m))
        .collect::<Result<Vec<_>>>()?;
    let n = grads.len() as f64;
    let mut mean = vec![0.0; w.len()];
    for g in &grads {
        for (acc, v) in mean.iter_mut().zip(g.iter()) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n;
    }
    let total: f64 = grads
        .iter()
        .map(|g| {
            g.iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    Ok(total / n)
}

/// `M_i` over at most [`VARIANCE_SUBSAMPLE`] uniformly drawn buffer items.
pub fn estimate_m<L: Loss + ?Sized, R: Rng>(
    buffer: &Buffer<DataSample>,
    w: &ModelVector,
    m: &L,
    rng: &mut R,
) -> Result<f64> {
    let batch = buffer.sample_batch(VARIANCE_SUBSAMPLE, rng)?;
    gradient_variance(w, &batch.items, m)
}

fn check_weights(weights: &[f64], n: usize) -> Result<f64> {
    if weights.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {n} clients",
            weights.len()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no client reports".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "weight {w} is not positive"
        )));
    }
    Ok(weights.iter().sum())
}

/// Per-client divergence `||g_i - g||` and its data-weighted mean.
pub fn estimate_divergence(gradients: &[Vec<f64>], weights: &[f64]) -> Result<(Vec<f64>, f64)> {
    let total = check_weights(weights, gradients.len())?;
    let dim = gradients[0].len();
    if let Some(g) = gradients.iter().find(|g| g.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: g.len(),
        });
    }
    // Offsets from the first client keep identical inputs exactly identical.
    let anchor = &gradients[0];
    let mut shift = vec![0.0; dim];
    for (g, w) in gradients.iter().zip(weights) {
        for ((acc, v), a) in shift.iter_mut().zip(g).zip(anchor) {
            *acc += w * (v - a);
        }
    }
    let mean: Vec<f64> = anchor
        .iter()
        .zip(&shift)
        .map(|(a, s)| a + s / total)
        .collect();
    let per_client: Vec<f64> = gradients
        .iter()
        .map(|g| {
            g.iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let delta = per_client
        .iter()
        .zip(weights)
        .map(|(d, w)| d * w)
        .sum::<f64>()
        / total;
    Ok((per_client, delta))
}

/// Data-weighted `(rho, beta, c)` with `c` clamped into `(0, min(beta, 2 rho)]`.
pub fn aggregate_global_params(
    estimates: &[CurvatureEstimate],
    weights: &[f64],
) -> Result<CurvatureEstimate> {
    let total = check_weights(weights, estimates.len())?;
    let mean = |f: fn(&CurvatureEstimate) -> f64| {
        estimates
            .iter()
            .zip(weights)
            .map(|(e, w)| f(e) * w)
            .sum::<f64>()
            / total
    };
    let rho = mean(|e| e.rho).max(DEGENERATE);
    let beta = mean(|e| e.beta).max(DEGENERATE);
    let upper = beta.min(2.0 * rho);
    let raw_c = mean(|e| e.c);
    let c = if raw_c > 0.0 {
        raw_c.min(upper)
    } else {
        upper * DEGENERATE
    };
    Ok(CurvatureEstimate {
        c,
        rho,
        beta,
        fallback: estimates.iter().any(|e| e.fallback),
    })
}

/// Data-weighted batch loss at the round-start global model.
pub fn estimate_fhat(losses: &[f64], weights: &[f64]) -> Result<f64> {
    let total = check_weights(weights, losses.len())?;
    let anchor = losses[0];
    Ok(anchor
        + losses
            .iter()
            .zip(weights)
            .map(|(l, w)| (l - anchor) * w)
            .sum::<f64>()
            / total)
}

/// Whether the batch loss rose by strictly more than `epsilon`.
pub fn refresh_m_policy(current: f64, previous: f64, epsilon: f64) -> bool {
    current - previous > epsilon
}

/// Remaining time and cost budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetTracker {
    pub time: f64,
    pub cost: f64,
    pub spent_time: f64,
    pub spent_cost: f64,
}

impl BudgetTracker {
    pub fn new(time: f64, cost: f64) -> Self {
        Self {
            time,
            cost,
            spent_time: 0.0,
            spent_cost: 0.0,
        }
    }

    pub fn record(&mut self, round_time: f64, round_cost: f64) {
        self.spent_time += round_time;
        self.spent_cost += round_cost;
    }

    /// `theta_c`.
    pub fn remaining_time(&self) -> f64 {
        self.time - self.spent_time
    }

    /// `R_c`.
    pub fn remaining_cost(&self) -> f64 {
        self.cost - self.spent_cost
    }
}

/// Exponential moving average; the first observation initializes it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    pub value: Option<f64>,
    pub factor: f64,
}

impl Ema {
    pub fn new(factor: f64) -> Self {
        Self {
            value: None,
            factor,
        }
    }

    pub fn with_initial(factor: f64, initial: f64) -> Self {
        Self {
            value: Some(initial),
            factor,
        }
    }

    pub fn update(&mut self, x: f64) -> f64 {
        let v = match self.value {
            Some(prev) => self.factor * x + (1.0 - self.factor) * prev,
            None => x,
        };
        self.value = Some(v);
        v
    }
}
