//! Trainable models: per-sample loss and gradient, mini-batch SGD steps and
//! data-weighted model averaging.
//!
//! Models are flat parameter vectors. The bias is not special-cased: data
//! generators append a constant `1.0` feature instead. Multi-class models
//! stack one block of `dim` weights per class (one-vs-rest for the squared
//! SVM, softmax for logistic regression); binary models use a single block.

use std::borrow::Borrow;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled feature vector.
///
/// Labels are class indices `0..C`. Binary models read any positive label
/// as the positive class and everything else (including `-1`) as negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSample {
    pub features: Vec<f64>,
    pub label: i32,
}

impl DataSample {
    pub fn new(features: Vec<f64>, label: i32) -> Self {
        Self { features, label }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

/// Dense model parameters shared by clients and the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVector(pub Vec<f64>);

impl ModelVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn distance(&self, other: &ModelVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl Deref for ModelVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ModelVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ModelVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// A differentiable per-sample loss over flat parameter vectors.
pub trait Loss {
    fn loss(&self, w: &[f64], x: &DataSample) -> Result<f64>;

    /// Adds `scale * grad f(w, x)` into `out`.
    fn accumulate_gradient(
        &self,
        w: &[f64],
        x: &DataSample,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()>;

    fn gradient(&self, w: &[f64], x: &DataSample) -> Result<Vec<f64>> {
        let mut g = vec![0.0; w.len()];
        self.accumulate_gradient(w, x, 1.0, &mut g)?;
        Ok(g)
    }
}

/// `beta0/2 * ||w - x||^2`: each sample's features are the center.
///
/// Not a classifier. Its smoothness and PL constants are both exactly
/// `beta0` when all samples share one center, which makes it a calibration
/// target for the online estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticLoss {
    pub curvature: f64,
}

impl Loss for QuadraticLoss {
    fn loss(&self, w: &[f64], x: &DataSample) -> Result<f64> {
        if w.len() != x.dim() {
            return Err(Error::DimensionMismatch {
                expected: x.dim(),
                got: w.len(),
            });
        }
        let sq: f64 = w
            .iter()
            .zip(&x.features)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(0.5 * self.curvature * sq)
    }

    fn accumulate_gradient(
        &self,
        w: &[f64],
        x: &DataSample,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        if w.len() != x.dim() || out.len() != w.len() {
            return Err(Error::DimensionMismatch {
                expected: x.dim(),
                got: w.len(),
            });
        }
        for ((o, wi), xi) in out.iter_mut().zip(w).zip(&x.features) {
            *o += scale * self.curvature * (wi - xi);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SquaredSvm,
    Logistic,
}

/// Loss family plus its L2 regularizer and the number of classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub kind: LossKind,
    pub lambda: f64,
    pub classes: usize,
}

impl LossModel {
    pub fn new(kind: LossKind, lambda: f64, classes: usize) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "regularizer must be a finite nonnegative number, got {lambda}"
            )));
        }
        if classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least two classes, got {classes}"
            )));
        }
        Ok(Self {
            kind,
            lambda,
            classes,
        })
    }

    pub fn squared_svm(lambda: f64) -> Self {
        Self {
            kind: LossKind::SquaredSvm,
            lambda,
            classes: 2,
        }
    }

    pub fn logistic(lambda: f64) -> Self {
        Self {
            kind: LossKind::Logistic,
            lambda,
            classes: 2,
        }
    }

    /// Number of weight blocks: one for binary problems, one per class otherwise.
    pub fn blocks(&self) -> usize {
        if self.classes == 2 {
            1
        } else {
            self.classes
        }
    }

    /// Parameter count for features of dimension `dim`.
    pub fn param_len(&self, dim: usize) -> usize {
        self.blocks() * dim
    }

    pub fn init(&self, dim: usize) -> ModelVector {
        ModelVector::zeros(self.param_len(dim))
    }

    fn check(&self, w: &[f64], x: &DataSample) -> Result<()> {
        let expected = self.param_len(x.dim());
        if w.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: w.len(),
            });
        }
        if self.classes > 2 && (x.label < 0 || x.label as usize >= self.classes) {
            return Err(Error::InvalidArgument(format!(
                "label {} outside 0..{}",
                x.label, self.classes
            )));
        }
        Ok(())
    }

    fn regularizer(&self, w: &[f64]) -> f64 {
        0.5 * self.lambda * w.iter().map(|v| v * v).sum::<f64>()
    }

    /// Raw scores, one per block.
    pub fn scores(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..self.blocks())
            .map(|c| dot(&w[c * d..(c + 1) * d], x))
            .collect()
    }

    /// Predicted class index. Binary ties go to the positive class, multi-class
    /// ties to the lowest index.
    pub fn predict(&self, w: &[f64], x: &[f64]) -> i32 {
        let scores = self.scores(w, x);
        if self.blocks() == 1 {
            return if scores[0] >= 0.0 { 1 } else { 0 };
        }
        let mut best = 0;
        for (c, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = c;
            }
        }
        best as i32
    }

    /// Whether a prediction matches the sample's label under this model's label convention.
    pub fn is_correct(&self, w: &[f64], x: &DataSample) -> bool {
        let pred = self.predict(w, &x.features);
        if self.blocks() == 1 {
            (pred > 0) == (x.label > 0)
        } else {
            pred == x.label
        }
    }
}

impl Loss for LossModel {
    fn loss(&self, w: &[f64], x: &DataSample) -> Result<f64> {
        self.check(w, x)?;
        let scores = self.scores(w, &x.features);
        let data_term = match (self.kind, self.blocks()) {
            (LossKind::SquaredSvm, 1) => {
                let y = binary_sign(x.label);
                let m = (1.0 - y * scores[0]).max(0.0);
                0.5 * m * m
            }
            (LossKind::SquaredSvm, _) => scores
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    let y = if c as i32 == x.label { 1.0 } else { -1.0 };
                    let m = (1.0 - y * s).max(0.0);
                    0.5 * m * m
                })
                .sum(),
            (LossKind::Logistic, 1) => {
                let z = scores[0];
                let y = if x.label > 0 { 1.0 } else { 0.0 };
                softplus(z) - y * z
            }
            (LossKind::Logistic, _) => log_sum_exp(&scores) - scores[x.label as usize],
        };
        Ok(self.regularizer(w) + data_term)
    }

    fn accumulate_gradient(
        &self,
        w: &[f64],
        x: &DataSample,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.check(w, x)?;
        if out.len() != w.len() {
            return Err(Error::DimensionMismatch {
                expected: w.len(),
                got: out.len(),
            });
        }
        let d = x.dim();
        for (o, wi) in out.iter_mut().zip(w) {
            *o += scale * self.lambda * wi;
        }
        let scores = self.scores(w, &x.features);
        // Per-block coefficient multiplying x in the data-term gradient.
        let coeffs: Vec<f64> = match (self.kind, self.blocks()) {
            (LossKind::SquaredSvm, 1) => {
                let y = binary_sign(x.label);
                vec![-y * (1.0 - y * scores[0]).max(0.0)]
            }
            (LossKind::SquaredSvm, _) => scores
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    let y = if c as i32 == x.label { 1.0 } else { -1.0 };
                    -y * (1.0 - y * s).max(0.0)
                })
                .collect(),
            (LossKind::Logistic, 1) => {
                let y = if x.label > 0 { 1.0 } else { 0.0 };
                vec![sigmoid(scores[0]) - y]
            }
            (LossKind::Logistic, _) => {
                let lse = log_sum_exp(&scores);
                scores
                    .iter()
                    .enumerate()
                    .map(|(c, s)| {
                        let p = (s - lse).exp();
                        if c as i32 == x.label {
                            p - 1.0
                        } else {
                            p
                        }
                    })
                    .collect()
            }
        };
        for (c, coef) in coeffs.iter().enumerate() {
            if *coef == 0.0 {
                continue;
            }
            let block = &mut out[c * d..(c + 1) * d];
            for (o, xi) in block.iter_mut().zip(&x.features) {
                *o += scale * coef * xi;
            }
        }
        Ok(())
    }
}

fn binary_sign(label: i32) -> f64 {
    if label > 0 {
        1.0
    } else {
        -1.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

/// Loss of one sample, `f(w, x)`.
pub fn sample_loss<L: Loss + ?Sized>(w: &ModelVector, x: &DataSample, m: &L) -> Result<f64> {
    m.loss(w, x)
}

/// Analytic gradient of [`sample_loss`].
pub fn sample_gradient<L: Loss + ?Sized>(
    w: &ModelVector,
    x: &DataSample,
    m: &L,
) -> Result<Vec<f64>> {
    m.gradient(w, x)
}

/// Mean sample loss over a mini-batch.
pub fn batch_loss<L: Loss + ?Sized, S: Borrow<DataSample>>(
    w: &ModelVector,
    batch: &[S],
    m: &L,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for x in batch {
        total += m.loss(w, x.borrow())?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean sample gradient over a mini-batch.
pub fn batch_gradient<L: Loss + ?Sized, S: Borrow<DataSample>>(
    w: &ModelVector,
    batch: &[S],
    m: &L,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut g = vec![0.0; w.len()];
    let scale = 1.0 / batch.len() as f64;
    for x in batch {
        m.accumulate_gradient(w, x.borrow(), scale, &mut g)?;
    }
    Ok(g)
}

/// One SGD step: `w - eta * mean gradient`.
pub fn local_update<L: Loss + ?Sized, S: Borrow<DataSample>>(
    w: &ModelVector,
    batch: &[S],
    eta: f64,
    m: &L,
) -> Result<ModelVector> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and nonnegative, got {eta}"
        )));
    }
    let g = batch_gradient(w, batch, m)?;
    let next: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - eta * gi).collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "update produced a non-finite weight; learning rate too large".into(),
        ));
    }
    Ok(ModelVector(next))
}

/// Data-weighted average `sum_i D_i w_i / sum_i D_i`, summed in client order.
pub fn aggregate(models: &[ModelVector], weights: &[f64]) -> Result<ModelVector> {
    if models.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("no models to aggregate".into()))?;
    if let Some(bad) = weights.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "aggregation weights must be positive, got {bad}"
        )));
    }
    let len = first.len();
    let mut acc = vec![0.0; len];
    let mut total = 0.0;
    for (w, d) in models.iter().zip(weights) {
        if w.len() != len {
            return Err(Error::DimensionMismatch {
                expected: len,
                got: w.len(),
            });
        }
        for (a, v) in acc.iter_mut().zip(w.iter()) {
            *a += d * v;
        }
        total += d;
    }
    for a in acc.iter_mut() {
        *a /= total;
    }
    Ok(ModelVector(acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn svm(lambda: f64) -> LossModel {
        LossModel::squared_svm(lambda)
    }

    #[test]
    fn zero_weights_give_half() {
        let x = DataSample::new(vec![0.3, -2.0, 1.0], 1);
        let l = sample_loss(&ModelVector::zeros(3), &x, &svm(0.1)).unwrap();
        assert_eq!(l, 0.5);
    }

    #[test]
    fn margin_boundary_has_zero_loss() {
        let w = ModelVector(vec![0.5, 0.0]);
        let x = DataSample::new(vec![2.0, 7.0], 1);
        assert_eq!(sample_loss(&w, &x, &svm(0.0)).unwrap(), 0.0);
    }

    #[test]
    fn hand_evaluated_loss() {
        let w = ModelVector(vec![1.0, 0.0]);
        let x = DataSample::new(vec![2.0, 0.0], -1);
        let l = sample_loss(&w, &x, &svm(0.1)).unwrap();
        assert!((l - 4.55).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let w = ModelVector(vec![1.0, 0.0, 0.0]);
        let x = DataSample::new(vec![2.0, 0.0], 1);
        let err = sample_loss(&w, &x, &svm(0.1)).unwrap_err();
        assert_eq!(err.kind(), crate::ErrorKind::Config);
    }

    #[test]
    fn gradient_examples() {
        let g = sample_gradient(
            &ModelVector::zeros(2),
            &DataSample::new(vec![1.0, 0.0], 1),
            &svm(0.0),
        )
        .unwrap();
        assert_eq!(g, vec![-1.0, 0.0]);
        let g = sample_gradient(
            &ModelVector(vec![2.0, 1.0]),
            &DataSample::new(vec![1.0, 0.0], 1),
            &svm(0.0),
        )
        .unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    fn finite_difference(w: &[f64], x: &DataSample, m: &LossModel) -> Vec<f64> {
        let h = 1e-6;
        (0..w.len())
            .map(|j| {
                let mut plus = w.to_vec();
                let mut minus = w.to_vec();
                plus[j] += h;
                minus[j] -= h;
                (m.loss(&plus, x).unwrap() - m.loss(&minus, x).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let models = [
            LossModel::squared_svm(0.1),
            LossModel::new(LossKind::SquaredSvm, 0.05, 4).unwrap(),
            LossModel::logistic(0.1),
            LossModel::new(LossKind::Logistic, 0.01, 3).unwrap(),
        ];
        for m in &models {
            for _ in 0..100 {
                let d = 5;
                let x = DataSample::new(
                    (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    rng.gen_range(0..m.classes as i32),
                );
                let w: Vec<f64> = (0..m.param_len(d))
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect();
                let analytic = m.gradient(&w, &x).unwrap();
                let numeric = finite_difference(&w, &x, m);
                let num: f64 = analytic
                    .iter()
                    .zip(&numeric)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let den = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
                assert!(num / den <= 1e-5, "{:?}: rel err {}", m.kind, num / den);
            }
        }
    }

    #[test]
    fn batch_loss_is_mean() {
        let m = svm(0.0);
        let w = ModelVector::zeros(1);
        // hinge terms 0.5*(1-0)^2 = 0.5 for both; use weights to vary
        let w2 = ModelVector(vec![0.5]);
        let a = DataSample::new(vec![1.0], 1);
        let b = DataSample::new(vec![1.0], -1);
        let la = sample_loss(&w2, &a, &m).unwrap();
        let lb = sample_loss(&w2, &b, &m).unwrap();
        let mean = batch_loss(&w2, &[a.clone(), b], &m).unwrap();
        assert!((mean - 0.5 * (la + lb)).abs() < 1e-15);
        assert_eq!(
            batch_loss(&w, &[a.clone()], &m).unwrap(),
            sample_loss(&w, &a, &m).unwrap()
        );
        let empty: [DataSample; 0] = [];
        assert!(matches!(batch_loss(&w, &empty, &m), Err(Error::EmptyBatch)));
    }

    #[test]
    fn update_steps() {
        let m = svm(0.0);
        let w = ModelVector(vec![3.0, 0.0]);
        let x = DataSample::new(vec![1.0, 0.0], 1);
        assert_eq!(local_update(&w, &[x.clone()], 0.1, &m).unwrap(), w);
        let w0 = ModelVector(vec![0.2, -0.7]);
        assert_eq!(local_update(&w0, &[x], 0.0, &m).unwrap(), w0);
    }

    #[test]
    fn aggregation_examples() {
        let a = aggregate(
            &[ModelVector(vec![2.0]), ModelVector(vec![4.0])],
            &[1.0, 1.0],
        )
        .unwrap();
        assert_eq!(a.0, vec![3.0]);
        let a = aggregate(
            &[ModelVector(vec![0.0]), ModelVector(vec![4.0])],
            &[1.0, 3.0],
        )
        .unwrap();
        assert_eq!(a.0, vec![3.0]);
        let same = ModelVector(vec![0.25, -1.5]);
        let a = aggregate(
            &[same.clone(), same.clone(), same.clone()],
            &[1.0, 2.0, 3.0],
        )
        .unwrap();
        assert!(a.distance(&same) < 1e-15);
        assert!(aggregate(&[same.clone()], &[1.0, 2.0]).is_err());
        assert!(aggregate(&[same.clone()], &[0.0]).is_err());
    }

    #[test]
    fn predictions_follow_tie_conventions() {
        let m = svm(0.0);
        assert_eq!(m.predict(&[0.0, 0.0], &[1.0, 1.0]), 1);
        let m4 = LossModel::new(LossKind::SquaredSvm, 0.0, 4).unwrap();
        assert_eq!(m4.predict(&[0.0; 8], &[1.0, 1.0]), 0);
    }
}
