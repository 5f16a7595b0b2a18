//! Edge estimation and the sequential stopping rule.
//!
//! The scanner feeds each example's relative weight `w` and, for every
//! candidate rule `h`, the product `w * y * h(x)` into an [`EdgeEstimator`].
//! A candidate is certified once its running correlation `m[h]` exceeds
//! `2 * gamma * W` by more than the martingale confidence radius
//! `C * sqrt(V * (log log(V / M) + log(1 / delta)))`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::f64::consts::E;

use crate::error::{Error, Result};

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Running sums `W = sum |w|`, `V = sum w^2` and `m[h] = sum w y h(x)`.
#[derive(Clone, Debug)]
pub struct EdgeEstimator {
    abs_weight: CompensatedSum,
    sq_weight: CompensatedSum,
    correlation: Vec<CompensatedSum>,
    count: u64,
}

impl EdgeEstimator {
    pub fn new(candidates: usize) -> Self {
        EdgeEstimator {
            abs_weight: CompensatedSum::default(),
            sq_weight: CompensatedSum::default(),
            correlation: vec![CompensatedSum::default(); candidates],
            count: 0,
        }
    }

    /// Records one example's weight; correlations are added separately.
    #[inline]
    pub fn observe(&mut self, w: f64) {
        self.abs_weight.add(w.abs());
        self.sq_weight.add(w * w);
        self.count += 1;
    }

    #[inline]
    pub fn accumulate(&mut self, candidate: usize, w_y_h: f64) {
        self.correlation[candidate].add(w_y_h);
    }

    pub fn sum_abs_weight(&self) -> f64 {
        self.abs_weight.value()
    }

    pub fn sum_sq_weight(&self) -> f64 {
        self.sq_weight.value()
    }

    pub fn correlation(&self, candidate: usize) -> f64 {
        self.correlation[candidate].value()
    }

    pub fn candidates(&self) -> usize {
        self.correlation.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Effective sample size of the weights observed so far.
    pub fn effective_size(&self) -> f64 {
        let v = self.sum_sq_weight();
        if v > 0.0 {
            let w = self.sum_abs_weight();
            w * w / v
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StoppingConfig {
    c: f64,
    delta: f64,
}

impl StoppingConfig {
    pub fn new(c: f64, delta: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::domain(format!("stopping constant must be positive, got {c}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::domain(format!("delta must lie in (0, 1), got {delta}")));
        }
        Ok(StoppingConfig { c, delta })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Splits the failure probability evenly across `candidates` tests.
    pub fn per_candidate(&self, candidates: usize) -> Self {
        StoppingConfig {
            c: self.c,
            delta: self.delta / candidates.max(1) as f64,
        }
    }
}

impl Default for StoppingConfig {
    fn default() -> Self {
        StoppingConfig { c: 1.0, delta: 0.05 }
    }
}

/// `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    let mut sum = CompensatedSum::default();
    let mut sum_sq = CompensatedSum::default();
    for &w in weights {
        if !(w >= 0.0) {
            return Err(Error::domain(format!("weights must be non-negative, got {w}")));
        }
        sum.add(w);
        sum_sq.add(w * w);
    }
    let v = sum_sq.value();
    if !(v > 0.0) {
        return Err(Error::domain("effective sample size needs a positive weight"));
    }
    let s = sum.value();
    Ok(s * s / v)
}

pub fn z_score(edge_sum: f64, sum_sq_weights: f64) -> Result<f64> {
    if !(sum_sq_weights > 0.0) {
        return Err(Error::domain(format!(
            "sum of squared weights must be positive, got {sum_sq_weights}"
        )));
    }
    Ok(edge_sum / sum_sq_weights.sqrt())
}

/// True when `|m - 2 gamma W|` exceeds the confidence radius. Degenerate
/// inputs (`M = 0` or `V = 0`) never fire.
pub fn stopping_rule(w: f64, v: f64, m: f64, gamma: f64, cfg: &StoppingConfig) -> bool {
    let dev = (m - 2.0 * gamma * w).abs();
    if !(dev > 0.0) || !(v > 0.0) {
        return false;
    }
    let log_inv_delta = (1.0 / cfg.delta).ln();
    // log log term is non-negative, so this is a necessary condition
    let c2 = cfg.c * cfg.c;
    if dev * dev <= c2 * v * log_inv_delta {
        return false;
    }
    let log_log = (v / dev).max(E).ln().ln().max(0.0);
    dev > cfg.c * (v * (log_log + log_inv_delta)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Certificate {
    /// Position of the certified rule in the candidate list.
    pub candidate: usize,
    pub gamma: f64,
}

/// First candidate, in list order, whose positive-direction deviation passes
/// the stopping rule.
pub fn certify_fire(estimator: &EdgeEstimator, gamma: f64, cfg: &StoppingConfig) -> Option<Certificate> {
    let w = estimator.sum_abs_weight();
    let v = estimator.sum_sq_weight();
    let target = 2.0 * gamma * w;
    (0..estimator.candidates())
        .find(|&i| {
            let m = estimator.correlation(i);
            m - target > 0.0 && stopping_rule(w, v, m, gamma, cfg)
        })
        .map(|candidate| Certificate { candidate, gamma })
}
