//! Monte-Carlo dropout prediction and the uncertainty statistics computed
//! from its samples.
//!
//! `mc_predict` runs the network `T` times with dropout active. The mean of
//! those passes is the prediction; their per-element spread gives the
//! unbiased variance, normal-approximation confidence intervals and a
//! Gaussian differential entropy, which serves as the regression analogue
//! of predictive entropy.

use std::f64::consts::{E, PI};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{DropoutMode, NeuralNet, Tensor};
use crate::seed;

/// Added to every per-element variance before taking its logarithm.
pub const ENTROPY_VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub num_passes: usize,
    pub base_seed: u64,
    pub alpha: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { num_passes: 32, base_seed: 0, alpha: 0.05 }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_passes >= 1, InvalidParameter, "need at least one Monte-Carlo pass");
        ensure!(self.alpha > 0.0 && self.alpha < 1.0, InvalidParameter, "alpha {} outside (0, 1)", self.alpha);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McPrediction {
    pub samples: Vec<Tensor>,
    pub mean: Tensor,
    /// Unbiased per-element variance; all zeros when `T = 1`.
    pub variance: Tensor,
    /// False when only one pass was run and the variance is undefined.
    pub variance_defined: bool,
}

impl McPrediction {
    pub fn num_passes(&self) -> usize {
        self.samples.len()
    }
}

/// `T` stochastic forward passes; pass `i` draws its masks from
/// `derive(base_seed, i)`.
pub fn mc_predict(net: &NeuralNet, input: &Tensor, cfg: &McConfig) -> Result<McPrediction> {
    cfg.validate()?;
    let samples = (0..cfg.num_passes)
        .into_par_iter()
        .map(|i| net.forward(input, DropoutMode::Active { seed: seed::derive(cfg.base_seed, i as u64) }))
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce_samples(samples))
}

/// Elementwise mean and unbiased variance of equally shaped samples, using
/// Welford's recurrence so identical samples give exactly zero variance.
pub fn reduce_samples(samples: Vec<Tensor>) -> McPrediction {
    let t = samples.len();
    let shape = samples[0].shape;
    let mut mean = vec![0.0; shape.len()];
    let mut m2 = vec![0.0; shape.len()];
    for (k, s) in samples.iter().enumerate() {
        let k = (k + 1) as f64;
        for ((m, acc), &v) in mean.iter_mut().zip(&mut m2).zip(&s.data) {
            let delta = v - *m;
            *m += delta / k;
            *acc += delta * (v - *m);
        }
    }
    let variance = if t >= 2 { m2.iter().map(|v| v / (t - 1) as f64).collect() } else { vec![0.0; shape.len()] };
    McPrediction {
        samples,
        mean: Tensor { shape, data: mean },
        variance: Tensor { shape, data: variance },
        variance_defined: t >= 2,
    }
}

/// `sum (y_i - mean)^2 / (T - 1)`.
pub fn sample_variance(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: values.len() });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
}

/// Inverse of the standard normal CDF (Acklam's rational approximation,
/// relative error below 1.15e-9 on (0, 1)).
pub fn inverse_normal_cdf(p: f64) -> Result<f64> {
    ensure!(p > 0.0 && p < 1.0, InvalidParameter, "probability {p} outside (0, 1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00, 3.754408661907416e+00];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };
    Ok(x)
}

/// Two-sided critical value `z_{alpha/2}`.
pub fn critical_z(alpha: f64) -> Result<f64> {
    ensure!(alpha > 0.0 && alpha < 1.0, InvalidParameter, "alpha {alpha} outside (0, 1)");
    inverse_normal_cdf(1.0 - alpha / 2.0)
}

/// `mean +- z_{alpha/2} S / sqrt(T)`.
pub fn confidence_interval(values: &[f64], alpha: f64) -> Result<(f64, f64)> {
    let z = critical_z(alpha)?;
    let s2 = sample_variance(values)?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let half = z * s2.sqrt() / n.sqrt();
    Ok((mean - half, mean + half))
}

/// Natural-log Shannon entropy, with `0 log 0 = 0`.
pub fn predictive_entropy(probs: &[f64]) -> Result<f64> {
    ensure!(!probs.is_empty(), InvalidDistribution, "empty distribution");
    if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidDistribution("probabilities must be finite and non-negative".into()));
    }
    let total: f64 = probs.iter().sum();
    ensure!((total - 1.0).abs() <= 1e-9, InvalidDistribution, "probabilities sum to {total}");
    Ok(-probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

/// `0.5 ln(2 pi e (variance + floor))`.
pub fn gaussian_entropy(variance: f64) -> f64 {
    0.5 * (2.0 * PI * E * (variance + ENTROPY_VARIANCE_FLOOR)).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySummary {
    pub scalar_variance: f64,
    pub scalar_entropy: f64,
    pub ci_halfwidth: Tensor,
}

pub fn summarize(pred: &McPrediction, alpha: f64) -> Result<UncertaintySummary> {
    let t = pred.num_passes();
    if t < 2 || !pred.variance_defined {
        return Err(Error::InsufficientSamples { needed: 2, got: t });
    }
    let z = critical_z(alpha)?;
    let var = &pred.variance.data;
    let n = var.len() as f64;
    let scalar_variance = var.iter().sum::<f64>() / n;
    let scalar_entropy = var.iter().map(|&v| gaussian_entropy(v)).sum::<f64>() / n;
    let ci_halfwidth = Tensor {
        shape: pred.variance.shape,
        data: var.iter().map(|v| z * v.sqrt() / (t as f64).sqrt()).collect(),
    };
    Ok(UncertaintySummary { scalar_variance, scalar_entropy, ci_halfwidth })
}
