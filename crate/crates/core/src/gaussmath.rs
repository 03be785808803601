//! Closed-form Gaussian machinery shared by every learner.
//!
//! Everything here is one-dimensional. Probabilities are accumulated in the
//! log domain; linear-domain averages go through [`log_mean_exp`].

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Smallest variance any belief may carry after moment matching.
pub const VARIANCE_FLOOR: f64 = 1e-12;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Belief over a single component mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianBelief {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        let b = GaussianBelief { mean, variance };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.is_finite() || !self.variance.is_finite() {
            return Err(invalid(format!("non-finite belief {self:?}")));
        }
        if self.variance <= 0.0 {
            return Err(invalid(format!("belief variance must be > 0, got {}", self.variance)));
        }
        Ok(())
    }
}

/// Finite mixture of univariate Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureDensity {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl MixtureDensity {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != variances.len() {
            return Err(invalid("mixture needs equal, nonzero numbers of weights, means and variances"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("mixture weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("mixture weights sum to {total}, expected 1")));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(invalid("mixture means must be finite"));
        }
        if variances.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(invalid("mixture variances must be finite and > 0"));
        }
        Ok(MixtureDensity { weights, means, variances })
    }

    pub fn single(mean: f64, variance: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Overall mean and variance of the mixture.
    pub fn moments(&self) -> (f64, f64) {
        let mean: f64 = self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum();
        let var = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(w, (m, v))| w * (v + (m - mean) * (m - mean)))
            .sum();
        (mean, var)
    }
}

/// log N(x; mean, variance)
#[inline]
pub fn normal_log_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + variance.ln() + d * d / variance)
}

/// Max-shifted log-sum-exp. Returns `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// log of the arithmetic mean of `exp(values)`.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NEG_INFINITY;
    }
    log_sum_exp(values) - (values.len() as f64).ln()
}

/// Conjugate update of a Gaussian mean belief against one observation with
/// known noise variance, weighted by `responsibility`.
///
/// For `responsibility < 1` the result is the moment match of the two-branch
/// mixture {updated with prob r, unchanged with prob 1-r}.
pub fn conjugate_update(
    belief: GaussianBelief,
    x: f64,
    noise_variance: f64,
    responsibility: f64,
) -> Result<GaussianBelief> {
    belief.validate()?;
    if !(noise_variance > 0.0) || !noise_variance.is_finite() {
        return Err(invalid(format!("noise variance must be > 0, got {noise_variance}")));
    }
    if !(0.0..=1.0).contains(&responsibility) {
        return Err(invalid(format!("responsibility must lie in [0, 1], got {responsibility}")));
    }
    if !x.is_finite() {
        return Err(invalid("observation must be finite"));
    }
    if responsibility == 0.0 {
        return Ok(belief);
    }

    let post_var = 1.0 / (1.0 / belief.variance + 1.0 / noise_variance);
    let post_mean = post_var * (belief.mean / belief.variance + x / noise_variance);
    if responsibility == 1.0 {
        return Ok(GaussianBelief { mean: post_mean, variance: post_var });
    }

    let r = responsibility;
    let shift = post_mean - belief.mean;
    let mean = belief.mean + r * shift;
    let variance = r * post_var + (1.0 - r) * belief.variance + r * (1.0 - r) * shift * shift;
    Ok(GaussianBelief { mean, variance: variance.max(VARIANCE_FLOOR) })
}

/// KL(p || q) for univariate Gaussians.
pub fn gaussian_kl(p: GaussianBelief, q: GaussianBelief) -> Result<f64> {
    p.validate()?;
    q.validate()?;
    if p == q {
        return Ok(0.0);
    }
    let ratio = p.variance / q.variance;
    let d = p.mean - q.mean;
    let kl = 0.5 * (ratio - 1.0 - ratio.ln() + d * d / q.variance);
    Ok(kl.max(0.0))
}

/// log Σ_j w_j N(x; m_j, v_j)
pub fn mixture_log_pdf(d: &MixtureDensity, x: f64) -> f64 {
    let terms: Vec<f64> = d
        .weights
        .iter()
        .zip(d.means.iter().zip(&d.variances))
        .map(|(w, (m, v))| w.ln() + normal_log_pdf(x, *m, *v))
        .collect();
    log_sum_exp(&terms)
}

/// Draw a component index according to `weights` (assumed normalized).
pub(crate) fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return j;
        }
    }
    // rounding in the cumulative sum; fall back to the last positive weight
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(weights.len() - 1)
}

/// n independent draws from the mixture.
pub fn sample_mixture<R: Rng + ?Sized>(d: &MixtureDensity, n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let j = sample_index(&d.weights, rng);
            let z: f64 = rng.sample(StandardNormal);
            d.means[j] + d.variances[j].sqrt() * z
        })
        .collect()
}
