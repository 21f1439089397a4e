//! Bernoulli-Gaussian amplitude prior.
//!
//! Each candidate amplitude is zero with probability `1 - pi_n` and
//! `CN(mu0, tau0)` otherwise. Given a pseudo-measurement `r = x + v`,
//! `v ~ CN(0, sigma2)`, the posterior is again spike-and-slab; its
//! activation probability drives the model-order estimate.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, VAR_MIN};

/// Activation probabilities are kept in `[PI_MIN, 1 - PI_MIN]`.
pub const PI_MIN: f64 = 5e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BgPrior {
    pub pi: Vec<f64>,
    pub mu0: Complex64,
    pub tau0: f64,
}

impl BgPrior {
    pub fn new(pi: Vec<f64>, mu0: Complex64, tau0: f64) -> Result<Self> {
        if !(tau0.is_finite() && tau0 > 0.0) {
            return Err(Error::input(format!("tau0 must be positive, got {tau0}")));
        }
        if pi.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::input("activation probabilities must lie in [0, 1]"));
        }
        Ok(BgPrior { pi, mu0, tau0 })
    }

    pub fn uniform(n: usize, pi: f64, mu0: Complex64, tau0: f64) -> Result<Self> {
        BgPrior::new(vec![pi; n], mu0, tau0)
    }
}

/// Posterior of one amplitude under the spike-and-slab prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BgPosterior {
    /// Posterior activation probability.
    pub lambda: f64,
    /// Mean of the active (slab) component.
    pub m: Complex64,
    /// Variance of the active component.
    pub v: f64,
    /// Marginal posterior mean `lambda * m`.
    pub mhat: Complex64,
    /// Marginal posterior variance.
    pub vhat: f64,
}

/// Posterior of `x_n` given `r = x_n + CN(0, sigma2)` and the prior.
pub fn bg_posterior(r: Complex64, sigma2: f64, prior: &BgPrior, n: usize) -> Result<BgPosterior> {
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::input(format!(
            "pseudo-noise variance must be positive, got {sigma2}"
        )));
    }
    if !(r.re.is_finite() && r.im.is_finite()) {
        return Err(Error::input("pseudo-measurement must be finite"));
    }
    let pi = *prior
        .pi
        .get(n)
        .ok_or_else(|| Error::input(format!("component {n} outside prior of length {}", prior.pi.len())))?;
    let tau0 = prior.tau0;
    let total = sigma2 + tau0;
    let m = (r * tau0 + prior.mu0 * sigma2) / total;
    let v = tau0 * sigma2 / total;
    let log_ratio = (sigma2 / total).ln() + r.norm_sqr() / sigma2 - (r - prior.mu0).norm_sqr() / total;
    let lambda = activation(pi, log_ratio);
    let mhat = m * lambda;
    let vhat = lambda * v + lambda * (1.0 - lambda) * m.norm_sqr();
    Ok(BgPosterior {
        lambda,
        m,
        v,
        mhat,
        vhat,
    })
}

/// `pi / (pi + (1 - pi) exp(-log_ratio))` as a logistic in log-odds.
fn activation(pi: f64, log_ratio: f64) -> f64 {
    if pi >= 1.0 {
        return 1.0;
    }
    if pi <= 0.0 {
        return 0.0;
    }
    let t = log_ratio + (pi / (1.0 - pi)).ln();
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Result of one EM step on the prior hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorUpdate {
    pub prior: BgPrior,
    /// Set when every activation is zero and `mu0`, `tau0` were left alone.
    pub degenerate: bool,
}

/// EM update of `(pi, mu0, tau0)` with the default clamps.
pub fn em_update_prior(posteriors: &[BgPosterior], prior: &BgPrior) -> PriorUpdate {
    em_update_prior_with(posteriors, prior, PI_MIN, VAR_MIN)
}

/// EM update of `(pi, mu0, tau0)`.
///
/// `pi_n <- clamp(lambda_n)`, `mu0 <- sum(lambda m) / sum(lambda)` and
/// `tau0 <- sum(lambda (|mu0_old - m|^2 + V)) / sum(lambda)` clamped to
/// `[var_min, VAR_MAX]`.
pub fn em_update_prior_with(
    posteriors: &[BgPosterior],
    prior: &BgPrior,
    pi_min: f64,
    var_min: f64,
) -> PriorUpdate {
    let pi = posteriors
        .iter()
        .map(|p| p.lambda.clamp(pi_min, 1.0 - pi_min))
        .collect();
    let weight: f64 = posteriors.iter().map(|p| p.lambda).sum();
    if !(weight > 0.0) {
        log::warn!("EM prior update skipped: all activations are zero");
        return PriorUpdate {
            prior: BgPrior {
                pi,
                mu0: prior.mu0,
                tau0: prior.tau0,
            },
            degenerate: true,
        };
    }
    let mu0 = posteriors
        .iter()
        .fold(Complex64::new(0.0, 0.0), |acc, p| acc + p.m * p.lambda)
        / weight;
    let spread: f64 = posteriors
        .iter()
        .map(|p| p.lambda * ((prior.mu0 - p.m).norm_sqr() + p.v))
        .sum();
    PriorUpdate {
        prior: BgPrior {
            pi,
            mu0,
            tau0: (spread / weight).max(var_min),
        },
        degenerate: false,
    }
}
