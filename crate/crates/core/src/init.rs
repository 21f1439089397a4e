//! Starting point for the estimator by successive periodogram cancellation.
//!
//! Peaks of the residual periodogram are picked one at a time, refined by
//! Newton's method and removed by least squares. Peaks that clear a
//! false-alarm threshold get a concentrated frequency message; the rest
//! start uninformative.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bgprior::{BgPrior, PI_MIN};
use crate::channels::{Channel, ChannelKind, ObservedRows, Sample};
use crate::circular::{laplace_concentration, wrap_angle};
use crate::{Error, Result, VAR_MAX, VAR_MIN};

/// Grid points per candidate component.
const GRID_FACTOR: usize = 4;
const NEWTON_STEPS: usize = 3;
/// False-alarm probability of the peak significance test.
const FALSE_ALARM: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitResult {
    pub x0: Vec<Complex64>,
    pub sx0: Vec<f64>,
    pub mu0_msgs: Vec<f64>,
    pub kappa0: Vec<f64>,
    pub sigma_w2_0: f64,
    pub prior0: BgPrior,
}

impl InitResult {
    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x0.len();
        if self.sx0.len() != n || self.mu0_msgs.len() != n || self.kappa0.len() != n || self.prior0.pi.len() != n {
            return Err(Error::input("initial message vectors differ in length"));
        }
        if self.sx0.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::input("initial amplitude variances must be positive"));
        }
        if self.kappa0.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
            return Err(Error::input("initial concentrations must be finite and >= 0"));
        }
        if self.mu0_msgs.iter().any(|m| !m.is_finite()) {
            return Err(Error::input("initial mean directions must be finite"));
        }
        if !(self.sigma_w2_0.is_finite() && self.sigma_w2_0 > 0.0) {
            return Err(Error::input("initial noise variance must be positive"));
        }
        Ok(())
    }
}

/// Observations mapped to complex pseudo-measurements.
///
/// Quantized samples go through one channel pass with a flat zero-mean
/// belief whose variance matches the quantizer's design signal power.
pub fn pseudo_measurements(y: &ObservedRows, channel: &Channel) -> Result<Vec<Complex64>> {
    match channel.kind {
        ChannelKind::Awgn => y
            .samples
            .iter()
            .map(|s| match s {
                Sample::Value(v) => Ok(*v),
                Sample::Cell(_) => Err(Error::input("quantized sample on a linear channel")),
            })
            .collect(),
        ChannelKind::Quantized(q) => {
            let va = 2.0 * q.limit * q.limit / 9.0;
            y.samples
                .iter()
                .map(|s| {
                    channel
                        .extrinsic(s, Complex64::new(0.0, 0.0), va)
                        .map(|(z, _, _)| z)
                })
                .collect()
        }
    }
}

/// `sum_m r_m e^{-j p_m theta}` and its first two derivatives in `theta`.
fn correlate(resid: &[Complex64], orders: &[f64], theta: f64) -> (Complex64, Complex64, Complex64) {
    let mut c = Complex64::new(0.0, 0.0);
    let mut c1 = Complex64::new(0.0, 0.0);
    let mut c2 = Complex64::new(0.0, 0.0);
    for (r, &p) in resid.iter().zip(orders) {
        let t = r * Complex64::from_polar(1.0, -p * theta);
        c += t;
        c1 += t * Complex64::new(0.0, -p);
        c2 += t * (-p * p);
    }
    (c, c1, c2)
}

fn energy(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Initial messages for `n_comp` candidate components.
pub fn init_periodogram(y: &ObservedRows, n_comp: usize, channel: &Channel) -> Result<InitResult> {
    let rows = y.len();
    if rows < 2 {
        return Err(Error::input(format!("need at least two observed rows, got {rows}")));
    }
    if n_comp == 0 {
        return Err(Error::input("at least one candidate component is required"));
    }
    let mut resid = pseudo_measurements(y, channel)?;
    if energy(&resid) == 0.0 {
        return Ok(InitResult {
            x0: vec![Complex64::new(0.0, 0.0); n_comp],
            sx0: vec![VAR_MIN; n_comp],
            mu0_msgs: vec![0.0; n_comp],
            kappa0: vec![0.0; n_comp],
            sigma_w2_0: VAR_MIN,
            prior0: BgPrior::uniform(n_comp, PI_MIN, Complex64::new(0.0, 0.0), VAR_MIN)?,
        });
    }
    let mf = rows as f64;
    let orders: Vec<f64> = y.indices.iter().map(|&r| r as f64).collect();
    let grid_len = GRID_FACTOR * n_comp.max(rows);
    let step = 2.0 * PI / grid_len as f64;
    let grid: Vec<f64> = (0..grid_len).map(|g| -PI + g as f64 * step).collect();

    let mut x0 = Vec::with_capacity(n_comp);
    let mut sx0 = Vec::with_capacity(n_comp);
    let mut mu0 = Vec::with_capacity(n_comp);
    let mut kappa0 = Vec::with_capacity(n_comp);
    let mut significant = true;
    let mut noise_power = energy(&resid) / mf;
    let mut power = vec![0.0; grid_len];

    for _ in 0..n_comp {
        for (pw, &t) in power.iter_mut().zip(&grid) {
            *pw = correlate(&resid, &orders, t).0.norm_sqr() / mf;
        }
        let (best, &p_max) = power
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("grid is not empty");
        let noise = median(&mut power.clone()) / std::f64::consts::LN_2;

        let mut theta = grid[best];
        for _ in 0..NEWTON_STEPS {
            let (c, c1, c2) = correlate(&resid, &orders, theta);
            let d1 = 2.0 * (c.conj() * c1).re / mf;
            let d2 = 2.0 * (c1.norm_sqr() + (c.conj() * c2).re) / mf;
            if !(d2 < 0.0) {
                break;
            }
            let next = theta - d1 / d2;
            if (next - grid[best]).abs() > step {
                break;
            }
            theta = next;
        }
        let (c, c1, c2) = correlate(&resid, &orders, theta);
        let curvature = -2.0 * (c1.norm_sqr() + (c.conj() * c2).re) / mf;
        let amp = c / mf;
        for (r, &p) in resid.iter_mut().zip(&orders) {
            *r -= amp * Complex64::from_polar(1.0, p * theta);
        }
        let resid_power = energy(&resid) / mf;

        significant = significant && noise > 0.0 && p_max > noise * (mf / FALSE_ALARM).ln();
        let kappa = if significant && curvature > 0.0 {
            laplace_concentration(curvature / noise)?
        } else {
            0.0
        };
        if significant {
            noise_power = resid_power;
        }
        x0.push(amp);
        sx0.push((resid_power / mf).clamp(VAR_MIN, VAR_MAX));
        mu0.push(wrap_angle(theta));
        kappa0.push(kappa);
    }

    let mut mags: Vec<f64> = x0.iter().map(|x| x.norm()).collect();
    let med = median(&mut mags);
    let strong: Vec<f64> = x0
        .iter()
        .map(|x| x.norm())
        .filter(|&a| a > med)
        .map(|a| a * a)
        .collect();
    let tau0 = if strong.is_empty() {
        energy(&x0) / n_comp as f64
    } else {
        strong.iter().sum::<f64>() / strong.len() as f64
    };
    Ok(InitResult {
        x0,
        sx0,
        mu0_msgs: mu0,
        kappa0,
        sigma_w2_0: noise_power.max(VAR_MIN),
        prior0: BgPrior::uniform(n_comp, 0.5, Complex64::new(0.0, 0.0), tau0.max(VAR_MIN))?,
    })
}
