//! Measurement channels `p(y_m | z_m)`.
//!
//! A channel turns the Gaussian belief `CN(zA, vA)` about one noiseless
//! sample into posterior moments given the observation, and learns its
//! noise variance by EM. Quantized observations are kept as cell indices;
//! the cell bounds are derived from the quantizer on demand.

use std::f64::consts::SQRT_2;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::special::truncated_std_normal;
use crate::{Error, Result, VAR_MAX, VAR_MIN};

/// Uniform mid-rise quantizer applied separately to the real and imaginary
/// parts. `2^bits` cells of equal width tile `[-limit, limit]`; the two
/// outermost cells extend to infinity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub bits: u32,
    pub limit: f64,
}

/// Cell indices of one quantized complex sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantCode {
    pub re: u32,
    pub im: u32,
}

impl Quantizer {
    pub fn new(bits: u32, limit: f64) -> Result<Self> {
        if !(1..=16).contains(&bits) {
            return Err(Error::input(format!("quantizer bits must be in 1..=16, got {bits}")));
        }
        if !(limit.is_finite() && limit > 0.0) {
            return Err(Error::input(format!("quantizer limit must be positive, got {limit}")));
        }
        Ok(Quantizer { bits, limit })
    }

    pub fn levels(&self) -> u32 {
        1 << self.bits
    }

    pub fn step(&self) -> f64 {
        2.0 * self.limit / self.levels() as f64
    }

    pub fn quantize_real(&self, v: f64) -> u32 {
        let idx = ((v + self.limit) / self.step()).floor();
        idx.clamp(0.0, (self.levels() - 1) as f64) as u32
    }

    pub fn quantize(&self, v: Complex64) -> QuantCode {
        QuantCode {
            re: self.quantize_real(v.re),
            im: self.quantize_real(v.im),
        }
    }

    /// `[lower, upper)` bounds of a cell.
    pub fn cell_bounds(&self, idx: u32) -> (f64, f64) {
        let last = self.levels() - 1;
        let lo = if idx == 0 {
            f64::NEG_INFINITY
        } else {
            -self.limit + idx as f64 * self.step()
        };
        let hi = if idx >= last {
            f64::INFINITY
        } else {
            -self.limit + (idx + 1) as f64 * self.step()
        };
        (lo, hi)
    }
}

/// Quantizes every sample of `v`.
pub fn quantize(v: &[Complex64], bits: u32, limit: f64) -> Result<Vec<QuantCode>> {
    let q = Quantizer::new(bits, limit)?;
    Ok(v.iter().map(|&s| q.quantize(s)).collect())
}

/// One observed sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sample {
    Value(Complex64),
    Cell(QuantCode),
}

/// The observed rows of the full-length signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedRows {
    /// Length of the full grid the indices refer to.
    pub full_len: usize,
    /// Strictly increasing row indices.
    pub indices: Vec<usize>,
    pub samples: Vec<Sample>,
}

impl ObservedRows {
    pub fn new(full_len: usize, indices: Vec<usize>, samples: Vec<Sample>) -> Result<Self> {
        if indices.len() != samples.len() {
            return Err(Error::input(format!(
                "{} indices but {} samples",
                indices.len(),
                samples.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("row indices must be strictly increasing"));
        }
        if indices.last().is_some_and(|&i| i >= full_len) {
            return Err(Error::input("row index beyond the full grid"));
        }
        Ok(ObservedRows {
            full_len,
            indices,
            samples,
        })
    }

    /// All rows of a complex-valued signal.
    pub fn complete(y: &[Complex64]) -> Self {
        ObservedRows {
            full_len: y.len(),
            indices: (0..y.len()).collect(),
            samples: y.iter().map(|&v| Sample::Value(v)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Complex values, if every sample is unquantized.
    pub fn values(&self) -> Option<Vec<Complex64>> {
        self.samples
            .iter()
            .map(|s| match s {
                Sample::Value(v) => Some(*v),
                Sample::Cell(_) => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ChannelKind {
    Awgn,
    Quantized(Quantizer),
}

/// Measurement likelihood with its (possibly learned) noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub kind: ChannelKind,
    pub sigma_w2: f64,
    pub learn_noise: bool,
}

/// Componentwise posterior moments of `z_m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorMoments {
    pub mean: Complex64,
    pub var: f64,
    /// The observed cell carried no representable mass; prior moments returned.
    pub underflow: bool,
}

impl Channel {
    pub fn awgn(sigma_w2: f64, learn_noise: bool) -> Result<Self> {
        Channel::new(ChannelKind::Awgn, sigma_w2, learn_noise)
    }

    pub fn quantized(q: Quantizer, sigma_w2: f64, learn_noise: bool) -> Result<Self> {
        Channel::new(ChannelKind::Quantized(q), sigma_w2, learn_noise)
    }

    pub fn new(kind: ChannelKind, sigma_w2: f64, learn_noise: bool) -> Result<Self> {
        if !(sigma_w2.is_finite() && sigma_w2 > 0.0) {
            return Err(Error::input(format!("noise variance must be positive, got {sigma_w2}")));
        }
        Ok(Channel {
            kind,
            sigma_w2,
            learn_noise,
        })
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, ChannelKind::Awgn)
    }

    /// Moments of `z_m` under `CN(z_m; za, va) p(y_m | z_m)`.
    pub fn posterior_moments(&self, y: &Sample, za: Complex64, va: f64) -> Result<PosteriorMoments> {
        if !(va.is_finite() && va > 0.0) {
            return Err(Error::input(format!("extrinsic variance must be positive, got {va}")));
        }
        match (&self.kind, y) {
            (ChannelKind::Awgn, Sample::Value(yv)) => {
                let s2 = self.sigma_w2;
                let total = va + s2;
                Ok(PosteriorMoments {
                    mean: (za * s2 + yv * va) / total,
                    var: va * s2 / total,
                    underflow: false,
                })
            }
            (ChannelKind::Quantized(q), Sample::Cell(code)) => {
                let half_noise = 0.5 * self.sigma_w2;
                let half_prior = 0.5 * va;
                let re = cell_posterior(za.re, half_prior, half_noise, q.cell_bounds(code.re));
                let im = cell_posterior(za.im, half_prior, half_noise, q.cell_bounds(code.im));
                match (re, im) {
                    (Some((mr, vr)), Some((mi, vi))) => Ok(PosteriorMoments {
                        mean: Complex64::new(mr, mi),
                        var: (vr + vi).max(VAR_MIN),
                        underflow: false,
                    }),
                    _ => Ok(PosteriorMoments {
                        mean: za,
                        var: va,
                        underflow: true,
                    }),
                }
            }
            _ => Err(Error::input("sample type does not match the channel")),
        }
    }

    /// Extrinsic message `Proj[q_B] / m_{delta->z}` for one row.
    ///
    /// Returns `(z_ext, v_ext, posterior)`. A non-positive or non-finite
    /// extrinsic variance is replaced by [`VAR_MAX`] with the posterior mean.
    pub fn extrinsic(
        &self,
        y: &Sample,
        za: Complex64,
        va: f64,
    ) -> Result<(Complex64, f64, PosteriorMoments)> {
        let post = self.posterior_moments(y, za, va)?;
        if let (ChannelKind::Awgn, Sample::Value(yv)) = (&self.kind, y) {
            // Dividing the Gaussian posterior by the prior returns the
            // likelihood exactly; skip the cancellation-prone arithmetic.
            return Ok((*yv, self.sigma_w2, post));
        }
        let prec = 1.0 / post.var - 1.0 / va;
        if prec > 0.0 && prec.is_finite() {
            let v_ext = 1.0 / prec;
            let z_ext = (post.mean / post.var - za / va) * v_ext;
            if v_ext.is_finite() && z_ext.re.is_finite() && z_ext.im.is_finite() {
                return Ok((z_ext, v_ext.clamp(VAR_MIN, VAR_MAX), post));
            }
        }
        Ok((post.mean, VAR_MAX, post))
    }
}

/// Posterior mean/variance of `u ~ N(mu, s2)` given `u + e` in `[lo, hi)`,
/// `e ~ N(0, n2)`.
fn cell_posterior(mu: f64, s2: f64, n2: f64, (lo, hi): (f64, f64)) -> Option<(f64, f64)> {
    let c2 = s2 + n2;
    let c = c2.sqrt();
    let t = truncated_std_normal((lo - mu) / c, (hi - mu) / c);
    if !t.ok {
        return None;
    }
    let gain = s2 / c;
    let mean = mu + gain * t.mean;
    let var = s2 * (n2 + s2 * t.var) / c2;
    Some((mean, var.max(0.0)))
}

/// EM update of the noise variance, `(||y~ - z_post||^2 + sum v_post) / |M|`.
pub fn em_noise_variance(y_tilde: &[Complex64], z_post: &[Complex64], v_post: &[f64]) -> Result<f64> {
    if y_tilde.is_empty() {
        return Err(Error::input("noise update needs at least one observed row"));
    }
    if y_tilde.len() != z_post.len() || z_post.len() != v_post.len() {
        return Err(Error::input("noise update vectors differ in length"));
    }
    let resid: f64 = y_tilde
        .iter()
        .zip(z_post)
        .map(|(y, z)| (y - z).norm_sqr())
        .sum();
    let spread: f64 = v_post.iter().sum();
    Ok(((resid + spread) / y_tilde.len() as f64).max(VAR_MIN))
}

/// Quantizer range used for multi-bit experiments: `[-3 sigma_z / sqrt 2, 3 sigma_z / sqrt 2]`.
pub fn default_quantizer_limit(signal_var: f64) -> f64 {
    3.0 * signal_var.sqrt() / SQRT_2
}
