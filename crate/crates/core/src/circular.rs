//! Von Mises messages on the unit circle.
//!
//! A message is stored in natural-parameter form `eta = kappa * exp(j mu)`,
//! which turns products and quotients of densities into sums and
//! differences of complex numbers. Circular moments reduce to ratios of
//! modified Bessel functions `I_p(kappa) / I_0(kappa)`; those are evaluated
//! as chained ratios so that large orders and concentrations never touch an
//! unscaled `I_p`.

use std::f64::consts::{PI, TAU};
use std::sync::OnceLock;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Concentrations are capped here; beyond it `I_1/I_0` is 1 to machine
/// precision.
pub const KAPPA_MAX: f64 = 1e7;

/// Above this argument `I_1/I_0` is evaluated from the Hankel expansion.
const HANKEL_SWITCH: f64 = 64.0;
/// Above this curvature the Laplace concentration uses its asymptotic series.
const LAPLACE_ASYMPTOTIC: f64 = 1e3;
/// Below this curvature the Laplace concentration uses its small-`r` series.
const LAPLACE_SERIES: f64 = 0.05;

/// Von Mises density `exp(Re{eta^* e^{j theta}}) / (2 pi I_0(|eta|))`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VonMisesMsg {
    pub eta: Complex64,
}

impl VonMisesMsg {
    /// The uniform density `1/(2 pi)`.
    pub const UNIFORM: VonMisesMsg = VonMisesMsg {
        eta: Complex64 { re: 0.0, im: 0.0 },
    };

    pub fn from_natural(eta: Complex64) -> Self {
        VonMisesMsg { eta }
    }

    /// Builds a message from mean direction and concentration.
    pub fn new(mu: f64, kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa >= 0.0) || !mu.is_finite() {
            return Err(Error::input(format!(
                "von Mises parameters must be finite with kappa >= 0 (mu={mu}, kappa={kappa})"
            )));
        }
        Ok(VonMisesMsg {
            eta: Complex64::from_polar(kappa, mu),
        })
    }

    /// Mean direction in `[-pi, pi)`; zero for the uniform density.
    pub fn mu(&self) -> f64 {
        if self.eta.re == 0.0 && self.eta.im == 0.0 {
            0.0
        } else {
            wrap_angle(self.eta.im.atan2(self.eta.re))
        }
    }

    pub fn kappa(&self) -> f64 {
        self.eta.norm_sqr().sqrt()
    }

    pub fn is_uniform(&self) -> bool {
        self.kappa() == 0.0
    }

    /// Scales `eta` down so that `kappa <= kappa_max`, keeping the direction.
    pub fn capped(self, kappa_max: f64) -> Self {
        let k = self.kappa();
        if k > kappa_max {
            VonMisesMsg {
                eta: self.eta * (kappa_max / k),
            }
        } else {
            self
        }
    }

    /// Log-density up to the normalising constant.
    pub fn log_kernel(&self, theta: f64) -> f64 {
        (self.eta.conj() * Complex64::from_polar(1.0, theta)).re
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut w = (theta + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        w -= TAU;
    }
    w
}

/// Product of two von Mises densities (up to normalisation).
pub fn vm_multiply(a: VonMisesMsg, b: VonMisesMsg) -> VonMisesMsg {
    VonMisesMsg { eta: a.eta + b.eta }
}

/// Quotient `num / den` of two von Mises densities (up to normalisation).
pub fn vm_divide(num: VonMisesMsg, den: VonMisesMsg) -> VonMisesMsg {
    VonMisesMsg {
        eta: num.eta - den.eta,
    }
}

/// `I_order(kappa) / I_0(kappa)`.
pub fn bessel_ratio(order: u32, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    Ok(ratio_unchecked(order, kappa))
}

/// Circular moment `E[exp(j order theta)]` of a von Mises message.
pub fn circular_moment(msg: &VonMisesMsg, order: u32) -> Result<Complex64> {
    let kappa = msg.kappa();
    check_kappa(kappa)?;
    Ok(moment_unchecked(msg, order))
}

/// All ratios `I_p(kappa)/I_0(kappa)` for `p = 0..=max_order`.
pub fn bessel_ratios_upto(max_order: u32, kappa: f64) -> Result<Vec<f64>> {
    check_kappa(kappa)?;
    let len = max_order as usize + 1;
    let mut out = vec![0.0; len];
    out[0] = 1.0;
    if kappa == 0.0 || max_order == 0 {
        return Ok(out);
    }
    let p = max_order as f64;
    if kappa >= p * p / 4.0 {
        let mut r = i1_over_i0(kappa);
        let mut prod = r;
        out[1] = prod;
        for k in 1..max_order as usize {
            r = 1.0 / r - 2.0 * k as f64 / kappa;
            prod *= r;
            out[k + 1] = prod.clamp(0.0, 1.0);
        }
    } else {
        // successive ratios I_{k+1}/I_k from the top down, then cumulative product
        let mut ratios = vec![0.0; max_order as usize];
        let mut r = cf_ratio(max_order - 1, kappa);
        ratios[max_order as usize - 1] = r;
        for k in (1..max_order as usize).rev() {
            r = kappa / (2.0 * k as f64 + kappa * r);
            ratios[k - 1] = r;
        }
        let mut prod = 1.0;
        for (k, r) in ratios.iter().enumerate() {
            prod *= r;
            out[k + 1] = prod;
        }
    }
    Ok(out)
}

/// Inverse of `A(kappa) = I_1(kappa)/I_0(kappa)` on `[0, 1)`.
///
/// Saturates at [`KAPPA_MAX`].
pub fn a_inverse(r: f64) -> Result<f64> {
    if !(r.is_finite() && (0.0..1.0).contains(&r)) {
        return Err(Error::input(format!("a_inverse needs r in [0, 1), got {r}")));
    }
    if r == 0.0 {
        return Ok(0.0);
    }
    if r >= a_at_kappa_max() {
        return Ok(KAPPA_MAX);
    }
    // Best & Fisher piecewise starting point.
    let mut kappa = if r < 0.53 {
        2.0 * r + r.powi(3) + 5.0 * r.powi(5) / 6.0
    } else if r < 0.85 {
        -0.4 + 1.39 * r + 0.43 / (1.0 - r)
    } else {
        1.0 / (r.powi(3) - 4.0 * r * r + 3.0 * r)
    };
    kappa = kappa.clamp(f64::MIN_POSITIVE, KAPPA_MAX);
    for _ in 0..100 {
        let a = i1_over_i0(kappa);
        let resid = a - r;
        if resid.abs() <= 1e-14 * r {
            break;
        }
        let slope = 1.0 - a / kappa - a * a;
        if !(slope > 0.0) {
            break;
        }
        // Halley step; A'' follows from A and A' without another evaluation
        let curve = a / (kappa * kappa) - slope / kappa - 2.0 * a * slope;
        let newton = resid / slope;
        let denom = 1.0 - 0.5 * newton * curve / slope;
        let step = if denom > 0.5 { newton / denom } else { newton };
        let mut next = kappa - step;
        if !(next > 0.0) {
            next = kappa / 10.0;
        }
        let step = (next - kappa).abs();
        kappa = next.min(KAPPA_MAX);
        if step <= 1e-15 * kappa {
            break;
        }
    }
    Ok(kappa)
}

/// Concentration of the von Mises density whose Laplace curvature at the
/// mode is `curvature`: `A^{-1}(exp(-1 / (2 curvature)))`.
pub fn laplace_concentration(curvature: f64) -> Result<f64> {
    laplace_concentration_raw(curvature).map(|k| k.min(KAPPA_MAX))
}

// Not capped: intermediate projections are divided by capped messages and
// must keep their full concentration until then.
pub(crate) fn laplace_concentration_raw(curvature: f64) -> Result<f64> {
    if !(curvature.is_finite() && curvature > 0.0) {
        return Err(Error::input(format!(
            "Laplace curvature must be positive and finite, got {curvature}"
        )));
    }
    if curvature > LAPLACE_ASYMPTOTIC {
        // next term is about 0.324 / c^3
        let inv = 1.0 / curvature;
        return Ok(curvature + 0.5 + inv * (5.0 / 24.0 + inv * (3.0 / 16.0)));
    }
    if curvature < LAPLACE_SERIES {
        // r < e^-10: the small-argument inverse series is exact to rounding
        let r = (-0.5 / curvature).exp();
        return Ok(2.0 * r + r * r * r);
    }
    Ok(curvature * laplace_table().eval(curvature.ln()))
}

/// Direct evaluation of [`laplace_concentration`] without the table.
#[cfg(test)]
fn laplace_concentration_direct(curvature: f64) -> f64 {
    a_inverse((-0.5 / curvature).exp().min(1.0 - f64::EPSILON)).unwrap()
}

/// Laplace-style projection of `exp(-g)` onto a von Mises density.
///
/// Runs `newton_steps` Newton iterations on `g` from `theta0`, then sets
/// the concentration from the curvature at the resulting mode. When the
/// curvature is not positive (the iteration left the basin of a minimum),
/// `fallback` is returned unchanged.
pub fn vm_project_laplace<G, H>(
    g_grad: G,
    g_hess: H,
    theta0: f64,
    newton_steps: usize,
    fallback: VonMisesMsg,
) -> Result<VonMisesMsg>
where
    G: Fn(f64) -> f64,
    H: Fn(f64) -> f64,
{
    project_laplace_raw(g_grad, g_hess, theta0, newton_steps, fallback).map(|m| m.capped(KAPPA_MAX))
}

/// [`vm_project_laplace`] without the concentration cap.
pub(crate) fn project_laplace_raw<G, H>(
    g_grad: G,
    g_hess: H,
    theta0: f64,
    newton_steps: usize,
    fallback: VonMisesMsg,
) -> Result<VonMisesMsg>
where
    G: Fn(f64) -> f64,
    H: Fn(f64) -> f64,
{
    let mut theta = theta0;
    for _ in 0..newton_steps {
        let d1 = g_grad(theta);
        let d2 = g_hess(theta);
        if !(d1.is_finite() && d2.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite derivative at theta={theta}: g'={d1}, g''={d2}"
            )));
        }
        if d2 <= 0.0 {
            return Ok(fallback);
        }
        theta -= d1 / d2;
    }
    let mode = wrap_angle(theta);
    let curvature = g_hess(mode);
    if !curvature.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite curvature at mode {mode}"
        )));
    }
    if curvature <= 0.0 {
        return Ok(fallback);
    }
    let kappa = laplace_concentration_raw(curvature)?;
    Ok(VonMisesMsg {
        eta: Complex64::from_polar(kappa, mode),
    })
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa.is_finite() && kappa >= 0.0 {
        Ok(())
    } else {
        Err(Error::input(format!(
            "concentration must be finite and >= 0, got {kappa}"
        )))
    }
}

pub(crate) fn moment_unchecked(msg: &VonMisesMsg, order: u32) -> Complex64 {
    let rho = ratio_unchecked(order, msg.kappa());
    if rho == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let kappa = msg.kappa();
    (msg.eta / kappa).powi(order as i32) * rho
}

pub(crate) fn ratio_unchecked(order: u32, kappa: f64) -> f64 {
    if order == 0 {
        return 1.0;
    }
    if kappa == 0.0 {
        return 0.0;
    }
    let p = order as f64;
    let prod = if kappa >= p * p / 4.0 {
        // Forward recurrence r_k = 1/r_{k-1} - 2k/kappa. Relative error grows
        // like (I_0/I_p)^2, which is bounded in this regime.
        let mut r = i1_over_i0(kappa);
        let mut prod = r;
        for k in 1..order {
            r = 1.0 / r - 2.0 * k as f64 / kappa;
            prod *= r;
        }
        prod
    } else {
        // Continued fraction at the top order, stable backward recurrence
        // r_{k-1} = kappa / (2k + kappa r_k) down to zero.
        let mut r = cf_ratio(order - 1, kappa);
        let mut prod = r;
        for k in (1..order).rev() {
            r = kappa / (2.0 * k as f64 + kappa * r);
            prod *= r;
        }
        prod
    };
    prod.clamp(0.0, 1.0)
}

/// `A(x) = I_1(x) / I_0(x)`.
pub(crate) fn i1_over_i0(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if x < HANKEL_SWITCH {
        x * a_table().eval(x)
    } else {
        hankel_sum(1, x) / hankel_sum(0, x)
    }
}

fn a_at_kappa_max() -> f64 {
    static CELL: OnceLock<f64> = OnceLock::new();
    *CELL.get_or_init(|| i1_over_i0(KAPPA_MAX))
}

/// Piecewise Chebyshev interpolant on `[lo, lo + pieces * width)`.
struct ChebTable {
    lo: f64,
    inv_width: f64,
    coeffs: Vec<[f64; CHEB_DEGREE + 1]>,
}

const CHEB_DEGREE: usize = 12;

impl ChebTable {
    fn build(lo: f64, width: f64, pieces: usize, f: impl Fn(f64) -> f64) -> Self {
        let n = CHEB_DEGREE + 1;
        let coeffs = (0..pieces)
            .map(|k| {
                let vals: Vec<f64> = (0..n)
                    .map(|i| {
                        let t = (PI * (i as f64 + 0.5) / n as f64).cos();
                        f(lo + width * (k as f64 + 0.5 * (t + 1.0)))
                    })
                    .collect();
                let mut c = [0.0; CHEB_DEGREE + 1];
                for (j, cj) in c.iter_mut().enumerate() {
                    let s: f64 = (0..n)
                        .map(|i| vals[i] * (PI * j as f64 * (i as f64 + 0.5) / n as f64).cos())
                        .sum();
                    *cj = 2.0 * s / n as f64;
                }
                c[0] *= 0.5;
                c
            })
            .collect();
        ChebTable {
            lo,
            inv_width: 1.0 / width,
            coeffs,
        }
    }

    fn eval(&self, x: f64) -> f64 {
        let u = (x - self.lo) * self.inv_width;
        let k = (u as usize).min(self.coeffs.len() - 1);
        let t = 2.0 * (u - k as f64) - 1.0;
        let c = &self.coeffs[k];
        // Clenshaw recurrence
        let (mut b1, mut b2) = (0.0, 0.0);
        for &cj in c[1..].iter().rev() {
            let b0 = 2.0 * t * b1 - b2 + cj;
            b2 = b1;
            b1 = b0;
        }
        t * b1 - b2 + c[0]
    }
}

/// `A(x) / x` on `[0, HANKEL_SWITCH)`, fitted to the continued fraction.
fn a_table() -> &'static ChebTable {
    static TABLE: OnceLock<ChebTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let per_unit = 4;
        ChebTable::build(0.0, 1.0 / per_unit as f64, HANKEL_SWITCH as usize * per_unit, |x| {
            if x == 0.0 {
                0.5
            } else {
                cf_ratio(0, x) / x
            }
        })
    })
}

/// `kappa(c) / c` against `ln c` on `[ln LAPLACE_SERIES, ln LAPLACE_ASYMPTOTIC]`.
fn laplace_table() -> &'static ChebTable {
    static TABLE: OnceLock<ChebTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let (lo, hi) = (LAPLACE_SERIES.ln(), LAPLACE_ASYMPTOTIC.ln());
        let width = 0.25;
        let pieces = ((hi - lo) / width).ceil() as usize;
        ChebTable::build(lo, width, pieces, |s| {
            let c = s.exp();
            a_inverse((-0.5 / c).exp()).expect("r in (0, 1)") / c
        })
    })
}

/// `I_{nu+1}(x) / I_nu(x)` by the Gauss continued fraction
/// `1/(2(nu+1)/x + 1/(2(nu+2)/x + ...))`, modified Lentz evaluation.
fn cf_ratio(nu: u32, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = TINY;
    let mut c = f;
    let mut d = 0.0;
    let inv_x = 1.0 / x;
    for k in 1..200_000u32 {
        let b = 2.0 * (nu as f64 + k as f64) * inv_x;
        d = b + d;
        if d == 0.0 {
            d = TINY;
        }
        c = b + 1.0 / c;
        if c == 0.0 {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    f
}

/// Scaled Hankel series `sqrt(2 pi x) e^{-x} I_nu(x)` for large `x`.
fn hankel_sum(nu: u32, x: f64) -> f64 {
    let mu = 4.0 * (nu as f64) * (nu as f64);
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..60 {
        let odd = (2 * k - 1) as f64;
        let next = -term * (mu - odd * odd) / (8.0 * k as f64 * x);
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}
