//! Normal-distribution helpers used by the quantized channel.

use std::f64::consts::FRAC_1_SQRT_2;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const INV_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// Scaled complementary error function `exp(x^2) erfc(x)` for `x >= 0`.
pub fn erfcx(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < 25.0 {
        (x * x).exp() * libm::erfc(x)
    } else {
        let inv2 = 1.0 / (x * x);
        let series = 1.0 - 0.5 * inv2 + 0.75 * inv2 * inv2 - 1.875 * inv2.powi(3)
            + 6.5625 * inv2.powi(4);
        INV_SQRT_PI / x * series
    }
}

/// Moments of a standard normal truncated to `[a, b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedMoments {
    pub mean: f64,
    pub var: f64,
    /// `false` when the interval carries no representable probability mass.
    pub ok: bool,
}

/// Mean and variance of `t ~ N(0, 1)` conditioned on `a <= t < b`.
///
/// Tail intervals are evaluated relative to `exp(-a^2/2)` so the mass never
/// underflows before the ratio is formed.
pub fn truncated_std_normal(a: f64, b: f64) -> TruncatedMoments {
    debug_assert!(a < b);
    if a >= 0.0 {
        upper_tail(a, b)
    } else if b <= 0.0 {
        let m = upper_tail(-b, -a);
        TruncatedMoments {
            mean: -m.mean,
            ..m
        }
    } else {
        let mass = 0.5 * (erf_ext(b * FRAC_1_SQRT_2) - erf_ext(a * FRAC_1_SQRT_2));
        let (pa, apa) = pdf_terms(a);
        let (pb, bpb) = pdf_terms(b);
        finish(mass, pa - pb, apa - bpb)
    }
}

/// Past this point the one-sided tail goes through the Mills-ratio
/// continued fraction; `1 + a*mean - mean^2` cancels badly there.
const DEEP_TAIL: f64 = 4.0;
const MILLS_DEPTH: usize = 120;

// 0 <= a < b <= inf
fn upper_tail(a: f64, b: f64) -> TruncatedMoments {
    if b == f64::INFINITY && a >= DEEP_TAIL {
        return deep_tail(a);
    }
    let decay = if b.is_finite() {
        (-0.5 * (b - a) * (b + a)).exp()
    } else {
        0.0
    };
    let eb = if b.is_finite() && decay > 0.0 {
        erfcx(b * FRAC_1_SQRT_2) * decay
    } else {
        0.0
    };
    let mass = 0.5 * (erfcx(a * FRAC_1_SQRT_2) - eb);
    let pa = INV_SQRT_2PI;
    let pb = INV_SQRT_2PI * decay;
    let bpb = if b.is_finite() { b * pb } else { 0.0 };
    finish(mass, pa - pb, a * pa - bpb)
}

// mills(a) = 1/(a + t1), t_k = k/(a + t_{k+1}); mean = a + t1 and the
// variance 1 - mean*t1 reduces to (t2 - t1)/(a + t2).
fn deep_tail(a: f64) -> TruncatedMoments {
    let mut t_next = 0.0;
    let mut t2 = 0.0;
    for k in (1..=MILLS_DEPTH).rev() {
        let t = k as f64 / (a + t_next);
        if k == 2 {
            t2 = t;
        }
        t_next = t;
    }
    let t1 = t_next;
    TruncatedMoments {
        mean: a + t1,
        var: ((t2 - t1) / (a + t2)).clamp(f64::MIN_POSITIVE, 1.0),
        ok: true,
    }
}

fn finish(mass: f64, dpdf: f64, dxpdf: f64) -> TruncatedMoments {
    if !(mass > 0.0 && mass.is_finite()) {
        return TruncatedMoments {
            mean: 0.0,
            var: 1.0,
            ok: false,
        };
    }
    let mean = dpdf / mass;
    let var = 1.0 + dxpdf / mass - mean * mean;
    TruncatedMoments {
        mean,
        var: var.clamp(f64::MIN_POSITIVE, 1.0),
        ok: true,
    }
}

fn erf_ext(x: f64) -> f64 {
    if x == f64::INFINITY {
        1.0
    } else if x == f64::NEG_INFINITY {
        -1.0
    } else {
        libm::erf(x)
    }
}

fn pdf_terms(x: f64) -> (f64, f64) {
    if x.is_finite() {
        let p = INV_SQRT_2PI * (-0.5 * x * x).exp();
        (p, x * p)
    } else {
        (0.0, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn quad(a: f64, b: f64) -> (f64, f64) {
        let lo = a.max(-40.0);
        let hi = b.min(lo + 40.0);
        let n = 400_000;
        let h = (hi - lo) / n as f64;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let t = lo + (i as f64 + 0.5) * h;
            // shift weights to the interval start to avoid underflow
            let w = (-0.5 * (t * t - lo.max(0.0).powi(2))).exp();
            z += w;
            m1 += w * t;
            m2 += w * t * t;
        }
        let mean = m1 / z;
        (mean, m2 / z - mean * mean)
    }

    #[test]
    fn erfcx_matches_definition_and_asymptote() {
        for &x in &[0.0f64, 0.3, 1.0, 4.0, 10.0, 24.9] {
            let direct = (x * x).exp() * libm::erfc(x);
            assert!(((erfcx(x) - direct) / direct).abs() < 1e-13);
        }
        let lo = erfcx(25.0 - 1e-9);
        let hi = erfcx(25.0 + 1e-9);
        assert!(((lo - hi) / hi).abs() < 1e-10);
    }

    #[test]
    fn deep_tail_keeps_relative_variance() {
        let switch = DEEP_TAIL;
        let mass = 0.5 * erfcx(switch * FRAC_1_SQRT_2);
        let generic = finish(mass, INV_SQRT_2PI, switch * INV_SQRT_2PI);
        let deep = deep_tail(switch);
        assert!((generic.mean - deep.mean).abs() < 1e-12);
        assert!(((generic.var - deep.var) / deep.var).abs() < 1e-9);
        for &a in &[50.0f64, 1e3, 1e6] {
            let m = truncated_std_normal(a, f64::INFINITY);
            let series = (1.0 - 6.0 / (a * a)) / (a * a);
            assert!(((m.var - series) / series).abs() < 60.0 / a.powi(4));
            if a < 1e4 {
                assert!((m.mean - a - 1.0 / a).abs() < 3.0 / a.powi(3));
            }
        }
    }

    #[test]
    fn truncated_moments_against_quadrature() {
        for &(a, b) in &[
            (-1.0, 0.5),
            (0.0, f64::INFINITY),
            (f64::NEG_INFINITY, -2.0),
            (3.0, 3.5),
            (12.0, f64::INFINITY),
            (30.0, 30.2),
            (-0.2, 0.1),
        ] {
            let got = truncated_std_normal(a, b);
            let (mq, vq) = quad(a, b);
            assert!(got.ok);
            assert!((got.mean - mq).abs() < 1e-6, "[{a},{b}) mean {} vs {mq}", got.mean);
            assert!((got.var - vq).abs() < 1e-6, "[{a},{b}) var {} vs {vq}", got.var);
        }
    }

    #[test]
    fn half_line_has_closed_form() {
        let m = truncated_std_normal(0.0, f64::INFINITY);
        let mean = (2.0 / PI).sqrt();
        assert!((m.mean - mean).abs() < 1e-15);
        assert!((m.var - (1.0 - 2.0 / PI)).abs() < 1e-14);
    }

    #[test]
    fn far_tail_stays_finite() {
        let m = truncated_std_normal(1e3, f64::INFINITY);
        assert!(m.ok && (m.mean - 1e3).abs() < 1e-2 && m.var > 0.0);
    }
}
