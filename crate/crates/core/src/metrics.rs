//! Reconstruction and frequency error metrics.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::circular::wrap_angle;
use crate::{Error, Result};

/// Lower clamp for every dB figure; exact matches report this value.
pub const DB_FLOOR: f64 = -300.0;

/// Largest model order accepted by the exhaustive frequency matcher.
pub const MAX_MATCH_ORDER: usize = 6;

/// Per-trial summary written by sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub nmse_db: f64,
    pub dnmse_db: f64,
    pub order_correct: bool,
    /// Present exactly when `order_correct`.
    pub freq_err_db: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn to_db(ratio: f64) -> f64 {
    if ratio > 0.0 {
        (20.0 * ratio.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// `20 log10(||z_hat - z|| / ||z||)`.
pub fn nmse_db(z_hat: &[Complex64], z_true: &[Complex64]) -> Result<f64> {
    if z_hat.len() != z_true.len() {
        return Err(Error::input(format!(
            "length mismatch: {} vs {}",
            z_hat.len(),
            z_true.len()
        )));
    }
    let zn = norm(z_true);
    if !(zn > 0.0) {
        return Err(Error::input("reference signal is zero"));
    }
    let err = z_hat
        .iter()
        .zip(z_true)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        .sqrt();
    Ok(to_db(err / zn))
}

/// NMSE after the best complex rescaling of `z_hat`. Returns 0 dB for `z_hat = 0`.
pub fn dnmse_db(z_hat: &[Complex64], z_true: &[Complex64]) -> Result<f64> {
    if z_hat.len() != z_true.len() {
        return Err(Error::input(format!(
            "length mismatch: {} vs {}",
            z_hat.len(),
            z_true.len()
        )));
    }
    let hn2: f64 = z_hat.iter().map(|c| c.norm_sqr()).sum();
    if !(hn2 > 0.0) {
        // nmse of the zero vector, still validating the reference
        return nmse_db(z_hat, z_true).map(|_| 0.0);
    }
    let inner = z_hat
        .iter()
        .zip(z_true)
        .fold(Complex64::new(0.0, 0.0), |acc, (h, t)| acc + h.conj() * t);
    let c = inner / hn2;
    let scaled: Vec<Complex64> = z_hat.iter().map(|h| h * c).collect();
    nmse_db(&scaled, z_true)
}

/// `20 log10` of the wrapped frequency error under the best assignment.
///
/// Returns `None` when the lengths differ or exceed [`MAX_MATCH_ORDER`].
pub fn freq_error_db(theta_hat: &[f64], theta_true: &[f64]) -> Option<f64> {
    let k = theta_true.len();
    if theta_hat.len() != k || k > MAX_MATCH_ORDER {
        return None;
    }
    if k == 0 {
        return Some(DB_FLOOR);
    }
    let cost = |i: usize, j: usize| wrap_angle(theta_hat[i] - theta_true[j]).powi(2);
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let s: f64 = p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum();
        if s < best {
            best = s;
        }
    });
    Some(to_db(best.sqrt()))
}

fn permute(p: &mut [usize], start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == p.len() {
        visit(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permute(p, start + 1, visit);
        p.swap(start, i);
    }
}
