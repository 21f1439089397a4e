//! Synthetic line-spectral scenes and their measurements.

use std::f64::consts::{PI, SQRT_2};

use num_complex::Complex64;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channels::{default_quantizer_limit, Channel, ObservedRows, Quantizer, Sample};
use crate::circular::wrap_angle;
use crate::{Error, Result};

/// Rejection draws allowed before the separation constraint is declared infeasible.
pub const MAX_FREQ_DRAWS: usize = 100_000;
/// Mean and variance of the amplitude magnitudes.
pub const MAGNITUDE_MEAN: f64 = 1.0;
pub const MAGNITUDE_VARIANCE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ChannelChoice {
    Awgn,
    Quantized { bits: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub m_full: usize,
    pub k: usize,
    /// Number of candidate components; also sets the minimum separation `2 pi / n`.
    pub n: usize,
    /// Signal-to-noise ratio in dB; `+inf` gives noiseless samples.
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
    /// Number of observed rows; all rows when absent.
    #[serde(default)]
    pub subset_size: Option<usize>,
    pub channel: ChannelChoice,
    pub seed: u64,
    /// Fixed frequencies instead of random ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    /// Fixed amplitudes instead of random ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<Complex64>>,
}

impl SceneSpec {
    pub fn awgn(m_full: usize, k: usize, snr_db: f64, seed: u64) -> Self {
        SceneSpec {
            m_full,
            k,
            n: m_full,
            snr_db,
            subset_size: None,
            channel: ChannelChoice::Awgn,
            seed,
            theta: None,
            x: None,
        }
    }

    /// Three tones on a 21-point grid with 18 observed rows at 10 dB.
    pub fn worked_example(seed: u64) -> Self {
        SceneSpec {
            subset_size: Some(18),
            theta: Some(vec![-2.1050, 1.4278, 2.4550]),
            x: Some(vec![
                Complex64::new(1.3154, 0.1524),
                Complex64::new(0.6064, -0.2788),
                Complex64::new(0.6544, -0.5616),
            ]),
            ..SceneSpec::awgn(21, 3, 10.0, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_full == 0 {
            return Err(Error::input("grid length must be positive"));
        }
        if self.n == 0 || self.k > self.n || self.n > self.m_full {
            return Err(Error::input(format!(
                "need K <= N <= M (K={}, N={}, M={})",
                self.k, self.n, self.m_full
            )));
        }
        if let Some(s) = self.subset_size {
            if s == 0 || s > self.m_full {
                return Err(Error::input(format!("subset size {s} outside 1..={}", self.m_full)));
            }
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::input("SNR must be a number or +inf"));
        }
        if let ChannelChoice::Quantized { bits } = self.channel {
            if !(1..=16).contains(&bits) {
                return Err(Error::input(format!("bits must be in 1..=16, got {bits}")));
            }
        }
        if let Some(t) = &self.theta {
            if t.len() != self.k || t.iter().any(|v| !v.is_finite()) {
                return Err(Error::input("fixed frequencies must be K finite values"));
            }
        }
        if let Some(x) = &self.x {
            if x.len() != self.k {
                return Err(Error::input("fixed amplitudes must have K entries"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub spec: SceneSpec,
    pub theta_true: Vec<f64>,
    pub x_true: Vec<Complex64>,
    /// Clean signal on the full grid.
    pub z: Vec<Complex64>,
    pub y: ObservedRows,
    pub sigma_w2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantizer: Option<Quantizer>,
    /// How amplitude magnitudes were drawn.
    pub magnitude_model: String,
}

impl Scene {
    /// Likelihood handed to the estimator: AWGN and multi-bit channels
    /// learn the noise variance, one-bit channels use unit variance.
    pub fn estimator_channel(&self) -> Result<Channel> {
        match self.quantizer {
            None => Channel::awgn(self.sigma_w2.max(1e-3), true),
            Some(q) if q.bits == 1 => Channel::quantized(q, 1.0, false),
            Some(q) => Channel::quantized(q, self.sigma_w2.max(1e-3), true),
        }
    }
}

/// `min_{k != l} |wrap(theta_k - theta_l)|`; infinite for fewer than two entries.
pub fn min_wrap_distance(theta: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in theta.iter().enumerate() {
        for b in &theta[i + 1..] {
            best = best.min(wrap_angle(a - b).abs());
        }
    }
    best
}

fn draw_frequencies(rng: &mut ChaCha8Rng, k: usize, sep: f64) -> Result<Vec<f64>> {
    let mut theta: Vec<f64> = Vec::with_capacity(k);
    let mut draws = 0;
    while theta.len() < k {
        if draws >= MAX_FREQ_DRAWS {
            return Err(Error::input(format!(
                "could not place {k} frequencies {sep:.4} rad apart in {MAX_FREQ_DRAWS} draws"
            )));
        }
        draws += 1;
        let t = rng.random_range(-PI..PI);
        if theta.iter().all(|&o| wrap_angle(t - o).abs() >= sep) {
            theta.push(t);
        }
    }
    Ok(theta)
}

fn draw_amplitudes(rng: &mut ChaCha8Rng, k: usize) -> Vec<Complex64> {
    let mag = Normal::new(MAGNITUDE_MEAN, MAGNITUDE_VARIANCE.sqrt()).expect("valid normal");
    (0..k)
        .map(|_| {
            let r = loop {
                let v: f64 = mag.sample(rng);
                if v >= 0.0 {
                    break v;
                }
            };
            Complex64::from_polar(r, rng.random_range(-PI..PI))
        })
        .collect()
}

/// `sum_k x_k e^{j r theta_k}` for `r = 0..m`.
pub fn synthesize(theta: &[f64], x: &[Complex64], m: usize) -> Vec<Complex64> {
    (0..m)
        .map(|r| {
            theta
                .iter()
                .zip(x)
                .map(|(&t, &a)| a * Complex64::from_polar(1.0, r as f64 * t))
                .sum()
        })
        .collect()
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sep = 2.0 * PI / spec.n as f64;
    let theta = match &spec.theta {
        Some(t) => t
            .iter()
            .map(|&v| if (-PI..PI).contains(&v) { v } else { wrap_angle(v) })
            .collect(),
        None => draw_frequencies(&mut rng, spec.k, sep)?,
    };
    let x = match &spec.x {
        Some(x) => x.clone(),
        None => draw_amplitudes(&mut rng, spec.k),
    };
    let m = spec.m_full;
    let z = synthesize(&theta, &x, m);
    let energy: f64 = z.iter().map(|c| c.norm_sqr()).sum();
    let sigma_w2 = if spec.snr_db == f64::INFINITY {
        0.0
    } else if energy > 0.0 {
        energy / (m as f64 * 10f64.powf(spec.snr_db / 10.0))
    } else {
        // no signal: unit-variance noise
        1.0
    };
    let sd = (0.5 * sigma_w2).sqrt();
    let noisy: Vec<Complex64> = z
        .iter()
        .map(|&v| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            v + Complex64::new(re, im) * sd
        })
        .collect();
    let mut rows: Vec<usize> = match spec.subset_size {
        Some(s) if s < m => sample(&mut rng, m, s).into_vec(),
        _ => (0..m).collect(),
    };
    rows.sort_unstable();
    let (samples, quantizer) = match spec.channel {
        ChannelChoice::Awgn => (rows.iter().map(|&r| Sample::Value(noisy[r])).collect(), None),
        ChannelChoice::Quantized { bits } => {
            let signal_var = energy / m as f64;
            let limit = if signal_var > 0.0 {
                default_quantizer_limit(signal_var)
            } else {
                3.0 / SQRT_2
            };
            let q = Quantizer::new(bits, limit)?;
            (rows.iter().map(|&r| Sample::Cell(q.quantize(noisy[r]))).collect(), Some(q))
        }
    };
    let y = ObservedRows::new(m, rows, samples)?;
    debug_assert!(spec.theta.is_some() || min_wrap_distance(&theta) >= sep);
    Ok(Scene {
        spec: spec.clone(),
        theta_true: theta,
        x_true: x,
        z,
        y,
        sigma_w2,
        quantizer,
        magnitude_model: format!(
            "normal(mean={MAGNITUDE_MEAN}, variance={MAGNITUDE_VARIANCE}), negative draws resampled"
        ),
    })
}

/// SNR fields accept numbers or the strings `"inf"` / `"infinity"`.
mod snr_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => super::parse_snr(&t).map_err(de::Error::custom),
        }
    }
}

/// Parses an SNR value in dB; `inf` means noiseless.
pub fn parse_snr(text: &str) -> std::result::Result<f64, String> {
    let t = text.trim();
    if matches!(t.to_ascii_lowercase().as_str(), "inf" | "+inf" | "infinity") {
        return Ok(f64::INFINITY);
    }
    t.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("invalid SNR '{text}'"))
}
