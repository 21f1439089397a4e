//! Monte-Carlo trials, parameter sweeps and their CSV output.

use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{self, EngineConfig, Estimate, TraceRecord};
use crate::init::init_periodogram;
use crate::metrics::{dnmse_db, freq_error_db, nmse_db, TrialReport};
use crate::scene::{generate_scene, ChannelChoice, Scene, SceneSpec};
use crate::{Error, Result};

/// Header of the per-trial CSV.
pub const TRIAL_COLUMNS: [&str; 9] = [
    "sweep_value",
    "trial",
    "seed",
    "nmse_db",
    "dnmse_db",
    "order_correct",
    "freq_err_db",
    "iterations",
    "sigma_w2_hat",
];

/// Header of the summary CSV.
pub const SUMMARY_COLUMNS: [&str; 8] = [
    "sweep_value",
    "trials",
    "mean_nmse_db",
    "mean_dnmse_db",
    "order_success_rate",
    "mean_freq_err_db",
    "mean_iterations",
    "mean_sigma_w2_hat",
];

/// Everything produced by one trial.
#[derive(Debug, Clone, Serialize)]
pub struct TrialOutcome {
    pub scene: Scene,
    pub estimate: Estimate,
    pub report: TrialReport,
    pub trace: Vec<TraceRecord>,
}

fn error_figures(z_hat: &[Complex64], z: &[Complex64]) -> Result<(f64, f64)> {
    if z.iter().all(|v| v.norm_sqr() == 0.0) {
        return Ok((f64::NAN, f64::NAN));
    }
    Ok((nmse_db(z_hat, z)?, dnmse_db(z_hat, z)?))
}

/// Generates a scene, initializes, runs the estimator and scores the result.
pub fn run_trial(spec: &SceneSpec, config: &EngineConfig) -> Result<TrialOutcome> {
    let scene = generate_scene(spec)?;
    let channel = scene.estimator_channel()?;
    let init = init_periodogram(&scene.y, spec.n, &channel)?;
    let has_signal = scene.z.iter().any(|v| v.norm_sqr() > 0.0);
    let truth = has_signal.then_some(scene.z.as_slice());
    let out = engine::run(&scene.y, channel, config, &init, truth)?;
    let est = out.estimate;
    let (nmse, dnmse) = error_figures(&est.z_hat, &scene.z)?;
    let order_correct = est.k_hat == spec.k;
    let freq_err_db = if order_correct {
        freq_error_db(&est.active_frequencies(), &scene.theta_true)
    } else {
        None
    };
    let report = TrialReport {
        nmse_db: nmse,
        dnmse_db: dnmse,
        order_correct,
        freq_err_db,
        iterations: est.iterations,
        converged: est.converged,
    };
    Ok(TrialOutcome {
        scene,
        estimate: est,
        report,
        trace: out.trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    Snr,
    M,
    K,
    Bits,
}

impl std::str::FromStr for SweepVariable {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "snr" => Ok(SweepVariable::Snr),
            "m" => Ok(SweepVariable::M),
            "k" => Ok(SweepVariable::K),
            "bits" => Ok(SweepVariable::Bits),
            _ => Err(format!("unknown sweep variable '{s}' (expected snr, m, k or bits)")),
        }
    }
}

/// Parameters held fixed across a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedParams {
    pub m_full: usize,
    pub k: usize,
    /// Candidate components; equals `m_full` when absent.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub subset_size: Option<usize>,
    pub channel: ChannelChoice,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub sweep_variable: SweepVariable,
    pub values: Vec<f64>,
    pub trials: usize,
    pub fixed: FixedParams,
    pub seed_base: u64,
    #[serde(default)]
    pub engine: EngineConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::input("sweep needs at least one value"));
        }
        if self.trials == 0 {
            return Err(Error::input("sweep needs at least one trial"));
        }
        self.engine.validate()?;
        for &v in &self.values {
            self.scene_spec(v, 0)?.validate()?;
        }
        Ok(())
    }

    /// Scene of trial `trial` at sweep value `value`.
    pub fn scene_spec(&self, value: f64, trial: usize) -> Result<SceneSpec> {
        let f = &self.fixed;
        let count = |v: f64, what: &str| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v <= 1e6 {
                Ok(v as usize)
            } else {
                Err(Error::input(format!("{what} must be a nonnegative integer, got {v}")))
            }
        };
        let mut spec = SceneSpec {
            m_full: f.m_full,
            k: f.k,
            n: f.n.unwrap_or(f.m_full),
            snr_db: f.snr_db,
            subset_size: f.subset_size,
            channel: f.channel,
            seed: self.seed_base.wrapping_add(trial as u64),
            theta: None,
            x: None,
        };
        match self.sweep_variable {
            SweepVariable::Snr => spec.snr_db = value,
            SweepVariable::K => spec.k = count(value, "K")?,
            SweepVariable::M => {
                spec.m_full = count(value, "M")?;
                spec.n = f.n.unwrap_or(spec.m_full);
            }
            SweepVariable::Bits => {
                spec.channel = ChannelChoice::Quantized {
                    bits: count(value, "bits")? as u32,
                }
            }
        }
        Ok(spec)
    }
}

/// One line of the per-trial CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep_value: f64,
    pub trial: usize,
    pub seed: u64,
    pub nmse_db: f64,
    pub dnmse_db: f64,
    pub order_correct: bool,
    pub freq_err_db: Option<f64>,
    pub iterations: usize,
    pub sigma_w2_hat: f64,
}

/// One line of the summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sweep_value: f64,
    pub trials: usize,
    pub mean_nmse_db: f64,
    pub mean_dnmse_db: f64,
    pub order_success_rate: f64,
    /// Over order-correct trials only.
    pub mean_freq_err_db: Option<f64>,
    pub mean_iterations: f64,
    pub mean_sigma_w2_hat: f64,
}

/// Runs every `(value, trial)` pair on `jobs` threads; rows come back in
/// `(value, trial)` order.
pub fn run_sweep(spec: &SweepSpec, jobs: usize) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let tasks: Vec<(f64, usize)> = spec
        .values
        .iter()
        .flat_map(|&v| (0..spec.trials).map(move |t| (v, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Io(format!("thread pool: {e}")))?;
    pool.install(|| {
        tasks
            .par_iter()
            .map(|&(value, trial)| {
                let scene = spec.scene_spec(value, trial)?;
                let out = run_trial(&scene, &spec.engine)?;
                Ok(SweepRow {
                    sweep_value: value,
                    trial,
                    seed: scene.seed,
                    nmse_db: out.report.nmse_db,
                    dnmse_db: out.report.dnmse_db,
                    order_correct: out.report.order_correct,
                    freq_err_db: out.report.freq_err_db,
                    iterations: out.report.iterations,
                    sigma_w2_hat: out.estimate.sigma_w2_hat,
                })
            })
            .collect()
    })
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-value aggregates, in the order values first appear.
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut values: Vec<f64> = Vec::new();
    for r in rows {
        if !values.iter().any(|v| v.to_bits() == r.sweep_value.to_bits()) {
            values.push(r.sweep_value);
        }
    }
    values
        .into_iter()
        .map(|v| {
            let group: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.sweep_value.to_bits() == v.to_bits())
                .collect();
            let n = group.len();
            SummaryRow {
                sweep_value: v,
                trials: n,
                mean_nmse_db: mean(group.iter().map(|r| r.nmse_db)).unwrap_or(f64::NAN),
                mean_dnmse_db: mean(group.iter().map(|r| r.dnmse_db)).unwrap_or(f64::NAN),
                order_success_rate: group.iter().filter(|r| r.order_correct).count() as f64 / n as f64,
                mean_freq_err_db: mean(group.iter().filter_map(|r| r.freq_err_db)),
                mean_iterations: mean(group.iter().map(|r| r.iterations as f64)).unwrap_or(f64::NAN),
                mean_sigma_w2_hat: mean(group.iter().map(|r| r.sigma_w2_hat)).unwrap_or(f64::NAN),
            }
        })
        .collect()
}

fn write_csv<T: Serialize, W: Write>(rows: &[T], header: &[&str], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rows<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    write_csv(rows, &TRIAL_COLUMNS, out)
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    write_csv(rows, &SUMMARY_COLUMNS, out)
}

/// `results.csv` -> `results.summary.csv`.
pub fn summary_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.summary.csv"))
}

pub fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Named sweep configurations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub spec: SweepSpec,
}

pub fn presets() -> Vec<Preset> {
    let awgn = |m_full, k, snr_db| FixedParams {
        m_full,
        k,
        n: None,
        subset_size: None,
        channel: ChannelChoice::Awgn,
        snr_db,
    };
    let quant = |snr_db| FixedParams {
        m_full: 41,
        k: 3,
        n: None,
        subset_size: None,
        channel: ChannelChoice::Quantized { bits: 1 },
        snr_db,
    };
    let sweep = |var, values: Vec<f64>, trials, fixed| SweepSpec {
        sweep_variable: var,
        values,
        trials,
        fixed,
        seed_base: 0,
        engine: EngineConfig::default(),
    };
    vec![
        Preset {
            name: "fig8",
            description: "SNR 0..30 dB, M = 21, K = 5, 500 trials",
            spec: sweep(SweepVariable::Snr, (0..=30).map(f64::from).collect(), 500, awgn(21, 5, 0.0)),
        },
        Preset {
            name: "fig9",
            description: "M 10..38, K = 3, SNR 20 dB, 1000 trials",
            spec: sweep(SweepVariable::M, (10..=38).step_by(4).map(|m| m as f64).collect(), 1000, awgn(21, 3, 20.0)),
        },
        Preset {
            name: "fig10",
            description: "K 1..8, M = 21, SNR 20 dB, 1000 trials",
            spec: sweep(SweepVariable::K, (1..=8).map(f64::from).collect(), 1000, awgn(21, 1, 20.0)),
        },
        Preset {
            name: "fig11-snr10",
            description: "bits 1..3, N = M = 41, K = 3, SNR 10 dB, 20 trials",
            spec: sweep(SweepVariable::Bits, vec![1.0, 2.0, 3.0], 20, quant(10.0)),
        },
        Preset {
            name: "fig11-snr20",
            description: "bits 1..3, N = M = 41, K = 3, SNR 20 dB, 20 trials",
            spec: sweep(SweepVariable::Bits, vec![1.0, 2.0, 3.0], 20, quant(20.0)),
        },
        Preset {
            name: "fig11-snr30",
            description: "bits 1..3, N = M = 41, K = 3, SNR 30 dB, 20 trials",
            spec: sweep(SweepVariable::Bits, vec![1.0, 2.0, 3.0], 20, quant(30.0)),
        },
    ]
}

pub fn preset(name: &str) -> Option<SweepSpec> {
    presets().into_iter().find(|p| p.name == name).map(|p| p.spec)
}
