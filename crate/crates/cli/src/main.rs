use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use eplse::engine::EngineConfig;
use eplse::harness::{self, SweepSpec};
use eplse::scene::{parse_snr, ChannelChoice, SceneSpec};
use eplse::Complex64;

const SEED_VAR: &str = "EPLSE_SEED";

#[derive(Parser)]
#[command(name = "eplse", version, about = "Line spectral estimation by expectation propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate one synthetic scene and write a JSON record.
    Run(RunArgs),
    /// Run a Monte-Carlo sweep and write per-trial and summary CSVs.
    Sweep(SweepArgs),
    /// Built-in sweep configurations.
    Presets {
        #[command(subcommand)]
        action: Option<PresetAction>,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    /// Print preset names and descriptions.
    List,
    /// Print one preset as TOML, usable as a sweep config.
    Show { name: String },
}

#[derive(Args, Default)]
struct EngineFlags {
    /// Cap on outer iterations.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Relative reconstruction change that ends a run.
    #[arg(long)]
    conv_tol: Option<f64>,
}

impl EngineFlags {
    fn apply(&self, cfg: &mut EngineConfig) {
        if let Some(t) = self.max_iters {
            cfg.t_outer = t;
            cfg.max_total_iters = cfg.max_total_iters.max(t);
        }
        if let Some(t) = self.conv_tol {
            cfg.conv_tol = t;
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with scene and engine settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the three-tone example scene (M=21, 18 rows, K=3, 10 dB).
    #[arg(long)]
    worked_example: bool,
    /// Grid length.
    #[arg(short = 'm', long = "m")]
    m_full: Option<usize>,
    /// Number of true components.
    #[arg(short = 'k', long = "k")]
    k: Option<usize>,
    /// Candidate components (defaults to M).
    #[arg(short = 'n', long = "n")]
    n: Option<usize>,
    /// Observed rows, drawn at random (defaults to all).
    #[arg(long)]
    subset: Option<usize>,
    /// SNR in dB, or `inf`.
    #[arg(long, value_parser = parse_snr)]
    snr: Option<f64>,
    /// Quantizer bit depth; unquantized when absent.
    #[arg(long)]
    bits: Option<u32>,
    /// Scene seed; falls back to the config file, then EPLSE_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    engine: EngineFlags,
    /// Output JSON path.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Named preset (see `presets list`).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// TOML sweep specification.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of trials per value.
    #[arg(long)]
    trials: Option<usize>,
    /// Override the sweep values (comma separated).
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    /// Seed of trial 0; falls back to the sweep file, then EPLSE_SEED.
    #[arg(long)]
    seed_base: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    engine: EngineFlags,
    /// Per-trial CSV path; the summary goes next to it as `<stem>.summary.csv`.
    #[arg(short, long)]
    out: PathBuf,
}

/// `run` config file. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    #[serde(default)]
    scene: SceneFile,
    engine: Option<EngineConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    m: Option<usize>,
    k: Option<usize>,
    n: Option<usize>,
    subset: Option<usize>,
    snr_db: Option<toml::Value>,
    bits: Option<u32>,
    seed: Option<u64>,
    theta: Option<Vec<f64>>,
    /// Amplitudes as `[re, im]` pairs.
    x: Option<Vec<[f64; 2]>>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .with_context(|| format!("{SEED_VAR}='{v}' is not a nonnegative integer")),
        Err(_) => Ok(None),
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn snr_value(v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        toml::Value::String(s) => parse_snr(s).map_err(anyhow::Error::msg),
        other => bail!("snr_db must be a number or \"inf\", got {other}"),
    }
}

fn build_run(args: &RunArgs) -> Result<(SceneSpec, EngineConfig)> {
    let file: RunFile = match &args.config {
        Some(p) => read_toml(p)?,
        None => RunFile::default(),
    };
    let sf = &file.scene;
    let base = args.worked_example.then(|| SceneSpec::worked_example(0));

    let m_full = args.m_full.or(sf.m).or(base.as_ref().map(|b| b.m_full));
    let k = args.k.or(sf.k).or(base.as_ref().map(|b| b.k));
    let (Some(m_full), Some(k)) = (m_full, k) else {
        bail!("--m and --k are required (or --worked-example, or a config with scene.m and scene.k)");
    };
    let snr_db = match (args.snr, &sf.snr_db) {
        (Some(v), _) => v,
        (None, Some(v)) => snr_value(v)?,
        (None, None) => base.as_ref().map_or(f64::INFINITY, |b| b.snr_db),
    };
    let seed = match args.seed.or(sf.seed) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let channel = match args.bits.or(sf.bits) {
        Some(bits) => ChannelChoice::Quantized { bits },
        None => ChannelChoice::Awgn,
    };
    // Fixed tones only carry over while the grid and order still match.
    let keep_base = base.as_ref().filter(|b| b.m_full == m_full && b.k == k);
    let spec = SceneSpec {
        m_full,
        k,
        n: args.n.or(sf.n).unwrap_or(m_full),
        snr_db,
        subset_size: args.subset.or(sf.subset).or(keep_base.and_then(|b| b.subset_size)),
        channel,
        seed,
        theta: sf.theta.clone().or(keep_base.and_then(|b| b.theta.clone())),
        x: sf
            .x
            .as_ref()
            .map(|v| v.iter().map(|p| Complex64::new(p[0], p[1])).collect())
            .or(keep_base.and_then(|b| b.x.clone())),
    };
    spec.validate()?;
    let mut engine = file.engine.unwrap_or_default();
    args.engine.apply(&mut engine);
    engine.validate()?;
    Ok((spec, engine))
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let (spec, engine) = build_run(args)?;
    let outcome = harness::run_trial(&spec, &engine)?;
    let json = serde_json::to_string_pretty(&outcome)?;
    fs::write(&args.out, json + "\n").with_context(|| format!("writing {}", args.out.display()))?;
    log::info!(
        "K_hat = {}, {} iterations, written to {}",
        outcome.estimate.k_hat,
        outcome.estimate.iterations,
        args.out.display()
    );
    Ok(())
}

fn preset_or_err(name: &str) -> Result<SweepSpec> {
    harness::preset(name).with_context(|| {
        let names: Vec<_> = harness::presets().iter().map(|p| p.name).collect();
        format!("unknown preset '{name}' (available: {})", names.join(", "))
    })
}

fn build_sweep(args: &SweepArgs) -> Result<SweepSpec> {
    let (mut spec, from_file) = match (&args.preset, &args.config) {
        (Some(name), _) => (preset_or_err(name)?, false),
        (None, Some(path)) => {
            // either `preset = "name"` alone, or a full spec
            let table: toml::Table = read_toml(path)?;
            match table.get("preset") {
                Some(toml::Value::String(name)) if table.len() == 1 => (preset_or_err(name)?, false),
                Some(_) => bail!("{}: `preset` must be a name and stand alone", path.display()),
                None => {
                    let spec: SweepSpec = table
                        .try_into()
                        .with_context(|| format!("parsing {}", path.display()))?;
                    (spec, true)
                }
            }
        }
        (None, None) => bail!("--preset or --config is required"),
    };
    if let Some(t) = args.trials {
        spec.trials = t;
    }
    if let Some(v) = &args.values {
        spec.values = v.clone();
    }
    match args.seed_base {
        Some(s) => spec.seed_base = s,
        None if !from_file => {
            if let Some(s) = env_seed()? {
                spec.seed_base = s;
            }
        }
        None => {}
    }
    args.engine.apply(&mut spec.engine);
    spec.validate()?;
    Ok(spec)
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let spec = build_sweep(args)?;
    let rows = harness::run_sweep(&spec, args.jobs)?;
    let summary = harness::summarize(&rows);

    let mut raw = Vec::new();
    harness::write_rows(&rows, &mut raw)?;
    let mut agg = Vec::new();
    harness::write_summary(&summary, &mut agg)?;
    let summary_path = harness::summary_path(&args.out);
    fs::write(&args.out, raw).with_context(|| format!("writing {}", args.out.display()))?;
    fs::write(&summary_path, agg).with_context(|| format!("writing {}", summary_path.display()))?;
    log::info!("{} rows written to {}", rows.len(), args.out.display());
    Ok(())
}

fn cmd_presets(action: Option<&PresetAction>) -> Result<()> {
    match action {
        None | Some(PresetAction::List) => {
            for p in harness::presets() {
                println!("{:<12} {}", p.name, p.description);
            }
        }
        Some(PresetAction::Show { name }) => {
            let spec = preset_or_err(name)?;
            print!("{}", toml::to_string(&spec)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Presets { action } => cmd_presets(action.as_ref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
