use std::path::Path;
use std::process::{Command, Output};

use eplse::harness::{read_rows, summarize, SUMMARY_COLUMNS, TRIAL_COLUMNS};
use serde_json::Value;

fn eplse(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eplse"))
        .args(args)
        .current_dir(dir)
        .env_remove("EPLSE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_with_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.json", "b.json"] {
        ok(&eplse(&["run", "--m", "16", "--k", "2", "--snr", "15", "--seed", "7", "-o", name], dir.path()));
    }
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    let b = std::fs::read(dir.path().join("b.json")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn worked_example_record_has_order_estimate() {
    let dir = tempfile::tempdir().unwrap();
    ok(&eplse(&["run", "--worked-example", "--seed", "3", "-o", "w.json"], dir.path()));
    let v: Value = serde_json::from_slice(&std::fs::read(dir.path().join("w.json")).unwrap()).unwrap();
    assert!(v["estimate"]["k_hat"].is_u64());
    assert!(v["report"]["nmse_db"].is_number());
    assert!(v["trace"].as_array().is_some_and(|t| !t.is_empty()));
    let spec = &v["scene"]["spec"];
    assert_eq!(spec["m_full"], 21);
    assert_eq!(spec["subset_size"], 18);
    assert_eq!(spec["k"], 3);
    assert_eq!(v["scene"]["y"]["indices"].as_array().unwrap().len(), 18);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let with_env = |name: &str, seed: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_eplse"))
            .args(["run", "--m", "12", "--k", "1", "--snr", "20", "-o", name])
            .current_dir(dir.path())
            .env("EPLSE_SEED", seed)
            .output()
            .unwrap();
        ok(&out);
        let v: Value = serde_json::from_slice(&std::fs::read(dir.path().join(name)).unwrap()).unwrap();
        v["scene"]["spec"]["seed"].as_u64().unwrap()
    };
    assert_eq!(with_env("e.json", "41"), 41);
    ok(&eplse(&["run", "--m", "12", "--k", "1", "--snr", "20", "-o", "d.json"], dir.path()));
    let v: Value = serde_json::from_slice(&std::fs::read(dir.path().join("d.json")).unwrap()).unwrap();
    assert_eq!(v["scene"]["spec"]["seed"], 0);
}

#[test]
fn missing_flags_fail_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = eplse(&["run", "--k", "2", "-o", "x.json"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--m"));
    let out = eplse(&["run", "--m", "16", "--k", "2"], dir.path());
    assert!(!out.status.success());
    let out = eplse(&["sweep", "--trials", "1", "-o", "s.csv"], dir.path());
    assert!(!out.status.success());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[scene]\nm = 16\nk = 2\ncolour = 3\n").unwrap();
    let out = eplse(&["run", "--config", "bad.toml", "-o", "x.json"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
    assert!(!dir.path().join("x.json").exists());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "[scene]\nm = 16\nk = 2\nsnr_db = \"inf\"\nseed = 5\n\n[engine]\nt_outer = 40\n",
    )
    .unwrap();
    ok(&eplse(&["run", "--config", "run.toml", "--seed", "9", "-o", "r.json"], dir.path()));
    let v: Value = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(v["scene"]["spec"]["seed"], 9);
    assert_eq!(v["scene"]["spec"]["snr_db"], "inf");
    assert_eq!(v["scene"]["spec"]["m_full"], 16);
    assert!(v["estimate"]["iterations"].as_u64().unwrap() <= 40);
}

#[test]
fn single_trial_sweep_has_one_row_and_stable_header() {
    let dir = tempfile::tempdir().unwrap();
    ok(&eplse(&["sweep", "--preset", "fig8", "--values", "20", "--trials", "1", "-o", "one.csv"], dir.path()));
    let text = std::fs::read_to_string(dir.path().join("one.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], TRIAL_COLUMNS.join(","));
    assert_eq!(
        lines[0],
        "sweep_value,trial,seed,nmse_db,dnmse_db,order_correct,freq_err_db,iterations,sigma_w2_hat"
    );
    let summary = std::fs::read_to_string(dir.path().join("one.summary.csv")).unwrap();
    assert_eq!(summary.lines().next().unwrap(), SUMMARY_COLUMNS.join(","));
    assert_eq!(summary.lines().count(), 2);
}

#[test]
fn summary_is_recomputable_and_sweeps_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str, jobs: &'static str| {
        vec!["sweep", "--preset", "fig8", "--values", "10,20", "--trials", "4", "--seed-base", "11", "--jobs", jobs, "-o", out]
    };
    ok(&eplse(&args("p.csv", "1"), dir.path()));
    ok(&eplse(&args("q.csv", "3"), dir.path()));
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("p.csv"), read("q.csv"));
    assert_eq!(read("p.summary.csv"), read("q.summary.csv"));

    let rows = read_rows(&dir.path().join("p.csv")).unwrap();
    assert_eq!(rows.len(), 8);
    let seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, [11, 12, 13, 14, 11, 12, 13, 14]);

    let mut expected = Vec::new();
    eplse::harness::write_summary(&summarize(&rows), &mut expected).unwrap();
    assert_eq!(read("p.summary.csv"), expected);

    // independent recomputation of one aggregate
    let at10: Vec<_> = rows.iter().filter(|r| r.sweep_value == 10.0).collect();
    let mean = at10.iter().map(|r| r.nmse_db).sum::<f64>() / at10.len() as f64;
    let mut rd = csv::Reader::from_path(dir.path().join("p.summary.csv")).unwrap();
    let first = rd.records().next().unwrap().unwrap();
    assert!((first[2].parse::<f64>().unwrap() - mean).abs() < 1e-12);
}

#[test]
fn sweep_config_file_and_preset_reference() {
    let dir = tempfile::tempdir().unwrap();
    let shown = eplse(&["presets", "show", "fig10"], dir.path());
    ok(&shown);
    std::fs::write(dir.path().join("fig10.toml"), &shown.stdout).unwrap();
    std::fs::write(dir.path().join("named.toml"), "preset = \"fig10\"\n").unwrap();
    let common = ["--values", "2", "--trials", "2"];
    ok(&eplse(&[&["sweep", "--config", "fig10.toml", "-o", "a.csv"][..], &common].concat(), dir.path()));
    ok(&eplse(&[&["sweep", "--config", "named.toml", "-o", "b.csv"][..], &common].concat(), dir.path()));
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.csv")).unwrap());
}

#[test]
fn presets_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["presets"][..], &["presets", "list"][..]] {
        let out = eplse(args, dir.path());
        ok(&out);
        let text = String::from_utf8(out.stdout).unwrap();
        for name in ["fig8", "fig9", "fig10", "fig11-snr10", "fig11-snr20", "fig11-snr30"] {
            assert!(text.lines().any(|l| l.starts_with(name)), "{name} missing");
        }
    }
    assert!(!eplse(&["presets", "show", "fig99"], dir.path()).status.success());
}
