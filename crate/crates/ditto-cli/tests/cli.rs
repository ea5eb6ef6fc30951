//! End-to-end checks of the binary: exit codes, digest stability, and the
//! report artifacts each subcommand leaves behind.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ditto(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ditto"));
    cmd.args(args).env_remove("DITTO_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn ditto")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn digest_line(out: &Output) -> String {
    stdout(out)
        .lines()
        .find(|l| l.starts_with("sha256 "))
        .expect("digest line")
        .to_string()
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> String {
    let trace = dir.join(name);
    let trace_str = trace.to_str().unwrap().to_string();
    let mut args = vec![
        "gen-trace",
        "--model",
        "toy-unet",
        "--steps",
        "4",
        "--seed",
        "9",
        "--out",
        &trace_str,
    ];
    args.extend_from_slice(extra);
    let out = ditto(&args, &[]);
    assert!(
        out.status.success(),
        "gen-trace failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    trace_str
}

#[test]
fn gen_trace_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("u.trace").to_str().unwrap().to_string();
    let args = [
        "gen-trace",
        "--model",
        "toy-unet",
        "--steps",
        "4",
        "--seed",
        "3",
        "--out",
        &trace,
    ];
    let a = ditto(&args, &[]);
    assert!(a.status.success());
    let b = ditto(&args, &[]);
    assert!(b.status.success());
    assert_eq!(digest_line(&a), digest_line(&b));
    assert!(Path::new(&trace).exists());
}

#[test]
fn gen_trace_rejects_single_step() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("u.trace").to_str().unwrap().to_string();
    let out = ditto(
        &[
            "gen-trace",
            "--model",
            "toy-unet",
            "--steps",
            "1",
            "--out",
            &trace,
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn env_seed_is_the_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("u.trace").to_str().unwrap().to_string();
    let args = [
        "gen-trace",
        "--model",
        "toy-unet",
        "--steps",
        "4",
        "--out",
        &trace,
    ];
    let a = ditto(&args, &[("DITTO_SEED", "5")]);
    let b = ditto(&args, &[("DITTO_SEED", "5")]);
    let c = ditto(&args, &[("DITTO_SEED", "6")]);
    assert!(a.status.success() && b.status.success() && c.status.success());
    assert_eq!(digest_line(&a), digest_line(&b));
    assert_ne!(digest_line(&a), digest_line(&c));
}

#[test]
fn itc_preset_cannot_run_diff_variants() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen(dir.path(), "u.trace", &[]);
    let out = ditto(
        &[
            "simulate",
            "--trace",
            &trace,
            "--variant",
            "ditto",
            "--preset",
            "itc",
            "--out-dir",
            dir.path().to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_trace_is_an_io_error() {
    let out = ditto(
        &[
            "analyze",
            "--trace",
            "/nonexistent/x.trace",
            "--out-dir",
            "/tmp",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"steps": 4, "bogus_knob": 1}"#).unwrap();
    let trace = dir.path().join("u.trace").to_str().unwrap().to_string();
    let out = ditto(
        &[
            "gen-trace",
            "--model",
            "toy-unet",
            "--out",
            &trace,
            "--config",
            cfg.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_simulate_compare_produce_reports() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen(dir.path(), "u.trace", &[]);
    let out_dir = dir.path().join("reports");
    let out_str = out_dir.to_str().unwrap();

    let out = ditto(&["analyze", "--trace", &trace, "--out-dir", out_str], &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "similarity.csv",
        "range.csv",
        "bitwidth.csv",
        "bops.csv",
        "analysis.json",
        "effective-config.json",
    ] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let csv = fs::read_to_string(out_dir.join("similarity.csv")).unwrap();
    assert!(csv.starts_with("# config_digest="));

    let out = ditto(
        &[
            "simulate",
            "--trace",
            &trace,
            "--variant",
            "ditto",
            "--preset",
            "ditto",
            "--out-dir",
            out_str,
        ],
        &[],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout(&out).contains("exact=true"));
    for f in ["report.csv", "report.json", "plan.json"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }

    let out = ditto(&["compare", "--trace", &trace, "--out-dir", out_str], &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = stdout(&out);
    assert!(text.contains("defo accuracy vs ideal:"), "{text}");
    let csv = fs::read_to_string(out_dir.join("compare.csv")).unwrap();
    let itc_row = csv
        .lines()
        .find(|l| l.starts_with("itc,"))
        .expect("itc row");
    for cell in itc_row.split(',').skip(3) {
        assert_eq!(cell.parse::<f64>().unwrap(), 1.0, "row: {itc_row}");
    }
}

#[test]
fn custom_hw_config_and_ideal_variant() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen(dir.path(), "u.trace", &[]);
    let hw = dir.path().join("hw.json");
    fs::write(&hw, r#"{"name": "custom", "n_lanes": 1024}"#).unwrap();
    let out_dir = dir.path().join("ideal");
    let out = ditto(
        &[
            "simulate",
            "--trace",
            &trace,
            "--variant",
            "ideal",
            "--hw-config",
            hw.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out_dir.join("plan.json").exists());
    // unknown hardware keys rejected
    fs::write(&hw, r#"{"n_lanes": 1024, "warp_size": 32}"#).unwrap();
    let out = ditto(
        &[
            "simulate",
            "--trace",
            &trace,
            "--hw-config",
            hw.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
}
