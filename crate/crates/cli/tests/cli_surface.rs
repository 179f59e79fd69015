//! End-to-end exit-code matrix and file-surface checks, run against the
//! actual binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gold_core::container::snapshot_g_to_container;
use gold_core::linalg::Mat;

fn gold(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gold")).args(args).output().expect("spawn gold")
}

fn write_small_config(path: &Path) {
    fs::write(
        path,
        "samples_per_class = 30\nbatches_per_domain = 3\nauto_domains = 2\nbatch_size = 16\nfeature_dim = 32\n",
    )
    .unwrap();
}

#[test]
fn run_writes_metrics_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.conf");
    write_small_config(&cfg);
    let out = dir.path().join("metrics.csv");
    let res = gold(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(res.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.starts_with("mean_err="), "summary line missing: {stdout}");
    assert!(stdout.contains("final_align="));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "batch,domain,err,align,kappa_r,loss_st,loss_cont,confident,eig");
    assert_eq!(lines.count(), 6); // 2 domains x 3 batches
}

#[test]
fn missing_config_exits_one_without_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("metrics.csv");
    let res = gold(&["run", "--config", "/definitely/not/here.conf", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!out.exists(), "no partial output on failure");
    assert!(!String::from_utf8_lossy(&res.stderr).is_empty());
}

#[test]
fn bad_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.conf");
    fs::write(&cfg, "not_a_real_key = 3\n").unwrap();
    let out = dir.path().join("metrics.csv");
    let res = gold(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn unknown_flag_exits_one() {
    let res = gold(&["run", "--bogus-flag"]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn seed_override_is_deterministic_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.conf");
    write_small_config(&cfg);
    let out1 = dir.path().join("a.csv");
    let out2 = dir.path().join("b.csv");
    for out in [&out1, &out2] {
        let res = gold(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "7",
            "--quiet",
        ]);
        assert_eq!(res.status.code(), Some(0));
    }
    assert_eq!(fs::read(&out1).unwrap(), fs::read(&out2).unwrap());
}

#[test]
fn baseline_shares_the_metrics_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.conf");
    write_small_config(&cfg);
    let out = dir.path().join("base.csv");
    let res = gold(&["baseline", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(res.status.code(), Some(0));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("batch,domain,err,align,kappa_r,loss_st,loss_cont,confident,eig\n"));
}

#[test]
fn oracle_exit_codes() {
    let res = gold(&["oracle", "--trials", "20", "--quiet"]);
    assert_eq!(res.status.code(), Some(0), "stdout: {}", String::from_utf8_lossy(&res.stdout));

    let res = gold(&["oracle", "--trials", "0"]);
    assert_eq!(res.status.code(), Some(1));

    let res = gold(&["oracle", "--trials", "20", "--fault", "flip-least-norm-sign", "--quiet"]);
    assert_eq!(res.status.code(), Some(3));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("FAIL minimality"), "failure must name the property: {stdout}");
}

#[test]
fn spectrum_from_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("g.bin");
    snapshot_g_to_container(&Mat::diag(&[4.0, 1.0, 0.0, 0.0])).save(&snap).unwrap();
    let out = dir.path().join("spec.csv");
    let res = gold(&["spectrum", "--snapshot", snap.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.trim().lines().collect();
    assert_eq!(lines[0], "k,lambda,kappa");
    assert!(lines[1].starts_with("1,4,0.8"));
    assert!(lines[2].starts_with("2,1,1"));
    assert!(lines[3].starts_with("3,0,1"));
    assert!(lines[4].starts_with("4,0,1"));
}

#[test]
fn spectrum_errors_without_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("spec.csv");
    let res = gold(&["spectrum", "--snapshot", "/missing.bin", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!out.exists());

    let res = gold(&["spectrum", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn dump_g_feeds_spectrum_with_full_energy_at_class_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.conf");
    write_small_config(&cfg);
    let metrics = dir.path().join("m.csv");
    let snap = dir.path().join("g.bin");
    let res = gold(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        metrics.to_str().unwrap(),
        "--dump-g",
        snap.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(res.status.code(), Some(0));
    let out = dir.path().join("spec.csv");
    let res = gold(&["spectrum", "--snapshot", snap.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0));
    // linear head: kappa reaches 1 within 1e-8 by k = classes (10)
    let text = fs::read_to_string(&out).unwrap();
    let row10: Vec<&str> = text.lines().nth(10).unwrap().split(',').collect();
    assert_eq!(row10[0], "10");
    let kappa: f64 = row10[2].parse().unwrap();
    assert!((kappa - 1.0).abs() < 1e-8, "kappa(10) = {kappa}");
}

#[test]
fn align_curve_has_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.conf");
    write_small_config(&cfg);
    let out = dir.path().join("align.csv");
    let res = gold(&["align", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(res.status.code(), Some(0));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("batch,align\n"));
    assert_eq!(text.trim().lines().count(), 7);
}

#[test]
fn gen_config_round_trips_through_the_parser() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("default.conf");
    let res = gold(&["gen-config", "--out", path.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0));
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.contains("t_eig"));
    gold_core::config::ExperimentConfig::parse(&text).expect("generated config must parse");
}

#[test]
fn source_accuracy_meets_the_bar_on_the_default_generator() {
    let cfg = gold_core::config::ExperimentConfig::default();
    let exp = gold_cli::setup::prepare(&cfg, true).unwrap();
    assert!(
        exp.source_accuracy >= 0.95,
        "default-generator source accuracy {} below 0.95",
        exp.source_accuracy
    );
}
