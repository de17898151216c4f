use std::fs;
use std::path::Path;
use std::process::Command;

use sgd_initlab::cli::main_with_args;

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["sgd-initlab"];
    full.extend_from_slice(args);
    main_with_args(full)
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().to_string()).collect()
}

fn floats(csv: &str, name: &str) -> Vec<f64> {
    column(csv, name).iter().map(|v| v.parse().unwrap()).collect()
}

const SMALL: [&str; 10] = [
    "--synthetic", "d=20,M=3,n=300", "--hidden", "16", "--batch", "50", "--record-every", "10",
    "--noise-probes", "50",
];

#[test]
fn train_row_count_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let code = run(&[
        "train", "--synthetic", "d=20,M=3,n=300", "--sigma0", "0.1", "--alpha", "1e-4", "--batch",
        "100", "--epochs", "50", "--seeds", "1", "--out", out,
    ]);
    assert_eq!(code, 0);
    let csv = read(dir.path(), "runs.csv");
    assert_eq!(
        csv.lines().next().unwrap(),
        "run_id,seed,sigma0,epoch,train_loss,val_loss,val_acc,vbar,mean_norm_sq,centered_var,diverged"
    );
    assert_eq!(csv.lines().count() - 1, 50 / 10 + 1);
    let summary: serde_json::Value = serde_json::from_str(&read(dir.path(), "summary.json")).unwrap();
    assert_eq!(summary["config"]["alpha"], 1e-4);
    assert_eq!(summary["config"]["epochs"], 50);
}

#[test]
fn zero_learning_rate_keeps_vbar_constant() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["train", "--alpha", "0", "--epochs", "30", "--seeds", "1,2", "--out", out];
    args.extend_from_slice(&SMALL);
    assert_eq!(run(&args), 0);
    let csv = read(dir.path(), "runs.csv");
    let ids = column(&csv, "run_id");
    let vbar = column(&csv, "vbar");
    for (w, id) in vbar.windows(2).zip(ids.windows(2)) {
        if id[0] == id[1] {
            assert_eq!(w[0], w[1]);
        }
    }
}

#[test]
fn commands_are_deterministic_and_parallelism_invariant() {
    let runs: Vec<(String, String, String)> = ["1", "1", "4"]
        .iter()
        .map(|jobs| {
            let dir = tempfile::tempdir().unwrap();
            let out = dir.path().to_str().unwrap();
            let mut args = vec![
                "sweep", "--grid", "0.05,0.2", "--seeds", "1,2", "--epochs", "20", "--alpha", "0.05",
                "--he-baseline", "--jobs", jobs, "--out", out,
            ];
            args.extend_from_slice(&SMALL);
            assert_eq!(run(&args), 0);
            let summary = read(dir.path(), "summary.json").replace(out, "OUT");
            (read(dir.path(), "runs.csv"), read(dir.path(), "sweep.csv"), summary)
        })
        .collect();
    assert_eq!(runs[0].0, runs[1].0);
    assert_eq!(runs[0].1, runs[1].1);
    assert_eq!(runs[0].2, runs[1].2);
    assert_eq!(runs[0].0, runs[2].0);
    assert_eq!(runs[0].1, runs[2].1);
    // the effective config differs only in `jobs`
    let strip = |s: &str| s.replace("\"jobs\": 4", "\"jobs\": 1");
    assert_eq!(strip(&runs[0].2), strip(&runs[2].2));
}

#[test]
fn sweep_table_contract() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec![
        "sweep", "--grid", "0.05,0.15,0.5", "--seeds", "1,2,3", "--epochs", "20", "--alpha", "0.05",
        "--he-baseline", "--out", out,
    ];
    args.extend_from_slice(&SMALL);
    assert_eq!(run(&args), 0);
    let sweep = read(dir.path(), "sweep.csv");
    assert_eq!(
        sweep.lines().next().unwrap(),
        "sigma0,final_loss_mean,final_loss_std,final_vbar_mean,ratio,acc_mean"
    );
    let labels = column(&sweep, "sigma0");
    assert_eq!(labels, ["0.05", "0.15", "0.5", "he_normal"]);
    let vbar = floats(&sweep, "final_vbar_mean");
    let ratio = floats(&sweep, "ratio");
    for (i, s) in [0.05f64, 0.15, 0.5].iter().enumerate() {
        assert!((ratio[i] - vbar[i] / (s * s)).abs() <= 1e-12 * ratio[i]);
    }
    let runs = read(dir.path(), "runs.csv");
    let ids: std::collections::BTreeSet<String> = column(&runs, "run_id").into_iter().collect();
    assert_eq!(ids.len(), 4 * 3);
}

#[test]
fn single_value_sweep_matches_train() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut train = vec!["train", "--sigma0", "0.1", "--seeds", "1,2", "--epochs", "10", "--alpha", "0.05", "--out", a.path().to_str().unwrap()];
    train.extend_from_slice(&SMALL);
    let mut sweep = vec!["sweep", "--grid", "0.1", "--seeds", "1,2", "--epochs", "10", "--alpha", "0.05", "--out", b.path().to_str().unwrap()];
    sweep.extend_from_slice(&SMALL);
    assert_eq!(run(&train), 0);
    assert_eq!(run(&sweep), 0);
    assert_eq!(read(a.path(), "runs.csv"), read(b.path(), "runs.csv"));
    let ta: serde_json::Value = serde_json::from_str(&read(a.path(), "summary.json")).unwrap();
    let tb: serde_json::Value = serde_json::from_str(&read(b.path(), "summary.json")).unwrap();
    assert_eq!(ta["rows"], tb["rows"]);
}

#[test]
fn plots_regenerate_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["sweep", "--grid", "0.05,0.2", "--seeds", "1", "--epochs", "10", "--plot", "--out", out];
    args.extend_from_slice(&SMALL);
    assert_eq!(run(&args), 0);
    let again = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs.csv");
    let sweep = dir.path().join("sweep.csv");
    assert_eq!(
        run(&[
            "plot", "--runs", runs.to_str().unwrap(), "--sweep", sweep.to_str().unwrap(), "--out",
            again.path().to_str().unwrap(),
        ]),
        0
    );
    for name in ["variance_trace.svg", "loss_trace.svg", "final_loss_vs_sigma0.svg", "ratio_vs_sigma0.svg"] {
        assert_eq!(read(dir.path(), name), read(again.path(), name), "{name}");
    }
}

#[test]
fn langevin_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let args = ["langevin", "--diag", "1,2,3,4", "--alpha", "0.01", "--batch", "10", "--sigma-sq", "1", "--steps", "400000", "--seed", "5", "--out", out];
    assert_eq!(run(&args), 0);
    let first = read(dir.path(), "langevin.json");
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["report"]["passed"], true);
    assert!(v["report"]["relative_frobenius_error"].as_f64().unwrap() < 0.05);
    let oracle = &v["report"]["oracle_covariance"];
    assert!((oracle[0][0].as_f64().unwrap() - 5e-4).abs() < 1e-15);
    assert!((oracle[3][3].as_f64().unwrap() - 1.25e-4).abs() < 1e-15);
    assert_eq!(run(&args), 0);
    assert_eq!(first, read(dir.path(), "langevin.json"));

    let collapse = ["langevin", "--diag", "1,2", "--sigma-sq", "0", "--sigma0", "1", "--steps", "20000", "--out", out];
    assert_eq!(run(&collapse), 0);
    let v: serde_json::Value = serde_json::from_str(&read(dir.path(), "langevin.json")).unwrap();
    assert_eq!(v["report"]["deterministic_collapse"], true);

    assert_eq!(run(&["langevin", "--diag", "1,250", "--alpha", "0.01", "--out", out]), 2);
}

#[test]
fn theory_table_for_isotropic_quadratic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let args = ["theory", "--matrix", "1,0;0,1", "--alpha", "0.01", "--batch", "100", "--sigma-sq", "1", "--grid-min", "1e-7", "--grid-max", "1e-2", "--out", out];
    assert_eq!(run(&args), 0);
    let csv = read(dir.path(), "theory.csv");
    let kinds = column(&csv, "kind");
    let s = floats(&csv, "sigma0_sq");
    let rhs = floats(&csv, "rhs");
    let opt = kinds.iter().position(|k| k == "optimum").unwrap();
    assert!((s[opt] - 5e-5).abs() < 1e-18);
    assert!((rhs[opt] - 2.5e-5).abs() < 1e-10);
    assert!(rhs.iter().all(|&r| r >= rhs[opt] * (1.0 - 1e-12)));
    let v: serde_json::Value = serde_json::from_str(&read(dir.path(), "theory.json")).unwrap();
    assert!(v["tightness_gap"].as_f64().unwrap().abs() < 1e-10);
}

#[test]
fn theory_rhs_doubles_with_noise() {
    let tables: Vec<Vec<f64>> = ["1", "2"]
        .iter()
        .map(|s2| {
            let dir = tempfile::tempdir().unwrap();
            let out = dir.path().to_str().unwrap();
            let args = ["theory", "--k", "1000", "--e-w-sq", "22.5", "--sigma-sq", s2, "--out", out];
            assert_eq!(run(&args), 0);
            floats(&read(dir.path(), "theory.csv"), "rhs")
        })
        .collect();
    for (a, b) in tables[0].iter().zip(&tables[1]) {
        assert!((b - 2.0 * a).abs() <= 1e-12 * a.abs());
    }
}

#[test]
fn sigma_search_stopping_rules() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    // alpha = 0: vbar stays at sigma0^2, so the start is a fixed point
    let mut args = vec!["sigma-search", "--alpha", "0", "--sigma0", "0.3", "--seeds", "1,2", "--epochs", "5", "--max-iters", "5", "--out", out];
    args.extend_from_slice(&SMALL);
    assert_eq!(run(&args), 0);
    let csv = read(dir.path(), "sigma_search.csv");
    assert_eq!(csv.lines().count() - 1, 1);
    assert_eq!(column(&csv, "converged"), ["true"]);

    let mut args = vec!["sigma-search", "--alpha", "0.05", "--sigma0", "0.5", "--seeds", "1,2", "--epochs", "5", "--max-iters", "1", "--out", out];
    args.extend_from_slice(&SMALL);
    assert_eq!(run(&args), 0);
    let runs = read(dir.path(), "runs.csv");
    let ids: std::collections::BTreeSet<String> = column(&runs, "run_id").into_iter().collect();
    assert_eq!(ids.len(), 2);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, "synthetic = d=20,M=3,n=300\nhidden = 16\nbatch = 50\nepochs = 40\nrecord_every = 10\nnoise_probes = 0\n").unwrap();
    let out = dir.path().join("o");
    let code = run(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "20", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let csv = read(&out, "runs.csv");
    assert_eq!(csv.lines().count() - 1, 20 / 10 + 1);
    let summary: serde_json::Value = serde_json::from_str(&read(&out, "summary.json")).unwrap();
    assert_eq!(summary["config"]["epochs"], 20);
    assert_eq!(summary["config"]["batch"], 50);
}

#[test]
fn binary_exit_codes_and_seed_env() {
    let exe = env!("CARGO_BIN_EXE_sgd-initlab");
    let dir = tempfile::tempdir().unwrap();
    let missing = Command::new(exe)
        .args(["train", "--train-images", "/nonexistent/a", "--train-labels", "/nonexistent/b", "--val-images", "x", "--val-labels", "y", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    let usage = Command::new(exe).arg("nonsense").output().unwrap();
    assert_eq!(usage.status.code(), Some(2));

    let out = |seed: &str, name: &str| {
        let o = dir.path().join(name);
        let status = Command::new(exe)
            .env("SGD_INITLAB_SEED", seed)
            .args(["train", "--epochs", "5"])
            .args(SMALL)
            .arg("--out")
            .arg(&o)
            .status()
            .unwrap();
        assert!(status.success());
        fs::read_to_string(o.join("runs.csv")).unwrap()
    };
    let a = out("7", "a");
    assert_eq!(a, out("7", "b"));
    assert_ne!(a, out("8", "c"));
    assert!(column(&a, "seed").iter().all(|s| s == "7"));
}
