//! End-to-end checks of the `pid` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pid")).args(args).env("PID_THREADS", "1").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const SMALL: &str = r#"{
  "teacher": {"type": "gmm", "dim": 2, "components": [
    {"weight": 0.5, "mean": [-2.0, 0.0], "sigma0": 0.4},
    {"weight": 0.5, "mean": [2.0, 1.0], "sigma0": 0.4}]},
  "grid": {"n": 16},
  "student": {"hidden_dims": [8, 8]},
  "train": {"steps": 12, "batch": 8, "log_every": 4, "ckpt_every": 6},
  "eval": {"n_samples": 32, "reference_refine": 2, "traj_seeds": 2}
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn verify_exits_zero() {
    let out = pid(&["verify"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn usage_errors_exit_one() {
    let out = pid(&["sample", "--n", "3", "--out", "x.csv"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&pid(&["train", "--bogus"])), 1);
    assert_eq!(code(&pid(&["frobnicate"])), 1);
    assert_eq!(code(&pid(&["--help"])), 0);
}

#[test]
fn invalid_config_exits_one_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"grid": {"n": 1}}"#);
    let out_dir = dir.path().join("run");
    let out = pid(&["train", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid.n"));
}

#[test]
fn numerical_failure_exits_two_and_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace(r#""steps": 12"#, r#""steps": 12, "lr": 1e300"#));
    let run = dir.path().join("run");
    let out = pid(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpts: Vec<_> = fs::read_dir(&run)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("ckpt_"))
        .collect();
    assert!(!ckpts.is_empty());
    for c in ckpts {
        let text = fs::read_to_string(c.path()).unwrap();
        pid_core::checkpoint::checkpoint_from_str(&text).unwrap();
    }
}

#[test]
fn train_sample_eval_traj_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let out = pid(&["train", "--config", &cfg, "--out", run_s]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["ckpt_6.json", "ckpt_12.json", "log.csv", "config.resolved.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,loss,grad_norm,wall_ms");
    assert_eq!(log.lines().count(), 4);

    // the resolved config reproduces the run bit for bit
    let again = dir.path().join("again");
    let resolved = run.join("config.resolved.json");
    assert_eq!(code(&pid(&["train", "--config", resolved.to_str().unwrap(), "--out", again.to_str().unwrap()])), 0);
    assert_eq!(fs::read(run.join("ckpt_12.json")).unwrap(), fs::read(again.join("ckpt_12.json")).unwrap());

    // resuming from the mid-run checkpoint lands on the same final state
    let resumed = dir.path().join("resumed");
    let out = pid(&[
        "train",
        "--config",
        &cfg,
        "--out",
        resumed.to_str().unwrap(),
        "--resume",
        run.join("ckpt_6.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(run.join("ckpt_12.json")).unwrap(), fs::read(resumed.join("ckpt_12.json")).unwrap());

    let ckpt = run.join("ckpt_12.json");
    let samples = dir.path().join("samples.csv");
    let out = pid(&["sample", "--ckpt", ckpt.to_str().unwrap(), "--n", "5", "--out", samples.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(&samples).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "x_0,x_1");
    assert_eq!(lines.len(), 6);
    assert!(lines[1..].iter().all(|l| l.split(',').all(|v| v.parse::<f64>().unwrap().is_finite())));

    let eval_dir = dir.path().join("eval");
    let out = pid(&["eval", "--config", &cfg, "--ckpt", ckpt.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert!(report["experiments"][0]["metrics"]["energy_distance"].as_f64().unwrap() >= 0.0);
    assert!(eval_dir.join("report.csv").exists());

    let traj = dir.path().join("traj.csv");
    for extra in [vec![], vec!["--ckpt", ckpt.to_str().unwrap()], vec!["--solver", "heun"]] {
        let mut args = vec!["traj", "--config", &cfg, "--seeds", "3", "--out", traj.to_str().unwrap()];
        args.extend(extra);
        assert_eq!(code(&pid(&args)), 0);
        let text = fs::read_to_string(&traj).unwrap();
        assert_eq!(text.lines().next().unwrap(), "seed,i,t,x_0,x_1");
        assert_eq!(text.lines().count(), 1 + 3 * 16);
    }
}

#[test]
fn traj_with_defaults_has_seeds_times_n_rows() {
    let out = pid(&["traj", "--seeds", "4"]);
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 1 + 4 * 128);
}

#[test]
fn sweep_and_ablation_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let sweep = dir.path().join("sweep");
    let out = pid(&["sweep-n", "--config", &cfg, "--grid", "4,8", "--out", sweep.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(sweep.join("report.csv")).unwrap().lines().count(), 3);

    let abl = dir.path().join("ablation");
    let out = pid(&["eval", "--config", &cfg, "--ablation", "--out", abl.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(abl.join("report.csv")).unwrap();
    for arm in ["upwind", "central", "exact", "no_stop_grad"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{arm},"))), "{csv}");
    }
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn writes_stay_inside_out_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_pid")).args(args).current_dir(dir.path()).output().unwrap();
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["train", "--config", &cfg, "--out", "run"]);
    assert_eq!(entries(dir.path()), ["config.json", "run"]);
    run(&["sample", "--ckpt", "run/ckpt_12.json", "--n", "4", "--out", "samples/s.csv"]);
    run(&["traj", "--config", &cfg, "--seeds", "2", "--out", "traj/t.csv"]);
    run(&["eval", "--config", &cfg, "--ckpt", "run/ckpt_12.json", "--out", "eval"]);
    run(&["sweep-n", "--config", &cfg, "--grid", "4", "--out", "sweep"]);
    assert_eq!(entries(dir.path()), ["config.json", "eval", "run", "samples", "sweep", "traj"]);
    assert_eq!(entries(&dir.path().join("samples")), ["s.csv"]);
    assert_eq!(entries(&dir.path().join("eval")), ["report.csv", "report.json"]);
}
