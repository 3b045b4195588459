use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn radar(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_radar"));
    c.current_dir(dir).args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("RADAR_")) {
        c.env_remove(k);
    }
    c.envs(env.iter().copied());
    c.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn prepare_synthetic(dir: &Path) {
    let o = radar(
        dir,
        &["prepare", "--synthetic", "--users", "40", "--items", "50", "--edges-per-user", "6", "--out", "data", "--seed", "3"],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

fn write_config(dir: &Path, extra: &str) {
    let text = format!(
        "dim = 8\nepochs = 2\nphase1_steps = 3\nphase2_steps = 1\nphase3_steps = 1\nbatch_size = 128\ndiff_steps = 5\ndenoise_steps = 2\n{extra}"
    );
    std::fs::write(dir.join("cfg.txt"), text).unwrap();
}

#[test]
fn quickstart_runs_end_to_end_and_evaluation_is_repeatable() {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare_synthetic(dir);
    write_config(dir, "");
    let o = radar(dir, &["train", "--data", "data", "--config", "cfg.txt", "--out", "runs", "--name", "q"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let ckpt = dir.join("runs/q").join(manifest["checkpoint"].as_str().unwrap());
    assert!(ckpt.is_file());
    assert!(manifest["final_metrics"]["test/recall@20"].as_f64().is_some());
    let ckpt = ckpt.to_str().unwrap();
    let a = radar(dir, &["evaluate", "--checkpoint", ckpt, "--data", "data", "--config", "cfg.txt", "--out", "e1"], &[]);
    let b = radar(dir, &["evaluate", "--checkpoint", ckpt, "--data", "data", "--config", "cfg.txt", "--out", "e2"], &[]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(std::fs::read(dir.join("e1/report.csv")).unwrap(), std::fs::read(dir.join("e2/report.csv")).unwrap());
    assert!(t.elapsed() < Duration::from_secs(60));
}

#[test]
fn zero_epochs_writes_manifest_without_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare_synthetic(dir);
    write_config(dir, "epochs = 0\n");
    let o = radar(dir, &["train", "--data", "data", "--config", "cfg.txt", "--out", "runs", "--name", "z"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.join("runs/z");
    assert!(run.join("manifest.json").is_file());
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["checkpoint"].is_null());
    let ckpts = std::fs::read_dir(&run).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ckpt")).count();
    assert_eq!(ckpts, 0);
}

#[test]
fn empty_input_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("empty.tsv"), "").unwrap();
    let o = radar(tmp.path(), &["prepare", "--input", "empty.tsv", "--out", "data"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty dataset"), "{}", stderr(&o));
}

#[test]
fn invalid_config_values_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare_synthetic(dir);
    let o = radar(dir, &["train", "--data", "data"], &[("RADAR_LAMBDA_RATIO", "-1")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lambda_ratio"), "{}", stderr(&o));
    write_config(dir, "tau = 0\n");
    let o = radar(dir, &["train", "--data", "data", "--config", "cfg.txt"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tau"), "{}", stderr(&o));
}

#[test]
fn missing_paths_and_bad_arguments_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = radar(dir, &["train", "--data", "nowhere"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = radar(dir, &["evaluate", "--checkpoint", "none.ckpt", "--data", "nowhere"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = radar(dir, &["prepare", "--synthetic", "--split", "0.5,0.5"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = radar(dir, &["frobnicate"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn checkpoint_shape_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare_synthetic(dir);
    write_config(dir, "epochs = 1\n");
    let o = radar(dir, &["train", "--data", "data", "--config", "cfg.txt", "--out", "runs", "--name", "m"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = radar(dir, &["prepare", "--synthetic", "--users", "30", "--items", "50", "--edges-per-user", "6", "--out", "other"], &[]);
    assert!(o.status.success());
    let ckpt = dir.join("runs/m/epoch_0.ckpt");
    let o = radar(dir, &["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--data", "other"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("N=40"), "{}", stderr(&o));
}

#[test]
fn sweep_lambda_writes_sorted_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare_synthetic(dir);
    write_config(dir, "epochs = 1\n");
    let o = radar(dir, &["sweep-lambda", "--data", "data", "--config", "cfg.txt", "--values", "2,0.5", "--out", "sw"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.join("sw/lambda_sweep.csv")).unwrap();
    let firsts: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(firsts, ["0.5", "2"]);
}
