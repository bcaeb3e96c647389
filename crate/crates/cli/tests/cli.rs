use std::path::Path;
use std::process::{Command, Output};

fn kamdesk(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kamdesk")).args(args).env("KAMDESK_OUT_DIR", out).output().expect("binary runs")
}

fn stderr_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stderr).expect("stderr is JSON")
}

const MEASURE: &[&str] = &["measure", "--mode-bound", "4", "--samples", "1000", "--gammas", "0,1e-4,1e-3", "--seed", "5"];

#[test]
fn no_arguments_prints_usage() {
    let d = tempfile::tempdir().unwrap();
    let o = kamdesk(&[], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("usage"));
}

#[test]
fn unknown_subcommand_is_json_error() {
    let d = tempfile::tempdir().unwrap();
    let o = kamdesk(&["frobnicate"], d.path());
    assert_eq!(o.status.code(), Some(2));
    let v = stderr_json(&o);
    assert_eq!(v["error"]["module"], "cli");
    assert_eq!(v["error"]["condition"], "unknown_subcommand");
}

#[test]
fn malformed_config_rejected() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    std::fs::write(&cfg, "epsilon = 0.1\n").unwrap();
    let o = kamdesk(&["--config", cfg.to_str().unwrap(), "admissible"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"]["condition"], "malformed_config");
}

#[test]
fn module_error_exits_one() {
    let d = tempfile::tempdir().unwrap();
    let o = kamdesk(&["normal-form", "--sites", "0,0;1,0;0,1", "--xi", "1,1,1", "--mode-bound", "4"], d.path());
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stderr_json(&o);
    assert_ne!(v["error"]["module"], "cli");
}

#[test]
fn config_file_and_flag_precedence() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    std::fs::write(&cfg, "b = 3\nbound = 8\nseed = 4\n").unwrap();
    let o = kamdesk(&["--config", cfg.to_str().unwrap(), "admissible", "--b", "2"], d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("admissible.json")).unwrap()).unwrap();
    assert_eq!(v["sites"].as_array().unwrap().len(), 2);
}

#[test]
fn resonances_csv_header() {
    let d = tempfile::tempdir().unwrap();
    let o = kamdesk(&["resonances", "--sites", "1,2;3,1", "--bound", "6"], d.path());
    assert!(o.status.success());
    let csv = std::fs::read_to_string(d.path().join("resonances.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "kind,n,m,i,j");
    assert!(csv.lines().count() > 1);
}

#[test]
fn outputs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(kamdesk(MEASURE, d.path()).status.success());
        assert!(kamdesk(&["kam-run", "--mode-bound", "4", "--steps", "1"], d.path()).status.success());
    }
    for f in ["measure.csv", "measure.json", "kam_steps.csv", "kam_steps.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let one: Vec<&str> = ["--threads", "1"].iter().chain(MEASURE).copied().collect();
    let four: Vec<&str> = ["--threads", "4"].iter().chain(MEASURE).copied().collect();
    assert!(kamdesk(&one, a.path()).status.success());
    assert!(kamdesk(&four, b.path()).status.success());
    assert_eq!(std::fs::read(a.path().join("measure.json")).unwrap(), std::fs::read(b.path().join("measure.json")).unwrap());
}

#[test]
fn out_flag_overrides_environment() {
    let (env_dir, flag_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let o = kamdesk(&["admissible", "--out", flag_dir.path().to_str().unwrap()], env_dir.path());
    assert!(o.status.success());
    assert!(flag_dir.path().join("admissible.json").exists());
    assert!(!env_dir.path().join("admissible.json").exists());
}

#[test]
fn zero_threads_rejected() {
    let d = tempfile::tempdir().unwrap();
    let o = kamdesk(&["--threads", "0", "admissible"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"]["condition"], "invalid_parameter");
}
