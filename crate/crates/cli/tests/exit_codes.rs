//! Process exit codes and artifact headers of the `pacmpdm` binary.

use std::process::{Command, Output};

fn run(dir: &std::path::Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pacmpdm")).arg("--out").arg(dir).args(args).output().unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["bogus"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"sim":{"episodes":3,"typo":1}}"#).unwrap();
    let out = run(dir.path(), &["--config", cfg.to_str().unwrap(), "gradcheck", "--probes", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("typo"));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["evaluate", "--checkpoint", "/nonexistent/checkpoint.txt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_policy_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["simulate", "--policy", "fastest"]).status.code(), Some(2));
}

#[test]
fn gradcheck_output_carries_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--seed", "4", "gradcheck", "--probes", "3"]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    let first = text.lines().next().unwrap();
    assert!(first.starts_with(&format!("# pacmpdm {} seed=4 config=", env!("CARGO_PKG_VERSION"))), "{first}");
    assert_eq!(text.lines().nth(1), Some("suite,probes,max_rel_err,tolerance,passed"));
    assert_eq!(text.lines().count(), 6);
}
