use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partlatent"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .expect("JSON error line");
    serde_json::from_str(line).unwrap()
}

fn shape_count(dir: &Path) -> u64 {
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    manifest["shapes"]
        .as_array()
        .map(|a| a.len() as u64)
        .unwrap_or_else(|| manifest["shapes"].as_u64().unwrap())
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["--help"]).status.success());
    assert!(run(dir.path(), &["--version"]).status.success());
    assert!(run(dir.path(), &["train", "--help"]).status.success());
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["make-data", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"]["code"], "usage");
    assert_eq!(run(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["make-data", "--n", "many"]).status.code(), Some(1));
    // Required flag missing.
    let out = run(dir.path(), &["fit-ssm", "--out", "ssm"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("--data"));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["fit-ssm", "--data", "missing", "--out", "ssm"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_line(&out);
    assert_eq!(e["error"]["code"], "data");
    assert_eq!(e["error"]["exit"], 2);
    std::fs::write(dir.path().join("model.plck"), b"not a checkpoint").unwrap();
    let out = run(dir.path(), &["sample", "--model", "model.plck", "--out", "s"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.conf"),
        "# small set\nn = 5\npoints = 16\nout = from_config\n",
    )
    .unwrap();
    let out = run(dir.path(), &["--config", "run.conf", "make-data", "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(shape_count(&dir.path().join("from_config")), 5);

    let out = run(
        dir.path(),
        &["--config", "run.conf", "make-data", "--n", "3", "--out", "from_flags"],
    );
    assert!(out.status.success());
    assert_eq!(shape_count(&dir.path().join("from_flags")), 3);
}

#[test]
fn bad_config_files_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "n 5\n").unwrap();
    let out = run(dir.path(), &["--config", "bad.conf", "make-data", "--out", "d"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("line 1"));

    std::fs::write(dir.path().join("typed.conf"), "n = lots\n").unwrap();
    let out = run(dir.path(), &["--config", "typed.conf", "make-data", "--out", "d"]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(dir.path(), &["--config", "absent.conf", "make-data", "--out", "d"]);
    assert_eq!(out.status.code(), Some(1));
}
