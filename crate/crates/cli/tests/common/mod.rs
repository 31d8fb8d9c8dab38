#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

/// Runs the binary in `cwd` and returns its output.
pub fn cli(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffrefine"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs the binary and fails the test unless it exits with 0.
pub fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = cli(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 output")
}

/// gen-data, pretrain and refine with `config` into `run_dir`.
pub fn train_pipeline(cwd: &Path, config: &Path, run_dir: &Path, extra: &[&str]) {
    let base = ["-c", config.to_str().unwrap(), "--run-dir", run_dir.to_str().unwrap()];
    for cmd in [&["gen-data"][..], &["train", "--stage", "pretrain"], &["train", "--stage", "refine"]] {
        let args: Vec<&str> = base.iter().chain(extra).chain(cmd).copied().collect();
        ok(cwd, &args);
    }
}

/// Runs a subcommand with `config` against `run_dir`.
pub fn in_run(cwd: &Path, config: &Path, run_dir: &Path, args: &[&str]) -> String {
    let base = ["-c", config.to_str().unwrap(), "--run-dir", run_dir.to_str().unwrap()];
    let all: Vec<&str> = base.iter().chain(args).copied().collect();
    ok(cwd, &all)
}
