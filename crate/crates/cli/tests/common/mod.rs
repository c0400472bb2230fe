#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_mvre");

pub fn mvre(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn mvre")
}

/// Runs `mvre` and fails with its stderr unless it exits 0.
pub fn mvre_ok(args: &[&str]) -> String {
    let out = mvre(args);
    assert!(
        out.status.success(),
        "mvre {args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

pub fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).expect("valid json")
}

pub fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    mvre_ok(&args);
}
