#![allow(dead_code)]

//! Shared helpers for CLI integration tests.

use std::path::Path;
use std::process::{Command, Output};

pub fn vlpref_exe() -> &'static str {
    env!("CARGO_BIN_EXE_vlpref")
}

pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(vlpref_exe())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("vlpref binary runs")
}

pub fn run_ok(dir: &Path, args: &[&str]) -> Output {
    let output = run_in(dir, args);
    assert!(
        output.status.success(),
        "vlpref {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

pub fn read_json(path: &Path) -> serde_json::Value {
    let text =
        std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap()
}

pub fn write_lines(path: &Path, lines: &[serde_json::Value]) {
    let text: String = lines.iter().map(|v| v.to_string() + "\n").collect();
    std::fs::write(path, text).unwrap();
}
