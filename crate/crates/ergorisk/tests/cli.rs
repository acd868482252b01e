//! Black-box checks of the compiled binary: exit codes, output format,
//! and byte-level determinism of the user-facing commands.

use std::fs;
use std::process::{Command, Output};

use ergorisk::pose::write_jsonl;
use ergorisk::synth::{figure_to_skeleton, FigureSpec};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ergorisk"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn write_upright_fixture(dir: &std::path::Path) -> std::path::PathBuf {
    let skeleton = figure_to_skeleton(&FigureSpec::upright()).unwrap();
    let path = dir.join("upright.jsonl");
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &[skeleton]).unwrap();
    fs::write(&path, buf).unwrap();
    path
}

#[test]
fn help_exits_cleanly() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("Usage"), "help text missing usage section:\n{text}");
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = run(&["score"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("--in"), "error should name the missing flag:\n{err}");
}

#[test]
fn unreadable_input_is_an_io_error() {
    let out = run(&["score", "--in", "/nonexistent/skeletons.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn scoring_an_upright_posture_reports_class_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_upright_fixture(dir.path());
    let out = run(&["score", "--in", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let line = text.lines().next().expect("one line per skeleton");
    assert!(line.ends_with("\"class\":1"), "unexpected score line: {line}");
}

#[test]
fn score_output_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_upright_fixture(dir.path());
    let a = run(&["score", "--in", path.to_str().unwrap(), "--json"]);
    let b = run(&["score", "--in", path.to_str().unwrap(), "--json"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn synth_then_annotate_round_trips_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = run(&["synth", "--n", "6", "--out", data.to_str().unwrap(), "--size", "32", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for name in ["manifest.jsonl", "skeletons.jsonl", "synth-00000.ppm", "synth-00005.ppm"] {
        assert!(data.join(name).exists(), "missing generated file {name}");
    }

    let skel = data.join("skeletons.jsonl");
    let first = dir.path().join("labels_a.jsonl");
    let second = dir.path().join("labels_b.jsonl");
    for target in [&first, &second] {
        let out = run(&["annotate", "--in", skel.to_str().unwrap(), "--out", target.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(&first).unwrap();
    let b = fs::read(&second).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "annotation files differ between runs");

    let regen = dir.path().join("data2");
    let out = run(&["synth", "--n", "6", "--out", regen.to_str().unwrap(), "--size", "32", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        fs::read(data.join("manifest.jsonl")).unwrap(),
        fs::read(regen.join("manifest.jsonl")).unwrap(),
        "same seed must reproduce the manifest byte for byte"
    );
}

#[test]
fn selftest_passes() {
    let out = run(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("PASS"), "selftest should report its checks:\n{text}");
    assert!(!text.contains("FAIL"), "selftest reported a failure:\n{text}");
}
