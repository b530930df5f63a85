//! Exit codes, configuration layering and artifact replay through the binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixdiv"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 12] = [
    "--num-layers", "1", "--num-heads", "2", "--d-model", "16", "--d-ff", "32", "--max-len", "16", "--batch-tokens", "64",
];

fn train(data: &Path, out: &Path, steps: &str) -> i32 {
    let (src, tgt) = (data.join("train.src"), data.join("train.tgt"));
    let mut args = vec!["train", "--src", s(&src), "--tgt", s(&tgt), "--out", s(out), "--steps", steps];
    args.extend(TINY);
    code(&args)
}

/// Synthetic corpus plus a checkpoint trained for a few steps.
fn fixture(dir: &Path) -> (String, String) {
    let data = dir.join("data");
    assert_eq!(code(&["synth", "--out", s(&data), "--num-pairs", "200", "--max-len", "6", "--synonyms", "2"]), 0);
    let ckpt = dir.join("m.ckpt");
    assert_eq!(train(&data, &ckpt, "4"), 0);
    (s(&ckpt).to_string(), s(&data.join("test.src")).to_string())
}

#[test]
fn usage_and_missing_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["synth", "--out", s(dir.path()), "--min-len", "5", "--max-len", "3"]), 2);
    assert_eq!(code(&["decode", "--checkpoint", "/nonexistent.ckpt", "--input", "x", "--out", "y"]), 2);
    assert_eq!(code(&["evaluate", "--rfb", "20"]), 2);
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&["--config", s(&cfg), "synth", "--out", s(&dir.path().join("d"))]), 2);
    assert_eq!(code(&["--config", s(&dir.path().join("absent.cfg")), "gradcheck"]), 2);
}

#[test]
fn malformed_files_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("junk.ckpt");
    fs::write(&ckpt, "not a checkpoint\n").unwrap();
    let input = dir.path().join("in.src");
    fs::write(&input, "s1 s2\n").unwrap();
    let out = dir.path().join("out.hyps");
    assert_eq!(code(&["decode", "--checkpoint", s(&ckpt), "--input", s(&input), "--out", s(&out)]), 4);
    assert!(!out.exists());
}

#[test]
fn direct_eda_matches_published_point() {
    let out = run(&["evaluate", "--rfb", "25.12", "--pwb", "60.02", "--r", "27.43"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let eda: f64 = text.trim().strip_prefix("eda ").unwrap().parse().unwrap();
    assert!((eda - 18.49).abs() <= 0.01, "{text}");
}

#[test]
fn outputs_replay_through_config() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, input) = fixture(dir.path());
    let first = dir.path().join("a.hyps");
    let args = ["decode", "--checkpoint", &ckpt, "--input", &input, "--out", s(&first), "--k", "3", "--tau", "0.4", "--limit", "5"];
    assert_eq!(code(&args), 0);
    let second = dir.path().join("b.hyps");
    assert_eq!(code(&["--config", s(&first), "decode", "--out", s(&second), "--workers", "2"]), 0);
    let a = fs::read_to_string(&first).unwrap();
    assert_eq!(a, fs::read_to_string(&second).unwrap());
    assert!(a.contains("# tau = 0.4\n") && a.contains("# k = 3\n"));
    assert_eq!(a.lines().filter(|l| !l.starts_with('#')).count(), 15);

    // flags beat the replayed file
    let third = dir.path().join("c.hyps");
    assert_eq!(code(&["--config", s(&first), "decode", "--out", s(&third), "--tau", "0.9"]), 0);
    assert!(fs::read_to_string(&third).unwrap().contains("# tau = 0.9\n"));
}

#[test]
fn resumed_training_matches_one_run() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = fixture(dir.path());
    let data = dir.path().join("data");
    let once = dir.path().join("once.ckpt");
    assert_eq!(train(&data, &once, "7"), 0);
    let resumed = dir.path().join("resumed.ckpt");
    assert_eq!(code(&["train", "--resume", &ckpt, "--out", s(&resumed), "--steps", "7"]), 0);
    let paths: [&[u8]; 3] = [b"resume = ", b"out = ", b"log = "];
    let strip = |mut b: Vec<u8>| {
        for p in paths {
            b = without_line(b, p);
        }
        b
    };
    assert_eq!(strip(fs::read(&once).unwrap()), strip(fs::read(&resumed).unwrap()));
}

// Checkpoint headers record file paths; nothing else may differ.
fn without_line(mut bytes: Vec<u8>, prefix: &[u8]) -> Vec<u8> {
    let start = bytes
        .windows(prefix.len() + 1)
        .position(|w| w[0] == b'\n' && &w[1..] == prefix)
        .expect("header line")
        + 1;
    let end = start + bytes[start..].iter().position(|&b| b == b'\n').unwrap() + 1;
    bytes.drain(start..end);
    bytes
}
