#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_poecaps"))
}

/// Runs the binary with `args`, echoing its output for failing tests.
pub fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!(
            "poecaps {} -> {:?}\n{}{}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
    }
    out
}

pub fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "poecaps {} failed", args.join(" "));
    String::from_utf8(out.stdout).unwrap()
}

pub fn tiny_data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny-images.idx")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small-architecture flags so the whole chain takes seconds.
pub const SMALL_CONV: &[&str] = &[
    "--hidden-channels",
    "16",
    "--epochs",
    "2",
    "--batch",
    "8",
    "--lr",
    "0.05",
];
pub const SMALL_CAPS: &[&str] = &[
    "--capsules",
    "6",
    "--capsule-dim",
    "8",
    "--epochs",
    "3",
    "--batch",
    "8",
    "--lr",
    "0.05",
    "--init-std",
    "0.05",
];
pub const SMALL_DEC: &[&str] = &[
    "--epochs",
    "3",
    "--batch",
    "8",
    "--lr",
    "0.05",
    "--init-std",
    "0.05",
];

pub fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

/// Trains the small chain into `dir`, returning the final checkpoint path.
pub fn small_chain(dir: &Path, seed: &str) -> PathBuf {
    let data = tiny_data();
    let conv = dir.join("conv.poec");
    let caps = dir.join("caps.poec");
    let full = dir.join("full.poec");
    run_ok(&with(
        &[
            "train-conv",
            "--data",
            s(&data),
            "--out",
            s(&conv),
            "--seed",
            seed,
        ],
        SMALL_CONV,
    ));
    run_ok(&with(
        &[
            "train-caps",
            "--data",
            s(&data),
            "--checkpoint",
            s(&conv),
            "--out",
            s(&caps),
            "--seed",
            seed,
        ],
        SMALL_CAPS,
    ));
    run_ok(&with(
        &[
            "train-decoder",
            "--data",
            s(&data),
            "--checkpoint",
            s(&caps),
            "--out",
            s(&full),
            "--seed",
            seed,
        ],
        SMALL_DEC,
    ));
    full
}
