mod common;

use std::fs;

use common::*;
use poecaps::conv::{ConvGeometry, ConvStack};
use poecaps::io::{load_checkpoint, read_pgm, save_checkpoint, write_idx_images};
use poecaps::numerics::Rng;
use poecaps::synthetic::stroke_digits;

#[test]
fn train_conv_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("conv.poec");
    let log = run_ok(&with(
        &["train-conv", "--data", s(&tiny_data()), "--out", s(&out)],
        SMALL_CONV,
    ));
    assert_eq!(log.matches("conv epoch").count(), 2, "{log}");
    let ck = load_checkpoint(&out).unwrap();
    assert_eq!(ck.conv.unwrap().geometry.code_dims().unwrap(), (6, 6, 16));
    assert_eq!(ck.conv_config.unwrap().epochs, 2);
}

#[test]
fn missing_paths_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.poec");
    let missing = dir.path().join("nope.idx");
    assert_eq!(
        run(&["train-conv", "--data", s(&missing), "--out", s(&out)])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&["train-conv", "--out", s(&out)]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&[
            "train-caps",
            "--data",
            s(&tiny_data()),
            "--checkpoint",
            s(&missing)
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(run(&["train-conv", "--bogus"]).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn zero_learning_rate_keeps_init() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("conv.poec");
    run_ok(&[
        "train-conv",
        "--data",
        s(&tiny_data()),
        "--out",
        s(&out),
        "--seed",
        "3",
        "--hidden-channels",
        "16",
        "--epochs",
        "2",
        "--batch",
        "8",
        "--lr",
        "0",
    ]);
    let trained = load_checkpoint(&out).unwrap().conv.unwrap();
    let geometry = ConvGeometry {
        hidden_channels: 16,
        ..ConvGeometry::DEFAULT
    };
    assert_eq!(
        trained,
        ConvStack::init(geometry, &mut Rng::new(3)).unwrap()
    );
}

#[test]
fn caps_rejects_incompatible_conv() {
    let dir = tempfile::tempdir().unwrap();
    let conv = dir.path().join("conv.poec");
    run_ok(&with(
        &["train-conv", "--data", s(&tiny_data()), "--out", s(&conv)],
        SMALL_CONV,
    ));
    let small = dir.path().join("small.idx");
    write_idx_images(&stroke_digits(4, 20, &mut Rng::new(1)), &small).unwrap();
    let out = run(&[
        "train-caps",
        "--data",
        s(&small),
        "--checkpoint",
        s(&conv),
        "--out",
        s(&dir.path().join("c.poec")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shape"));

    // Hidden channels that do not group into capsules of eight.
    let odd = dir.path().join("odd.poec");
    run_ok(&[
        "train-conv",
        "--data",
        s(&tiny_data()),
        "--out",
        s(&odd),
        "--hidden-channels",
        "12",
        "--epochs",
        "1",
    ]);
    assert_eq!(
        run(&[
            "train-caps",
            "--data",
            s(&tiny_data()),
            "--checkpoint",
            s(&odd)
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn decoder_and_generate_need_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let conv = dir.path().join("conv.poec");
    run_ok(&with(
        &["train-conv", "--data", s(&tiny_data()), "--out", s(&conv)],
        SMALL_CONV,
    ));
    let out = run(&[
        "train-decoder",
        "--data",
        s(&tiny_data()),
        "--checkpoint",
        s(&conv),
        "--out",
        s(&dir.path().join("d.poec")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-caps"));
    let out = run(&[
        "generate",
        "--checkpoint",
        s(&conv),
        "--out",
        s(&dir.path().join("g.pgm")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let full = small_chain(dir.path(), "4");
    let grid = dir.path().join("grid.pgm");
    run_ok(&["generate", "--checkpoint", s(&full), "--out", s(&grid)]);
    let g = read_pgm(&grid).unwrap();
    assert_eq!((g.width, g.height), (6 * 28, 4 * 28));

    run_ok(&[
        "generate",
        "--checkpoint",
        s(&full),
        "--out",
        s(&grid),
        "--capsule",
        "3",
        "--rows",
        "2",
        "--noise-out",
        s(&dir.path().join("n.txt")),
    ]);
    let g = read_pgm(&grid).unwrap();
    assert_eq!((g.width, g.height), (28, 2 * 28));
    let noise = fs::read_to_string(dir.path().join("n.txt")).unwrap();
    assert!(noise
        .lines()
        .all(|l| l.split_whitespace().nth(2) == Some("3")));

    assert_eq!(
        run(&[
            "generate",
            "--checkpoint",
            s(&full),
            "--out",
            s(&grid),
            "--capsule",
            "6"
        ])
        .status
        .code(),
        Some(2)
    );

    // Restricted sampling without orientation statistics.
    let mut ck = load_checkpoint(&full).unwrap();
    ck.orientation = None;
    let bare = dir.path().join("bare.poec");
    save_checkpoint(&ck, &bare).unwrap();
    assert!(
        run(&["generate", "--checkpoint", s(&bare), "--out", s(&grid)])
            .status
            .success()
    );
    let out = run(&[
        "generate",
        "--checkpoint",
        s(&bare),
        "--out",
        s(&grid),
        "--restricted",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stages_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = small_chain(a.path(), "9");
    let fb = small_chain(b.path(), "9");
    for name in ["conv.poec", "caps.poec"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap()
        );
    }
    assert_eq!(fs::read(fa).unwrap(), fs::read(fb).unwrap());
}

fn max_rel_error(log: &str) -> f64 {
    log.lines()
        .find_map(|l| l.strip_prefix("max relative error "))
        .and_then(|r| r.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn gradcheck_reports_and_degrades() {
    let fine = run_ok(&["gradcheck"]);
    assert!(fine.contains("PASS"));
    assert!(fine.contains(" at W["), "{fine}");
    let coarse = run(&["gradcheck", "--eps", "1e-2"]);
    let coarse = String::from_utf8(coarse.stdout).unwrap();
    assert!(
        max_rel_error(&coarse) > 2.0 * max_rel_error(&fine),
        "{fine}\n{coarse}"
    );
    assert_eq!(run(&["gradcheck", "--eps", "0"]).status.code(), Some(2));
    // A step this large cannot meet the tolerance.
    assert_eq!(run(&["gradcheck", "--eps", "0.5"]).status.code(), Some(1));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    let out = dir.path().join("conv.poec");
    fs::write(
        &conf,
        format!(
            "# tiny run\ndata = {}\nout = {}\nepochs = 3\nhidden-channels = 8\nbatch = 8\nlr = 0.02\n",
            s(&tiny_data()),
            s(&out)
        ),
    )
    .unwrap();
    let log = run_ok(&["train-conv", "--config", s(&conf), "--epochs", "1"]);
    assert_eq!(log.matches("conv epoch").count(), 1);
    let ck = load_checkpoint(&out).unwrap();
    let cfg = ck.conv_config.unwrap();
    assert_eq!(
        (cfg.epochs, cfg.batch_size, cfg.learning_rate),
        (1, 8, 0.02)
    );
    assert_eq!(ck.conv.unwrap().geometry.hidden_channels, 8);

    fs::write(&conf, "learning_rate = 0.1\n").unwrap();
    let bad = run(&[
        "train-conv",
        "--config",
        s(&conf),
        "--data",
        s(&tiny_data()),
        "--out",
        s(&out),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown key"));
}

#[test]
fn divergence_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&with(
        &[
            "train-conv",
            "--data",
            s(&tiny_data()),
            "--out",
            s(&dir.path().join("c.poec")),
            "--lr",
            "1e300",
            "--momentum",
            "0",
        ],
        &["--hidden-channels", "8", "--epochs", "2"],
    ));
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
