use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn zwm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zwm")).args(args).env("RUST_LOG", "warn").output().expect("spawn zwm")
}

fn ok(args: &[&str]) -> String {
    let out = zwm(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "batch_size": 4,
  "epochs": 1,
  "checkpoint_every": 1,
  "model": {"fe_dim": 16, "fe_depth": 2, "fe_heads": 4, "d_dim": 16, "d_depth": 2, "d_heads": 4,
            "ff_mult": 2, "r_widths": [2, 2, 2, 2], "r_bottleneck": 8}
}"#;

/// Synthetic data plus a one-epoch tiny checkpoint.
fn setup(root: &Path) {
    ok(&["synth-data", "--out", s(&root.join("data")), "--n", "20", "--seed", "1"]);
    fs::write(root.join("tiny.json"), TINY).unwrap();
    ok(&[
        "train-features",
        "--config",
        s(&root.join("tiny.json")),
        "--data",
        s(&root.join("data")),
        "--out",
        s(&root.join("run")),
        "--seed",
        "3",
    ]);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(zwm(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(zwm(&["distort", "--kind", "jpeg", "--bogus"]).status.code(), Some(2));
    assert_eq!(zwm(&["extract", "--image", "x.png"]).status.code(), Some(2));
    assert_eq!(zwm(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.png");
    let out = zwm(&[
        "distort",
        "--kind",
        "jpeg",
        "--quality",
        "50",
        "--in",
        s(&missing),
        "--out",
        s(&dir.path().join("o.png")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.png"));
    let out = zwm(&["distort", "--kind", "jpeg", "--in", s(&missing), "--out", "o.png"]);
    assert_eq!(out.status.code(), Some(1), "missing quality parameter");
}

#[test]
fn distort_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth-data", "--out", s(&data), "--n", "1"]);
    let input = data.join("00000_circle.png");
    for (kind, extra) in [
        ("jpeg", vec!["--quality", "50"]),
        ("gaussian_noise", vec!["--sigma", "0.05"]),
        ("rotation", vec!["--degrees", "-15"]),
    ] {
        let (a, b) = (dir.path().join(format!("{kind}_a.png")), dir.path().join(format!("{kind}_b.png")));
        for out in [&a, &b] {
            let mut args = vec!["distort", "--kind", kind, "--in", s(&input), "--out", s(out), "--seed", "7"];
            args.extend(extra.iter().copied());
            ok(&args);
        }
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "{kind}");
        assert_ne!(fs::read(&a).unwrap(), fs::read(&input).unwrap(), "{kind}");
    }
}

#[test]
fn synth_data_writes_labels() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth-data", "--out", s(dir.path()), "--n", "12"]);
    let labels = fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 13);
    assert!(labels.contains("00011_circle.png,1") || labels.lines().nth(12).unwrap().ends_with(",1"));
}

#[test]
fn train_register_extract_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    setup(root);
    let ckpt = root.join("run/checkpoints/epoch_0001");
    assert!(ckpt.join("manifest.json").exists());
    assert_eq!(fs::read_to_string(root.join("run/losses.csv")).unwrap().lines().count(), 6);

    let image = root.join("data/00003_hstripes.png");
    let before = fs::read(&image).unwrap();
    let reg = root.join("registry");
    let hex = "2a5f00c3";
    let id =
        ok(&["register", "--image", s(&image), "--bits", hex, "--ckpt", s(&root.join("run")), "--registry", s(&reg)]);
    let id = id.trim();
    let out = ok(&["extract", "--image", s(&image), "--record", id, "--ckpt", s(&ckpt), "--registry", s(&reg)]);
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), hex);
    assert_eq!(lines.next().unwrap().split(' ').count(), 30);
    assert_eq!(fs::read(&image).unwrap(), before, "image bytes changed");

    // registering the same pair again is a store conflict
    let again = zwm(&["register", "--image", s(&image), "--bits", hex, "--ckpt", s(&ckpt), "--registry", s(&reg)]);
    assert_eq!(again.status.code(), Some(1));

    let grid = root.join("grid.json");
    fs::write(&grid, r#"[{"kind": "identity", "params": {}}, {"kind": "jpeg", "params": {"quality": 50}}]"#).unwrap();
    let marks = root.join("wm.json");
    fs::write(&marks, format!(r#"[{{"image": "{}", "record": "{id}", "bits": "{hex}"}}]"#, s(&image))).unwrap();
    let eval_args = |out: &Path| {
        vec![
            "evaluate".to_string(),
            "--ckpt".into(),
            s(&ckpt).into(),
            "--data".into(),
            s(&root.join("data")).into(),
            "--out".into(),
            s(out).into(),
            "--grid".into(),
            s(&grid).into(),
            "--registry".into(),
            s(&reg).into(),
            "--watermarks".into(),
            s(&marks).into(),
            "--plots".into(),
            "--seed".into(),
            "4".into(),
        ]
    };
    let (e1, e2) = (root.join("eval1"), root.join("eval2"));
    for e in [&e1, &e2] {
        let args = eval_args(e);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
    for f in ["report_invariance.csv", "report_robustness.csv", "report_summary.json", "report_robustness.json"] {
        assert_eq!(fs::read(e1.join(f)).unwrap(), fs::read(e2.join(f)).unwrap(), "{f} differs between runs");
    }
    assert!(e1.join("report_heatmap.png").exists());
    let rob = fs::read_to_string(e1.join("report_robustness.csv")).unwrap();
    assert!(rob.lines().nth(1).unwrap().ends_with(",0,1"), "{rob}");
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(e1.join("report_summary.json")).unwrap()).unwrap();
    assert!(summary["off_diagonal_cosine"].as_f64().is_some());
    assert!(summary["probe"]["top1"].as_f64().is_some());
}

#[test]
fn ablate_switches_branches_off() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&["synth-data", "--out", s(&root.join("data")), "--n", "4"]);
    fs::write(root.join("tiny.json"), TINY).unwrap();
    let (cfg_path, data) = (root.join("tiny.json"), root.join("data"));
    let base = ["--config", s(&cfg_path), "--data", s(&data)];
    assert_eq!(zwm(&[&["ablate"][..], &base, &["--out", s(&root.join("x"))]].concat()).status.code(), Some(1));
    ok(&[&["ablate", "--no-reconstructor"][..], &base, &["--out", s(&root.join("nor"))]].concat());
    let cfg: serde_json::Value = serde_json::from_slice(&fs::read(root.join("nor/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["use_reconstructor"], false);
    assert_eq!(cfg["use_adversarial"], true);
    let log = fs::read_to_string(root.join("nor/losses.csv")).unwrap();
    assert!(log.lines().nth(1).unwrap().split(',').nth(3).unwrap().parse::<f64>().unwrap() == 0.0);
}
