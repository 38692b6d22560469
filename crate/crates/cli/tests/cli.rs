use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 3

[architecture]
preset = "mlp-small"
hidden = [12]

[dataset]
kind = "synth"
classes = 3
per_class = 150
dims = 6
separation = 3.0

[train]
max_epochs = 2
batch_size = 16

[grid]
resolution_a = 5
resolution_b = 5

[eval]
n = 40

[imp]
rounds = 1
prune_fraction = 0.5
epochs_per_round = 1

[render]
width = 30
height = 30
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lottery-landscape"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup(dir: &Path) -> String {
    let cfg = dir.join("exp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    cfg.to_str().unwrap().to_string()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn train_surface_and_worker_invariance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out_dir = dir.path().join("run");
    let out = out_dir.to_str().unwrap();
    let stdout = ok(&run(&["train", "--config", &cfg, "--out", out]));
    assert!(stdout.lines().any(|l| l.starts_with("epoch 0 train_loss")));
    let summary: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert!(summary["test_accuracy"].as_f64().unwrap() > 0.0);
    assert!(out_dir.join("checkpoint.lt").exists());
    assert!(out_dir.join("train_report.lt").exists());

    let ckpt = out_dir.join("checkpoint.lt");
    let mut surfaces = Vec::new();
    for workers in ["1", "8"] {
        let sdir = dir.path().join("surface");
        ok(&run(&[
            "surface",
            "--config",
            &cfg,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--workers",
            workers,
            "--out",
            sdir.to_str().unwrap(),
        ]));
        for name in ["surface.lt", "surface.tsv", "surface.ppm", "surface_contours.txt"] {
            assert!(sdir.join(name).exists(), "{name} missing");
        }
        surfaces.push(fs::read(sdir.join("surface.lt")).unwrap());
    }
    assert!(surfaces[0] == surfaces[1], "surface bytes depend on the worker count");
}

#[test]
fn sweeps_and_comparison_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = dir.path().join("sweeps");
    let o = out.to_str().unwrap();
    ok(&run(&["sweep-evalcount", "--config", &cfg, "--out", o, "--counts", "5,30"]));
    ok(&run(&["sweep-batchsize", "--config", &cfg, "--out", o, "--sizes", "8,64"]));
    let stdout = ok(&run(&["imp-compare", "--config", &cfg, "--out", o, "--resolution", "3"]));
    let report: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    for name in [
        "sweep_evalcount.lt",
        "sweep_evalcount.json",
        "surface_n5.lt",
        "surface_n30.ppm",
        "sweep_batchsize.json",
        "checkpoint_bs64.lt",
        "comparison.lt",
        "comparison.json",
        "imp/surface_r1.lt",
        "random/surface_r1.tsv",
    ] {
        assert!(out.join(name).exists(), "{name} missing");
    }
}

#[test]
fn errors_are_one_json_line_and_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let missing = dir.path().join("nope.lt");
    let out = run(&["surface", "--config", &cfg, "--checkpoint", missing.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1);
    let err: serde_json::Value = serde_json::from_str(stderr.trim_end()).unwrap();
    assert!(err["error"].is_string());
    assert!(err["message"].as_str().unwrap().contains("nope.lt"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlearning_rat = 0.1\n").unwrap();
    let out = run(&["train", "--config", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim_end()).unwrap();
    assert!(err["message"].as_str().unwrap().contains("learning_rat"));
}
