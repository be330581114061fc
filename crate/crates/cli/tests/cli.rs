use std::path::Path;
use std::process::{Command, Output};

fn ulsad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ulsad"))
        .current_dir(dir)
        .args(["--log", "warn"])
        .args(args)
        .output()
        .expect("run ulsad")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(o: Output) -> String {
    assert_eq!(
        code(&o),
        0,
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

const RUN: &str = r#"
output_dir = "out"
[data]
root = "data"
[backbone]
architecture = "resnet18"
feature_width = 8
image_size = 64
weights = { kind = "random", seed = 1 }
[train]
epochs = 2
batch_size = 4
"#;

/// A tiny synthetic dataset plus a run config, in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(ulsad(
        dir.path(),
        &[
            "synth-gen",
            "-o",
            "data",
            "--train",
            "6",
            "--validation",
            "3",
            "--test-good",
            "3",
            "--structural",
            "3",
            "--logical",
            "3",
        ],
    ));
    std::fs::write(dir.path().join("run.toml"), RUN).unwrap();
    dir
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![r.headers().unwrap().iter().map(String::from).collect()];
    rows.extend(r.records().map(|x| x.unwrap().iter().map(String::from).collect()));
    rows
}

#[test]
fn full_pipeline() {
    let ws = workspace();
    let d = ws.path();
    assert!(d.join("data/scene.toml").is_file());

    ok(ulsad(d, &["train", "-c", "run.toml"]));
    let ckpt = d.join("out/model.safetensors");
    assert!(ckpt.is_file());
    assert!(d.join("out/train_config.toml").is_file());
    let epochs = csv_rows(&d.join("out/train_epochs.csv"));
    assert_eq!(epochs[0], ["epoch", "local", "global", "coupling", "total"]);
    assert_eq!(epochs.len(), 3);

    // the resolved config reproduces the run
    let dumped = std::fs::read_to_string(d.join("out/train_config.toml")).unwrap();
    assert!(dumped.contains("[frn]") && dumped.contains("[global_ae]"));

    let cal = ok(ulsad(d, &["calibrate", "-c", "run.toml"]));
    assert!(cal.contains("calibrated on 3 images"));
    let first = std::fs::read(&ckpt).unwrap();
    ok(ulsad(d, &["calibrate", "-c", "run.toml"]));
    assert_eq!(
        first,
        std::fs::read(&ckpt).unwrap(),
        "calibration rerun changed the checkpoint"
    );

    let table = ok(ulsad(d, &["evaluate", "-c", "run.toml"]));
    let header = table.lines().next().unwrap();
    for col in ["Image AUROC", "Pixel AUROC", "AUPRO"] {
        assert!(header.contains(col), "{table}");
    }
    for row in ["logical_anomalies", "structural_anomalies", "all", "mean"] {
        assert!(
            table.lines().any(|l| l.contains(row)),
            "missing {row} row:\n{table}"
        );
    }
    let results = csv_rows(&d.join("out/results.csv"));
    assert_eq!(results[0], ["id", "score", "label"]);
    assert_eq!(results.len(), 1 + 9);
    assert!(results[1..].iter().all(|r| r[2] == "0" || r[2] == "1"));
    assert!(results[1..]
        .iter()
        .all(|r| r[1].parse::<f64>().unwrap().is_finite()));
    assert!(d.join("out/metrics.csv").is_file());

    let imgs = ["data/test/good/000.png", "data/test/logical_anomalies/001.png"];
    let mut args = vec![
        "predict",
        "-c",
        "run.toml",
        "-o",
        "pred",
        "--checkpoint",
        "out/model.safetensors",
        "--emit-branch-maps",
    ];
    args.extend(imgs);
    let out = ok(ulsad(d, &args));
    assert_eq!(out.lines().count(), 2);
    for stem in ["000", "001"] {
        for suffix in ["", "_local", "_global", "_combined"] {
            assert!(
                d.join(format!("pred/{stem}{suffix}.npy")).is_file(),
                "{stem}{suffix}.npy"
            );
            assert!(
                d.join(format!("pred/{stem}{suffix}.png")).is_file(),
                "{stem}{suffix}.png"
            );
        }
    }
    let scores = csv_rows(&d.join("pred/scores.csv"));
    assert_eq!(scores[0], ["id", "score", "label"]);
    assert_eq!(scores[1][2], "");
    assert!(d.join("pred/predict_config.toml").is_file());

    // without the flag only the combined map is written
    ok(ulsad(
        d,
        &[
            "predict",
            "-c",
            "run.toml",
            "-o",
            "pred2",
            "--checkpoint",
            "out/model.safetensors",
            imgs[0],
        ],
    ));
    assert!(d.join("pred2/000.npy").is_file());
    assert!(!d.join("pred2/000_local.npy").exists());
}

#[test]
fn local_only_training_logs_zero_global_terms() {
    let ws = workspace();
    let d = ws.path();
    ok(ulsad(
        d,
        &["train", "-c", "run.toml", "--use-global", "false", "-o", "local"],
    ));
    let steps = csv_rows(&d.join("local/train_steps.csv"));
    assert_eq!(
        steps[0],
        ["epoch", "batch", "local", "global", "coupling", "total"]
    );
    assert!(steps.len() > 1);
    for r in &steps[1..] {
        assert_eq!(r[3].parse::<f64>().unwrap(), 0.0);
        assert_eq!(r[4].parse::<f64>().unwrap(), 0.0);
        assert_eq!(r[2], r[5]);
    }
}

#[test]
fn flags_override_the_config_file() {
    let ws = workspace();
    let d = ws.path();
    ok(ulsad(
        d,
        &[
            "train",
            "-c",
            "run.toml",
            "--epochs",
            "1",
            "--set",
            "train.batch_size=2",
            "-o",
            "o1",
        ],
    ));
    let dumped = std::fs::read_to_string(d.join("o1/train_config.toml")).unwrap();
    let v: toml::Table = toml::from_str(&dumped).unwrap();
    assert_eq!(v["train"]["epochs"].as_integer(), Some(1));
    assert_eq!(v["train"]["batch_size"].as_integer(), Some(2));
    assert_eq!(csv_rows(&d.join("o1/train_epochs.csv")).len(), 2);
}

#[test]
fn error_exit_codes() {
    let ws = workspace();
    let d = ws.path();
    // usage
    assert_eq!(code(&ulsad(d, &["train", "--no-such-flag"])), 1);
    assert_eq!(code(&ulsad(d, &["frobnicate"])), 1);
    assert_eq!(code(&ulsad(d, &["--help"])), 0);
    // unknown config keys, in the file or through --set
    std::fs::write(d.join("bad.toml"), format!("{RUN}\nmystery = 1\n")).unwrap();
    assert_eq!(code(&ulsad(d, &["train", "-c", "bad.toml"])), 1);
    assert_eq!(
        code(&ulsad(d, &["train", "-c", "run.toml", "--set", "train.epoch=3"])),
        1
    );
    // alpha >= beta
    let o = ulsad(
        d,
        &["calibrate", "-c", "run.toml", "--alpha", "0.99", "--beta", "0.9"],
    );
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
    // missing data
    let o = ulsad(d, &["train", "-c", "run.toml", "--data", "nowhere"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
    let empty = d.join("empty");
    std::fs::create_dir_all(empty.join("test")).unwrap();
    assert_eq!(
        code(&ulsad(d, &["evaluate", "-c", "run.toml", "--data", "empty"])),
        2
    );
    assert_eq!(code(&ulsad(d, &["predict", "-c", "run.toml", "missing.png"])), 2);
    // no checkpoint yet
    assert_eq!(code(&ulsad(d, &["calibrate", "-c", "run.toml"])), 2);
}

#[test]
fn evaluate_requires_calibration() {
    let ws = workspace();
    let d = ws.path();
    ok(ulsad(d, &["train", "-c", "run.toml", "--epochs", "1"]));
    let o = ulsad(d, &["evaluate", "-c", "run.toml"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("calibrate"));
}
