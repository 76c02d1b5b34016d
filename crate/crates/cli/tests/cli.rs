use std::path::Path;
use std::process::{Command, Output};

fn i2p(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_i2p"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("I2P_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = i2p(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn out_of_range_alpha_is_a_config_error() {
    let out = i2p(&["adapt", "--alpha", "1.5", "--source", "s.ckpt", "--data", "d", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
}

#[test]
fn empty_data_directory_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.ckpt");
    ok(&["pretrain", "--arch", "micro", "--iters", "1", "--batch-size", "2", "--out", p(&src)]);
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = i2p(&["adapt", "--source", p(&src), "--data", p(&empty), "--out", p(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_lists_every_key() {
    let out = ok(&["config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["alpha", "lambda", "loss_ratio_r", "learning_rate", "batch_size", "iterations", "seed"] {
        assert!(text.contains(key), "{key}");
    }
}

#[test]
fn micro_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let src = d.join("src.ckpt");
    let data = d.join("data");
    let run = d.join("run");
    let samples = d.join("samples");
    ok(&["pretrain", "--arch", "micro", "--iters", "3", "--batch-size", "2", "--out", p(&src)]);
    ok(&["synth-data", "--domain", "two-tone-shapes-hue", "--count", "5", "--size", "4", "--out", p(&data)]);
    ok(&[
        "adapt", "--source", p(&src), "--data", p(&data), "--out", p(&run), "--iters", "4", "--batch-size", "2",
        "--checkpoint-every", "2", "--grid-cols", "3",
    ]);
    for f in ["config.txt", "loss.csv", "diagnostics.csv", "grid.png", "checkpoints/target.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    ok(&[
        "adapt", "--source", p(&src), "--data", p(&data), "--out", p(&d.join("resumed")), "--iters", "4",
        "--batch-size", "2", "--checkpoint-every", "2", "--grid-cols", "3", "--resume",
        p(&run.join("checkpoints/state_000002.ckpt")),
    ]);
    assert_eq!(std::fs::read_to_string(d.join("resumed/loss.csv")).unwrap(), csv);

    ok(&[
        "generate", "--ckpt", p(&run.join("checkpoints/target.ckpt")), "--n", "6", "--cols", "3", "--out",
        p(&d.join("grid.png")), "--images-dir", p(&samples),
    ]);
    assert!(d.join("grid.png").is_file());
    assert_eq!(std::fs::read_dir(&samples).unwrap().count(), 6);

    let report = d.join("report.json");
    ok(&["evaluate", "--real", p(&data), "--fake", p(&samples), "--resolution", "8", "--out", p(&report)]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["fid", "intra_lpips", "feature_cosine", "n_real", "n_fake"] {
        assert!(json.get(key).is_some(), "{key} in {json}");
    }
    assert!(json["fid"].as_f64().unwrap() >= 0.0);
}

#[test]
fn ablate_writes_one_run_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let src = d.join("src.ckpt");
    let data = d.join("data");
    ok(&["pretrain", "--arch", "micro", "--iters", "1", "--batch-size", "2", "--out", p(&src)]);
    ok(&["synth-data", "--domain", "two-tone-shapes-hue", "--count", "3", "--size", "4", "--out", p(&data)]);
    let out = ok(&[
        "ablate", "--source", p(&src), "--data", p(&data), "--out", p(&d.join("sweep")), "--iters", "2",
        "--batch-size", "2", "--grid-cols", "2", "--key", "alpha", "--values", "0.1,0.9",
    ]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
    assert!(d.join("sweep/alpha=0.1/grid.png").is_file());
    assert!(d.join("sweep/alpha=0.9/grid.png").is_file());
}
