use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dpmformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpmformer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A two-pair, 32×32, one-epoch run of a very narrow model.
fn tiny_config(dir: &Path, base_channels: usize) -> std::path::PathBuf {
    let cfg = format!(
        r#"{{
  "model": {{ "backbone": {{ "base_channels": {base_channels}, "blocks_per_level": [1, 1, 1] }} }},
  "train": {{ "epochs": 1, "batch_size": 1, "crop": 32, "lr_max": 1e-3, "checkpoint_every": 1 }},
  "data": {{ "synthetic": {{ "count": 2, "size": 32 }} }},
  "output_dir": "run_{base_channels}"
}}"#
    );
    let path = dir.join(format!("tiny_{base_channels}.json"));
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn make_data_writes_pairs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("set");
    let o = dpmformer(&[
        "make-data",
        "--out-dir",
        p(&out),
        "--count",
        "3",
        "--size",
        "32",
        "--seed",
        "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for sub in ["rainy", "clean"] {
        assert_eq!(fs::read_dir(out.join(sub)).unwrap().count(), 3);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["pairs"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["generator"]["seed"], 5);
}

#[test]
fn make_data_rejects_bad_rain_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let o = dpmformer(&[
        "make-data",
        "--out-dir",
        p(dir.path()),
        "--density",
        "2.0",
        "--intensity=-1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("2 problem(s)"), "{}", stderr(&o));
}

#[test]
fn train_writes_run_artifacts_then_derain_and_eval_consume_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 4);
    let o = dpmformer(&["train", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run_4");
    for f in [
        "config.resolved.json",
        "train_log.jsonl",
        "metrics.json",
        "final.dpm",
        "checkpoints/epoch_0001.dpm",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let resolved = fs::read_to_string(run.join("config.resolved.json")).unwrap();
    assert!(resolved.contains("\"lambda2\": 0.05"));

    // Derain a directory containing an extent that is not a multiple of 16.
    let set = dir.path().join("set");
    let o = dpmformer(&[
        "make-data",
        "--out-dir",
        p(&set),
        "--count",
        "2",
        "--size",
        "40",
    ]);
    assert!(o.status.success());
    let pred = dir.path().join("pred");
    let o = dpmformer(&[
        "derain",
        "--checkpoint",
        p(&run.join("final.dpm")),
        "--in",
        p(&set.join("rainy")),
        "--out",
        p(&pred),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(&pred).unwrap().count(), 2);

    let o = dpmformer(&[
        "eval",
        "--pred-dir",
        p(&pred),
        "--gt-dir",
        p(&set.join("clean")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["count"], 2);
    assert!(report["psnr"].as_f64().unwrap() > 10.0);

    // Resuming with a different architecture is a mismatch.
    let other = tiny_config(dir.path(), 8);
    let o = dpmformer(&[
        "train",
        "--config",
        p(&other),
        "--resume",
        p(&run.join("final.dpm")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn eval_reports_inf_for_identical_images_and_rejects_unmatched_names() {
    let dir = tempfile::tempdir().unwrap();
    let set = dir.path().join("set");
    assert!(dpmformer(&[
        "make-data",
        "--out-dir",
        p(&set),
        "--count",
        "2",
        "--size",
        "32"
    ])
    .status
    .success());
    let clean = set.join("clean");
    let o = dpmformer(&["eval", "--pred-dir", p(&clean), "--gt-dir", p(&clean)]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["psnr"], "inf");
    assert_eq!(report["ssim"], 1.0);

    let partial = dir.path().join("partial");
    fs::create_dir_all(&partial).unwrap();
    fs::copy(clean.join("scene_00.png"), partial.join("scene_00.png")).unwrap();
    let o = dpmformer(&["eval", "--pred-dir", p(&partial), "--gt-dir", p(&clean)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("scene_01.png"));
}

#[test]
fn invalid_configuration_lists_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(
        &path,
        r#"{"model": {"backbone": {"base_channels": 7}}, "train": {"crop": 20, "lr": 1}, "data": {}}"#,
    )
    .unwrap();
    let o = dpmformer(&["train", "--config", p(&path)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("4 problem(s)"), "{err}");
    for needle in ["train.lr", "base_channels", "train.crop", "data:"] {
        assert!(err.contains(needle), "missing {needle} in {err}");
    }
}

#[test]
fn gradcheck_selects_suites() {
    let o = dpmformer(&["gradcheck", "--module", "gdfn"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| !l.starts_with("FAIL")));
    assert_eq!(
        dpmformer(&["gradcheck", "--module", "nope"]).status.code(),
        Some(2)
    );
}

#[test]
fn params_reports_both_final_widths() {
    let o = dpmformer(&["params"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("final width Base"));
    assert!(s.contains("final width Double"));
}

#[test]
fn diverging_run_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("diverge.json");
    fs::write(
        &path,
        r#"{"model": {"backbone": {"base_channels": 4, "blocks_per_level": [1, 1, 1]}},
            "train": {"epochs": 3, "batch_size": 1, "crop": 32, "lr_max": 1e30, "lr_min": 1e30,
                      "eval_every": 0, "checkpoint_every": 0},
            "data": {"synthetic": {"count": 2, "size": 32}}, "output_dir": "out"}"#,
    )
    .unwrap();
    let o = dpmformer(&["train", "--config", p(&path)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite loss at step"));
}
