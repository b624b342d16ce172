use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prvr_core::data::SyntheticSpec;

fn prvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prvr")).args(args).output().expect("spawn prvr")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_videos: 32,
        n_val_videos: 8,
        n_test_videos: 8,
        frames_per_video: 10,
        queries_per_video: 2,
        video_dim: 8,
        text_dim: 8,
        teacher_dim: 8,
        n_concepts: 16,
        ..SyntheticSpec::desk(seed)
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
}

fn synth(spec: &SyntheticSpec) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let spec_path = root.join("spec.json");
    fs::write(&spec_path, serde_json::to_string(spec).unwrap()).unwrap();
    let data = root.join("data");
    let out = prvr(&["synth", "--spec", s(&spec_path), "--out", s(&data)]);
    assert!(out.status.success(), "{}", stderr(&out));
    Fixture { _dir: dir, root, data }
}

fn write_config(root: &Path, extra: serde_json::Value) -> PathBuf {
    let mut cfg = serde_json::json!({
        "batch_size": 8,
        "max_epochs": 2,
        "patience": 2,
        "learning_rate": 1e-3,
        "model": { "hidden": 8, "heads": 2, "ff_mult": 2, "depth": 1, "max_frames": 10 },
    });
    cfg.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
    let path = root.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn synth_train_eval_inspect_end_to_end() {
    let fx = synth(&small_spec(1));
    let run = fx.root.join("run");
    let config = write_config(&fx.root, serde_json::json!({ "data": s(&fx.data), "out": s(&run) }));
    let out = prvr(&["train", "--config", s(&config), "--snapshot-epochs", "0,1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["config.resolved.json", "train_log.jsonl", "model.ckpt", "snapshots/epoch_0.ckpt", "snapshots/epoch_1.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["validation"]["sum_r"].is_number());
    }

    let report_dir = fx.root.join("report");
    let out = prvr(&["eval", "--model", s(&run.join("model.ckpt")), "--data", s(&fx.data), "--out", s(&report_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["n_videos"], 8);
    assert_eq!(report["n_queries"], 16);
    let r = &report["recall"];
    assert!(r["r1"].as_f64().unwrap() <= r["r5"].as_f64().unwrap());
    let hist = fs::read_to_string(report_dir.join("margin_histogram.csv")).unwrap();
    assert_eq!(hist.lines().next(), Some("bin_left,bin_right,pos_count,neg_count"));
    assert_eq!(hist.lines().count(), 51);
    let ranks = fs::read_to_string(report_dir.join("ranks.csv")).unwrap();
    assert_eq!(ranks.lines().count(), 17);
    let groups = fs::read_to_string(report_dir.join("mv_groups.csv")).unwrap();
    assert!(groups.starts_with("bin_lo,bin_hi,count,"));
    let counted: usize = groups
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(counted, 16);

    let targets = fx.root.join("targets");
    let out = prvr(&[
        "inspect-targets",
        "--model",
        s(&run),
        "--data",
        s(&fx.data),
        "--epochs",
        "0,1",
        "--probe-size",
        "4",
        "--out",
        s(&targets),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let lines: Vec<serde_json::Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for name in ["exploration_t2v", "exploration_v2t", "inheritance_t2v", "inheritance_v2t"] {
        let csv = fs::read_to_string(targets.join("epoch_1").join(format!("{name}.csv"))).unwrap();
        // Header plus one row per probe pair.
        assert_eq!(csv.lines().count(), 5, "{name}");
        for row in csv.lines().skip(1) {
            let sum: f64 = row.split(',').skip(1).map(|c| c.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-6, "{name}: row sums to {sum}");
        }
    }
}

#[test]
fn flags_override_config_paths_and_sigma_override_changes_fusion() {
    let fx = synth(&small_spec(2));
    let config = write_config(&fx.root, serde_json::json!({ "data": "/nonexistent", "out": "/nonexistent" }));
    let run = fx.root.join("run");
    let out = prvr(&["train", "--config", s(&config), "--data", s(&fx.data), "--out", s(&run)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["data"], s(&fx.data));
    assert_eq!(resolved["batch_size"], 8);

    let ckpt = run.join("model.ckpt");
    let default = prvr(&["eval", "--model", s(&ckpt), "--data", s(&fx.data)]);
    let only_exp = prvr(&["eval", "--model", s(&ckpt), "--data", s(&fx.data), "--sigma", "1"]);
    assert!(default.status.success() && only_exp.status.success());
    let sigma = |o: &Output| serde_json::from_slice::<serde_json::Value>(&o.stdout).unwrap()["sigma"].as_f64().unwrap();
    assert_eq!(sigma(&default), 0.7);
    assert_eq!(sigma(&only_exp), 1.0);
}

#[test]
fn input_errors_exit_with_code_two() {
    let fx = synth(&small_spec(3));
    let missing = fx.root.join("nope");

    let bad_spec = fx.root.join("bad_spec.json");
    fs::write(&bad_spec, r#"{"name": "x"}"#).unwrap();
    let o = prvr(&["synth", "--spec", s(&bad_spec), "--out", s(&fx.root.join("x"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = prvr(&["eval", "--model", s(&missing), "--data", s(&fx.data)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("prvr: "));

    let unknown = write_config(&fx.root, serde_json::json!({ "learning_rat": 0.1 }));
    let o = prvr(&["train", "--config", s(&unknown), "--data", s(&fx.data), "--out", s(&fx.root.join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rat"));

    let no_out = write_config(&fx.root, serde_json::json!({}));
    let o = prvr(&["train", "--config", s(&no_out), "--data", s(&fx.data)]);
    assert_eq!(o.status.code(), Some(2));

    // A checkpoint trained on 8-dim features cannot score 12-dim data.
    let run = fx.root.join("run");
    let cfg = write_config(&fx.root, serde_json::json!({ "max_epochs": 1 }));
    assert!(prvr(&["train", "--config", s(&cfg), "--data", s(&fx.data), "--out", s(&run)]).status.success());
    let other = synth(&SyntheticSpec {
        video_dim: 12,
        text_dim: 12,
        ..small_spec(4)
    });
    let o = prvr(&["eval", "--model", s(&run.join("model.ckpt")), "--data", s(&other.data)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = prvr(&["inspect-targets", "--model", s(&run), "--data", s(&fx.data), "--epochs", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoch 5"));

    let o = prvr(&["eval", "--model", s(&run.join("model.ckpt")), "--data", s(&fx.data), "--split", "dev"]);
    assert_eq!(o.status.code(), Some(2));

    let o = Command::new(env!("CARGO_BIN_EXE_prvr"))
        .args(["eval", "--model", s(&run.join("model.ckpt")), "--data", s(&fx.data)])
        .env("PRVR_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_feature_file_names_the_file() {
    let fx = synth(&small_spec(5));
    let victim = fx.data.join("video").join("v00000.prvf");
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() - 3]).unwrap();
    let cfg = write_config(&fx.root, serde_json::json!({}));
    let o = prvr(&["train", "--config", s(&cfg), "--data", s(&fx.data), "--out", s(&fx.root.join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("v00000.prvf"), "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_with_code_three() {
    let fx = synth(&small_spec(6));
    let run = fx.root.join("run");
    let cfg = write_config(&fx.root, serde_json::json!({ "learning_rate": 1e300 }));
    let o = prvr(&["train", "--config", s(&cfg), "--data", s(&fx.data), "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("nonfinite.json")).unwrap()).unwrap();
    assert_eq!(dump["video_ids"].as_array().unwrap().len(), 8);
}
