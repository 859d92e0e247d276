use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use palmscan::raster::{write_png, GeoTransform, Orthomosaic};
use serde_json::Value;

fn palmscan(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_palmscan"));
    c.args(args).env_remove("PALMSCAN_HOME").env("RUST_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    palmscan(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let v: Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(v["status"], "ok");
    v
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap_or_else(|_| panic!("not JSON: {stderr}"))
}

fn run_json(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("run.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn raster_smaller_than_patch_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = dir.path().join("tiny.png");
    let o = Orthomosaic::new(30, 30, vec![90; 30 * 30 * 3], vec![false; 900], GeoTransform::IDENTITY, "").unwrap();
    write_png(&o, &tiny).unwrap();
    let out = run(&[
        "scan", "--ortho", s(&tiny), "--head", "head.bin", "--backbone", "bb.onnx",
        "--out", s(&dir.path().join("scan")), "--stride", "10", "--patch", "40",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_line(&out);
    assert_eq!(e["status"], "error");
    assert_eq!(e["command"], "scan");
    assert_eq!(e["kind"], "invalid_input");
    assert!(e["message"].as_str().unwrap().contains("smaller than"));
}

#[test]
fn missing_inputs_report_machine_readable_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["candidates", "--grid", s(&dir.path().join("none.bin")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["kind"], "missing_file");

    let out = run(&["embed", "--patches", "p", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out)["message"].as_str().unwrap().contains("PALMSCAN_HOME"));

    let out = run(&["train", "--out", s(dir.path())]);
    assert!(error_line(&out)["message"].as_str().unwrap().contains("--embeddings"));
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// Reference backbone, a small synthetic scene, patches and embeddings.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let f = Fixture {
        root: dir.path().to_path_buf(),
        _dir: dir,
    };
    ok(&["reference-backbone", "--out", s(&f.p("home")), "--seed", "17"]);
    ok(&[
        "synth", "--out", s(&f.p("synth")), "--width", "400", "--height", "400", "--palms", "8",
        "--distractors", "8", "--points-per-palm", "6", "--points-per-other", "3", "--seed", "21",
    ]);
    let v = ok(&[
        "extract", "--ortho", s(&f.p("synth/ortho.png")), "--points", s(&f.p("synth/points.csv")),
        "--out", s(&f.p("patches")), "--background", "24",
    ]);
    assert_eq!((v["palm"].as_u64(), v["nonpalm"].as_u64()), (Some(48), Some(48)));
    let v = palmscan(&["embed", "--patches", s(&f.p("patches")), "--out", s(&f.p("emb")), "--views", "1"])
        .env("PALMSCAN_HOME", f.p("home"))
        .output()
        .unwrap();
    assert!(v.status.success(), "{}", String::from_utf8_lossy(&v.stderr));
    f
}

#[test]
fn pipeline_end_to_end_with_run_records() {
    let f = fixture();
    let emb = run_json(&f.p("emb"));
    assert!(emb["config"]["backbone"].as_str().unwrap().ends_with("reference_cnn.onnx"));
    assert_eq!(emb["config"]["test_fraction"], 0.2);

    let train = |out: &str| {
        ok(&[
            "train", "--embeddings", s(&f.p("emb/train")), "--out", s(&f.p(out)), "--nnodes", "64",
            "--epochs", "15", "--workers", "2",
        ])
    };
    train("model");
    train("model2");
    assert_eq!(fs::read(f.p("model/head.bin")).unwrap(), fs::read(f.p("model2/head.bin")).unwrap());
    let rec = run_json(&f.p("model"));
    assert_eq!(rec["command"], "train");
    assert_eq!(rec["workers"], 2);
    assert_eq!(rec["config"]["train_config"]["epochs"], 15);
    assert_eq!(rec["config"]["train_config"]["batch_size"], 64);
    assert_eq!(rec["outputs"].as_object().unwrap().len(), 3);
    assert_eq!(rec["inputs"], run_json(&f.p("model2"))["inputs"]);

    let m = ok(&[
        "evaluate", "--embeddings", s(&f.p("emb/test")), "--head", s(&f.p("model/head.bin")),
        "--out", s(&f.p("eval")),
    ]);
    assert!(m["acc"].as_f64().unwrap() > 0.8, "{m}");
    assert!(f.p("eval/metrics.json").exists());

    let scan = ok(&[
        "scan", "--ortho", s(&f.p("synth/ortho.png")), "--head", s(&f.p("model/head.bin")),
        "--backbone", s(&f.p("home/reference_cnn.onnx")), "--out", s(&f.p("scan")), "--stride", "20",
    ]);
    assert_eq!(scan["windows"], 19 * 19);
    for file in ["grid.bin", "grid.json", "heatmap.png", "overlay.png", "run.json"] {
        assert!(f.p("scan").join(file).exists(), "{file}");
    }

    let c = ok(&["candidates", "--grid", s(&f.p("scan/grid.bin")), "--out", s(&f.p("cand")), "--threshold", "0.3"]);
    let n = c["count"].as_u64().unwrap() as usize;
    assert!(n > 0);
    let list: Vec<Value> = serde_json::from_slice(&fs::read(f.p("cand/candidates.json")).unwrap()).unwrap();
    assert_eq!(list.len(), n);

    let out = run(&[
        "export-coarse", "--ortho", s(&f.p("synth/ortho.png")), "--candidates", s(&f.p("cand/candidates.json")),
        "--out", s(&f.p("coarse")),
    ]);
    assert_eq!(error_line(&out)["kind"], "no_decisions");

    let log: String = list
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let d = if i % 2 == 0 { "accepted_palm" } else { "rejected_nonpalm" };
            format!("{{\"id\":{},\"decision\":\"{d}\",\"ts\":{i}}}\n", c["id"])
        })
        .collect();
    fs::write(f.p("cand/labels.jsonl"), log).unwrap();
    let e = ok(&[
        "export-coarse", "--ortho", s(&f.p("synth/ortho.png")), "--candidates", s(&f.p("cand/candidates.json")),
        "--out", s(&f.p("coarse")),
    ]);
    assert_eq!(e["total"].as_u64(), Some(n as u64));
    assert_eq!(e["palm"].as_u64(), Some(n.div_ceil(2) as u64));
    let set = palmscan::dataset::load_patch_set(f.p("coarse")).unwrap();
    assert_eq!(set.len(), n);
}

#[test]
fn training_defaults_follow_scale_and_config_file_layers_under_flags() {
    let f = fixture();
    for (scale, epochs) in [("fine", 500), ("coarse", 200)] {
        let out = f.p(&format!("m-{scale}"));
        ok(&[
            "train", "--embeddings", s(&f.p("emb/train")), "--out", s(&out), "--scale", scale,
            "--nnodes", "64", "--folds", "2",
        ]);
        let rec = run_json(&out);
        assert_eq!(rec["config"]["train_config"]["epochs"], epochs);
        assert_eq!(rec["config"]["train_config"]["batch_size"], 64);
        assert_eq!(rec["config"]["train_config"]["nnodes"], 64);
    }

    let cfg = f.p("palmscan.toml");
    fs::write(&cfg, "workers = 1\n[train]\nepochs = 4\nnnodes = 64\nlearning_rate = 0.01\n").unwrap();
    let out = f.p("m-cfg");
    ok(&[
        "train", "--config", s(&cfg), "--embeddings", s(&f.p("emb/train")), "--out", s(&out),
        "--nnodes", "128",
    ]);
    let rec = run_json(&out);
    assert_eq!(rec["config"]["epochs"], 4);
    assert_eq!(rec["config"]["nnodes"], 128);
    assert_eq!(rec["config"]["learning_rate"], 0.01);
    assert_eq!(rec["workers"], 1);
    assert_eq!(rec["config_file"], s(&cfg));

    fs::write(&cfg, "[train]\nepoch = 4\n").unwrap();
    let bad = run(&["train", "--config", s(&cfg), "--embeddings", "x", "--out", "y"]);
    assert_eq!(bad.status.code(), Some(1));

    let out = run(&[
        "train", "--embeddings", s(&f.p("emb/train")), "--out", s(&f.p("m-bad")), "--nnodes", "100",
    ]);
    assert_eq!(error_line(&out)["kind"], "invalid_input");
}

#[test]
fn scan_rejects_a_head_trained_on_another_backbone() {
    let f = fixture();
    ok(&[
        "train", "--embeddings", s(&f.p("emb/train")), "--out", s(&f.p("model")), "--nnodes", "64",
        "--epochs", "2", "--folds", "2",
    ]);
    ok(&["reference-backbone", "--out", s(&f.p("other")), "--seed", "18"]);
    let out = run(&[
        "scan", "--ortho", s(&f.p("synth/ortho.png")), "--head", s(&f.p("model/head.bin")),
        "--backbone", s(&f.p("other/reference_cnn.onnx")), "--out", s(&f.p("scan")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out)["message"].as_str().unwrap().contains("trained on embeddings"));
}
