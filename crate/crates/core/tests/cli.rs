mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::{tiny_config, tiny_dataset};
use macrecon::datagen::{image_path, PhantomStyle, Split};
use macrecon::harness::{ExperimentKind, RosterModel};
use macrecon::model::{save_checkpoint, ModelConfig, ReconModel};
use macrecon::sampling::SamplingMask;
use macrecon::tensor::read_mact;

fn macrecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_macrecon"))
        .arg("--quiet")
        .args(args)
        .output()
        .unwrap()
}

fn stdout_json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn data_mask_undersample_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let o = macrecon(&["gen-data", "--out", s(&data), "--size", "16", "--train", "2", "--val", "1", "--test", "1"]);
    assert_eq!(stdout_json(&o)["size"], 16);
    let image = image_path(&data, Split::Test, 0);
    assert!(image.exists());

    let mask = tmp.path().join("mask.mact");
    let v = stdout_json(&macrecon(&[
        "gen-mask", "--pattern", "gaussian", "--height", "16", "--r", "4", "--seed", "1", "--out", s(&mask),
    ]));
    assert!((v["achieved_r"].as_f64().unwrap() / 4.0 - 1.0).abs() < 0.1);
    assert!(SamplingMask::load(&mask).unwrap().is_conjugate_symmetric());

    let zf = tmp.path().join("zf.mact");
    let k = tmp.path().join("k.mact");
    stdout_json(&macrecon(&[
        "undersample", "--image", s(&image), "--mask", s(&mask), "--out", s(&zf), "--kspace", s(&k),
    ]));
    assert_eq!(read_mact(&k).unwrap().shape(), &[2, 16, 16]);
    assert_eq!(read_mact(&zf).unwrap().shape(), &[16, 16]);
}

#[test]
fn reconstruct_with_full_mask_returns_the_input() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&tmp.path().join("data"), PhantomStyle::Cardiac, 1);
    let image = image_path(&data, Split::Test, 0);
    let mask = tmp.path().join("full.mact");
    SamplingMask::full(16, 16).save(&mask).unwrap();
    let model = tmp.path().join("m.macr");
    save_checkpoint(&ReconModel::init(ModelConfig::mac(2, 1).with_channels(4), 5).unwrap(), &model).unwrap();

    let out = tmp.path().join("rec.mact");
    let preview = tmp.path().join("rec.pgm");
    stdout_json(&macrecon(&[
        "reconstruct", "--model", s(&model), "--image", s(&image), "--mask", s(&mask), "--gamma", "4",
        "--out", s(&out), "--preview", s(&preview),
    ]));
    let rec = read_mact(&out).unwrap();
    let truth = read_mact(&image).unwrap();
    assert!(rec.reshape(&[16, 16]).unwrap().max_abs_diff(&truth.reshape(&[16, 16]).unwrap()) < 1e-10);
    assert!(fs::read(&preview).unwrap().starts_with(b"P5\n16 16\n255\n"));

    let o = macrecon(&["reconstruct", "--model", s(&model), "--image", s(&image), "--mask", s(&mask), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "invalid_argument");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = macrecon(&["gen-mask", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "usage");
    assert!(macrecon(&["--help"]).status.success());
}

#[test]
fn invalid_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"name": "x", "kind": "fixed_study", "datasets": [], "output_dir": "o", "surprise": 1}"#).unwrap();
    let o = macrecon(&["run", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "config");

    let o = macrecon(&["run", "--config", s(&tmp.path().join("absent.json"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn staged_training_and_repeatable_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&tmp.path().join("data"), PhantomStyle::Cardiac, 2);
    let mut cfg = tiny_config("cli", ExperimentKind::FixedStudy, vec![data], &tmp.path().join("out"));
    cfg.roster = vec![RosterModel::Zf, RosterModel::Mac];
    cfg.save_images = false;
    let path = tmp.path().join("cfg.json");
    fs::write(&path, cfg.to_json()).unwrap();

    let o = macrecon(&["train", "--config", s(&path), "--stage", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"], "precondition");

    let o = macrecon(&["evaluate", "--config", s(&path)]);
    assert_eq!(stderr_json(&o)["error"], "missing_file");

    stdout_json(&macrecon(&["train", "--config", s(&path), "--stage", "1"]));
    let v = stdout_json(&macrecon(&["train", "--config", s(&path), "--stage", "2"]));
    assert!(v["checkpoint"].as_str().unwrap().ends_with("models/mac.macr"));

    let results = tmp.path().join("out/results.csv");
    stdout_json(&macrecon(&["evaluate", "--config", s(&path)]));
    let first = fs::read(&results).unwrap();
    stdout_json(&macrecon(&["evaluate", "--config", s(&path)]));
    assert_eq!(first, fs::read(&results).unwrap());
    assert_eq!(String::from_utf8(first).unwrap().lines().count(), 1 + 2 * 2);
}
