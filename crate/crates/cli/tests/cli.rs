use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY_SPEC: &str = r#"{
  "name": "tiny",
  "width": 16,
  "height": 16,
  "frames": 2,
  "seed": 3,
  "camera": { "radius": 3.0, "elevation_deg": 35, "fov_deg": 45, "target": [0, 0, 0.1] },
  "environment": { "preset": "single-texel", "intensity": 60 },
  "quality": { "env_rows": 8, "env_cols": 16, "indirect_rows": 0, "indirect_cols": 0, "secondary_rows": 4, "secondary_cols": 8 },
  "primitives": [
    { "name": "floor", "kind": "plane", "size": [2.0, 2.0], "center": [0, 0, 0], "albedo": [0.7, 0.7, 0.7], "roughness": 0.8, "splats_per_side": 6 },
    { "name": "box", "kind": "box", "size": [0.4, 0.4, 0.4], "center": [0, 0, 0.2], "albedo": [0.8, 0.3, 0.2],
      "roughness": 0.5, "splats_per_side": 2,
      "motion": { "type": "linear", "start": [-0.1, 0, 0], "end": [0.1, 0, 0] } }
  ]
}"#;

fn lumikit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lumikit")).args(args).output().expect("spawn lumikit")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_spec(dir: &Path) -> PathBuf {
    let spec = dir.join("tiny.json");
    fs::write(&spec, TINY_SPEC).unwrap();
    spec
}

fn gen(dir: &Path, name: &str) -> PathBuf {
    let spec = write_spec(dir);
    let out = dir.join(name);
    let o = lumikit(&["gen-scene", "--spec", p(&spec), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "run_manifest.json" {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn train_tiny(dir: &Path, data: &Path, name: &str) -> PathBuf {
    let ckpt = dir.join(name);
    let o = lumikit(&[
        "train", "--data", p(data), "--out", p(&ckpt), "--stage", "both", "--stage1-iters", "4", "--stage2-iters", "2",
        "--threads", "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    ckpt
}

#[test]
fn gen_scene_is_deterministic_and_labelled() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a");
    let b = gen(dir.path(), "b");
    assert_eq!(tree(&a), tree(&b));
    let labels: Value = serde_json::from_str(&fs::read_to_string(a.join("dynamic/labels.json")).unwrap()).unwrap();
    let prims = labels["primitives"].as_array().unwrap();
    assert_eq!(prims[0]["dynamic"], Value::Bool(false));
    assert_eq!(prims[1]["dynamic"], Value::Bool(true));
    let m: Value = serde_json::from_str(&fs::read_to_string(a.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "gen-scene");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["input_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn missing_spec_exits_2_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = lumikit(&["gen-scene", "--spec", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.json"));
}

#[test]
fn invalid_stage_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = lumikit(&["train", "--data", p(dir.path()), "--out", p(&dir.path().join("c")), "--stage", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cam = dir.path().join("cam.json");
    fs::write(&cam, "[]").unwrap();
    let o = lumikit(&["render-maps", "--ckpt", p(&dir.path().join("none")), "--cam", p(&cam), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = lumikit(&[
        "relight", "--ckpt", p(&dir.path().join("none")), "--env", p(&cam), "--cam", p(&cam), "--out", p(&dir.path().join("x.pfm")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_thread_env_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_lumikit"))
        .args(["gen-scene", "--spec", p(&spec), "--out", p(&dir.path().join("o"))])
        .env("LUMIKIT_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_relight_render_maps_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data");
    let ckpt = train_tiny(dir.path(), &data, "ckpt");
    for f in ["gaussians.bin", "gaussians.json", "mlp.bin", "env.pfm", "config.json", "loss.csv", "run_manifest.json"] {
        assert!(ckpt.join(f).exists(), "missing {f}");
    }
    let csv = fs::read_to_string(ckpt.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 + 2);

    let cams = data.join("dynamic/cameras.json");
    let img = dir.path().join("relit/img.pfm");
    let o = lumikit(&[
        "relight", "--ckpt", p(&ckpt), "--env", p(&ckpt.join("env.pfm")), "--cam", p(&cams), "--t", "0.5", "--out", p(&img),
        "--rays", "16",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(img.exists() && img.with_extension("ppm").exists());
    let manifest: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(manifest["command"], "relight");

    let maps = dir.path().join("maps");
    let o = lumikit(&["render-maps", "--ckpt", p(&ckpt), "--cam", p(&cams), "--frame", "1", "--out", p(&maps)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for m in ["albedo", "roughness", "normal", "depth", "separation"] {
        assert!(maps.join(format!("{m}.pfm")).exists());
        assert!(maps.join(format!("{m}.ppm")).exists());
    }
}

#[test]
fn stage_two_resumes_from_stage_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data");
    let s1 = dir.path().join("s1");
    let o = lumikit(&["train", "--data", p(&data), "--out", p(&s1), "--stage", "1", "--stage1-iters", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!s1.join("env.pfm").exists());
    let s2 = dir.path().join("s2");
    let o = lumikit(&["train", "--data", p(&data), "--out", p(&s2), "--from", p(&s1), "--stage", "2", "--stage2-iters", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(s2.join("env.pfm").exists());
}

#[test]
fn config_file_and_flags_resolve_with_flags_winning() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data");
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"stage1_iters": 2, "stage1": {"separation": 0.001, "separation_start": 7}}"#).unwrap();
    let out = dir.path().join("c");
    let o = lumikit(&[
        "train", "--data", p(&data), "--out", p(&out), "--stage", "1", "--config", p(&cfg), "--sep-start", "1", "--no-gate", "--seed", "9",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["config"]["stage1_iters"], 2);
    assert_eq!(m["config"]["stage1"]["separation"], 0.001);
    assert_eq!(m["config"]["stage1"]["separation_start"], 1);
    assert_eq!(m["config"]["no_gate"], true);
    assert_eq!(m["seed"], 9);
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data");
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"stage1_iters": 6, "nan_check_every": 1, "lr": {"mlp": 1e300, "mlp_final": 1e300}}"#).unwrap();
    let o = lumikit(&["train", "--data", p(&data), "--out", p(&dir.path().join("c")), "--stage", "1", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("iteration"));
}

#[test]
fn eval_identity_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data");
    let gt = data.join("dynamic/gt/albedo");
    let out = dir.path().join("m.json");
    let o = lumikit(&["eval", "--pred", p(&gt), "--gt", p(&gt), "--kind", "albedo", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["count"], 2);
    assert_eq!(r["mean"]["psnr"], 99.0);
    assert!((r["mean"]["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    // Mean of per-frame values against a perturbed prediction.
    let pred = dir.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    for (i, f) in ["0000.pfm", "0001.pfm"].iter().enumerate() {
        let mut img = lumikit::image::ImageBuffer::read_pfm(gt.join(f)).unwrap();
        img.data.iter_mut().for_each(|v| *v += 0.01 * (i + 1) as f64);
        img.write_pfm(pred.join(f)).unwrap();
    }
    let o = lumikit(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--kind", "relight", "--out", p(&out)]);
    assert!(o.status.success());
    let r: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let per: Vec<f64> = r["frames"].as_array().unwrap().iter().map(|f| f["metrics"]["psnr"].as_f64().unwrap()).collect();
    let hand = per.iter().sum::<f64>() / per.len() as f64;
    assert!((r["mean"]["psnr"].as_f64().unwrap() - hand).abs() < 1e-9);
    assert!(r["std"]["psnr"].as_f64().unwrap() > 0.0);
}

#[test]
fn eval_envmap_reports_angular_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data");
    let env = data.join("dynamic/gt/env.pfm");
    let out = dir.path().join("e.json");
    let o = lumikit(&["eval", "--pred", p(&env), "--gt", p(&env), "--kind", "envmap", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["frames"][0]["metrics"]["angular_error_deg"], 0.0);
}
