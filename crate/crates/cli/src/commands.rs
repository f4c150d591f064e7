use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lumikit::geometry::{cameras_from_json, Camera};
use lumikit::image::ImageBuffer;
use lumikit::optim::{self, Model, TrainConfig};
use lumikit::scene::{self, MetricKind, SceneDataset, SceneSpec};
use lumikit::shading::EnvironmentMap;
use serde_json::{json, Map, Value};

use crate::config;
use crate::manifest::{self, RunManifest, MANIFEST_NAME};
use crate::{Command, EvalKind, Stage, TrainArgs, UsageError};

pub fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::GenScene { spec, out, seed } => gen_scene(spec, out, *seed),
        Command::Train(args) => train(args),
        Command::Relight { ckpt, env, env_rotation, cam, frame, t, out, rays } => {
            relight(ckpt, env, *env_rotation, cam, *frame, *t, out, *rays)
        }
        Command::Eval { pred, gt, kind, mask, out } => eval(pred, gt, *kind, mask.as_deref(), out),
        Command::RenderMaps { ckpt, cam, frame, t, out } => render_maps(ckpt, cam, *frame, *t, out),
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(UsageError(format!("{what} not found: {}", path.display())).into());
    }
    Ok(())
}

fn input_err<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> anyhow::Error + '_ {
    move |e| UsageError(format!("{}: {e}", path.display())).into()
}

fn gen_scene(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    require(spec_path, "scene spec")?;
    let spec = SceneSpec::load(spec_path).map_err(input_err(spec_path))?;
    let seed = seed.unwrap_or(spec.seed);
    let mut m = RunManifest::start("gen-scene", seed, &[spec_path])?;
    m.config = serde_json::to_value(&spec)?;
    let scene = scene::gen_scene(&spec, seed)?;
    scene.save(out)?;
    fs::write(out.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
    m.outputs = vec![out.join("dynamic"), out.join("static"), out.join("spec.json")];
    m.finish(&out.join(MANIFEST_NAME))
}

/// A dataset directory, or the `dynamic` capture inside a gen-scene root.
fn dataset_dir(path: &Path) -> Result<PathBuf> {
    if path.join("cameras.json").exists() {
        Ok(path.to_path_buf())
    } else if path.join("dynamic/cameras.json").exists() {
        Ok(path.join("dynamic"))
    } else {
        Err(UsageError(format!("no dataset (cameras.json) under {}", path.display())).into())
    }
}

fn resolve_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = if args.paper_scale { TrainConfig::paper_scale() } else { TrainConfig::desk() };
    if let Some(p) = &args.config {
        cfg = config::overlay_file(cfg, p)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.stage1_iters {
        cfg.stage1_iters = n;
    }
    if let Some(n) = args.stage2_iters {
        cfg.stage2_iters = n;
    }
    if let Some(w) = args.sep_weight {
        cfg.stage1.separation = w;
    }
    if let Some(s) = args.sep_start {
        cfg.stage1.separation_start = s;
    }
    cfg.no_gate |= args.no_gate;
    cfg.no_deltac |= args.no_deltac;
    config::validated(cfg).map_err(|e| UsageError(format!("{e:#}")).into())
}

fn train(args: &TrainArgs) -> Result<()> {
    let data_dir = dataset_dir(&args.data)?;
    let cfg = resolve_config(args)?;
    let data = SceneDataset::load(&data_dir).map_err(input_err(&data_dir))?;
    if data.is_empty() {
        return Err(UsageError(format!("dataset {} has no frames", data_dir.display())).into());
    }
    let mut inputs: Vec<&Path> = vec![&data_dir];
    if let Some(c) = &args.config {
        inputs.push(c);
    }
    let from = args.from.clone().unwrap_or_else(|| args.out.clone());
    if args.stage == Stage::Two {
        require(&from.join("config.json"), "stage-1 checkpoint")?;
        inputs.push(&from);
    }
    let mut m = RunManifest::start("train", cfg.seed, &inputs)?;
    m.config = serde_json::to_value(&cfg)?;

    let mut log = Vec::new();
    let model = match args.stage {
        Stage::One | Stage::Both => {
            let s1 = optim::train_stage1(&data, &cfg)?;
            log.extend(s1.log);
            s1.model
        }
        Stage::Two => {
            let (model, _) = Model::load(&from).map_err(input_err(&from))?;
            if model.stage != 1 {
                return Err(UsageError(format!("{} is not a stage-1 checkpoint", from.display())).into());
            }
            model
        }
    };
    let model = if args.stage == Stage::One {
        model
    } else {
        let s2 = optim::train_stage2(model, &data, &cfg)?;
        log.extend(s2.log);
        s2.model
    };
    model.save(&args.out, &cfg)?;
    optim::write_loss_csv(args.out.join("loss.csv"), &log)?;
    m.outputs = vec![args.out.clone(), args.out.join("loss.csv")];
    m.finish(&args.out.join(MANIFEST_NAME))
}

fn load_checkpoint(ckpt: &Path) -> Result<(Model, TrainConfig)> {
    require(&ckpt.join("config.json"), "checkpoint")?;
    Model::load(ckpt).map_err(input_err(ckpt))
}

fn load_camera(path: &Path, frame: usize, t: Option<f64>) -> Result<Camera> {
    require(path, "camera file")?;
    let text = fs::read_to_string(path)?;
    let v: Value = serde_json::from_str(&text).map_err(input_err(path))?;
    let cams = cameras_from_json(&v).map_err(input_err(path))?;
    let cam = cams
        .get(frame)
        .ok_or_else(|| UsageError(format!("{} holds {} cameras, asked for index {frame}", path.display(), cams.len())))?;
    match t {
        Some(t) => cam.with_time(t).map_err(|e| UsageError(format!("--t: {e}")).into()),
        None => Ok(cam.clone()),
    }
}

fn with_ext(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

#[allow(clippy::too_many_arguments)]
fn relight(ckpt: &Path, env_path: &Path, rotation: f64, cam_path: &Path, frame: usize, t: Option<f64>, out: &Path, rays: usize) -> Result<()> {
    if rays == 0 {
        return Err(UsageError("--rays must be at least 1".into()).into());
    }
    let (model, cfg) = load_checkpoint(ckpt)?;
    require(env_path, "environment map")?;
    let env = EnvironmentMap::read_pfm(env_path).map_err(input_err(env_path))?.rotated(rotation);
    let cam = load_camera(cam_path, frame, t)?;
    let mut m = RunManifest::start("relight", cfg.seed, &[ckpt, env_path, cam_path])?;
    m.config = json!({ "rays": rays, "env_rotation": rotation, "frame": frame, "t": cam.time });
    let img = optim::relight(&model, &cfg, &cam, &env, rays).map_err(|e| match e {
        lumikit::Error::MissingState(s) => UsageError(format!("{}: {s}", ckpt.display())).into(),
        other => anyhow::Error::from(other),
    })?;
    if let Some(d) = out.parent() {
        fs::create_dir_all(d)?;
    }
    img.write_pfm(out)?;
    img.write_ppm(with_ext(out, "ppm"))?;
    m.outputs = vec![out.to_path_buf(), with_ext(out, "ppm")];
    m.finish(&manifest::sidecar(out))
}

/// Pairs of (name, pred, gt) image files.
fn eval_pairs(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    require(pred, "prediction")?;
    require(gt, "ground truth")?;
    if pred.is_file() {
        let name = pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(name, pred.to_path_buf(), gt.to_path_buf())]);
    }
    let mut names: Vec<PathBuf> = fs::read_dir(pred)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pfm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(UsageError(format!("no .pfm files in {}", pred.display())).into());
    }
    names
        .into_iter()
        .map(|p| {
            let file = p.file_name().unwrap().to_owned();
            let g = gt.join(&file);
            require(&g, "ground-truth image")?;
            Ok((p.file_stem().unwrap().to_string_lossy().into_owned(), p, g))
        })
        .collect()
}

/// Mean and population standard deviation of every numeric field.
pub fn aggregate(records: &[Value]) -> (Value, Value) {
    let mut mean = Map::new();
    let mut std = Map::new();
    let Some(Value::Object(first)) = records.first() else {
        return (Value::Object(mean), Value::Object(std));
    };
    for key in first.keys() {
        let vals: Vec<f64> = records.iter().filter_map(|r| r.get(key).and_then(Value::as_f64)).collect();
        if vals.len() != records.len() {
            continue;
        }
        let n = vals.len() as f64;
        let mu = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        mean.insert(key.clone(), json!(mu));
        std.insert(key.clone(), json!(var.sqrt()));
    }
    (Value::Object(mean), Value::Object(std))
}

fn eval(pred: &Path, gt: &Path, kind: EvalKind, mask_dir: Option<&Path>, out: &Path) -> Result<()> {
    let pairs = eval_pairs(pred, gt)?;
    let mut inputs: Vec<&Path> = vec![pred, gt];
    if let Some(d) = mask_dir {
        require(d, "mask directory")?;
        inputs.push(d);
    }
    let mut m = RunManifest::start("eval", 0, &inputs)?;
    let metric_kind = match kind {
        EvalKind::Albedo => MetricKind::Albedo,
        EvalKind::Relight => MetricKind::Image,
        EvalKind::Roughness => MetricKind::Roughness,
        EvalKind::Envmap => MetricKind::Envmap,
    };
    m.config = json!({ "kind": format!("{kind:?}").to_lowercase() });
    let mut frames = Vec::new();
    let mut records = Vec::new();
    for (name, p, g) in &pairs {
        let pi = ImageBuffer::read_pfm(p).map_err(input_err(p))?;
        let gi = ImageBuffer::read_pfm(g).map_err(input_err(g))?;
        let mask = match mask_dir {
            Some(d) => {
                let mp = d.join(format!("{name}.pgm"));
                require(&mp, "mask")?;
                Some(ImageBuffer::read_pgm(&mp).map_err(input_err(&mp))?)
            }
            None => None,
        };
        let rec = scene::eval_metrics(&pi, &gi, metric_kind, mask.as_ref()).map_err(input_err(p))?;
        let v = serde_json::to_value(&rec)?;
        frames.push(json!({ "name": name, "metrics": v }));
        records.push(v);
    }
    let (mean, std) = aggregate(&records);
    let report = json!({ "kind": m.config["kind"], "count": records.len(), "frames": frames, "mean": mean, "std": std });
    if let Some(d) = out.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    m.outputs = vec![out.to_path_buf()];
    m.finish(&manifest::sidecar(out))
}

/// 8-bit PPM without gamma, for data maps stored in [0, 1].
fn write_linear_ppm(img: &ImageBuffer, path: &Path) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for i in 0..img.pixel_count() {
        let px = img.pixel(i);
        for c in 0..3 {
            let v = if img.channels == 3 { px[c] } else { px[0] };
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Normal preview: n mapped to (n + 1) / 2; background stays black.
pub fn normal_preview(normal: &ImageBuffer, opacity: &ImageBuffer) -> ImageBuffer {
    let mut out = normal.clone();
    for i in 0..normal.pixel_count() {
        let bg = opacity.data[i] <= lumikit::splat::GBUFFER_EPS;
        for v in out.pixel_mut(i) {
            *v = if bg { 0.0 } else { (*v + 1.0) * 0.5 };
        }
    }
    out
}

fn depth_preview(depth: &ImageBuffer, opacity: &ImageBuffer) -> ImageBuffer {
    let fg = |i: usize| opacity.data[i] > lumikit::splat::GBUFFER_EPS;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in (0..depth.pixel_count()).filter(|&i| fg(i)) {
        lo = lo.min(depth.data[i]);
        hi = hi.max(depth.data[i]);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = depth.clone();
    for i in 0..depth.pixel_count() {
        out.data[i] = if fg(i) { 1.0 - (depth.data[i] - lo) / span } else { 0.0 };
    }
    out
}

fn render_maps(ckpt: &Path, cam_path: &Path, frame: usize, t: Option<f64>, out: &Path) -> Result<()> {
    let (model, cfg) = load_checkpoint(ckpt)?;
    let cam = load_camera(cam_path, frame, t)?;
    let mut m = RunManifest::start("render-maps", cfg.seed, &[ckpt, cam_path])?;
    m.config = json!({ "frame": frame, "t": cam.time });
    let maps = optim::render_maps(&model, &cfg, &cam);
    fs::create_dir_all(out)?;
    let mut outputs = Vec::new();
    let mut put = |name: &str, img: &ImageBuffer, preview: ImageBuffer, gamma: bool| -> Result<()> {
        let pfm = out.join(format!("{name}.pfm"));
        let ppm = out.join(format!("{name}.ppm"));
        img.write_pfm(&pfm)?;
        if gamma {
            preview.write_ppm(&ppm)?;
        } else {
            write_linear_ppm(&preview, &ppm)?;
        }
        outputs.push(pfm);
        outputs.push(ppm);
        Ok(())
    };
    put("color", &maps.color, maps.color.clone(), true)?;
    put("albedo", &maps.albedo, maps.albedo.clone(), true)?;
    put("roughness", &maps.roughness, maps.roughness.clone(), false)?;
    put("normal", &maps.normal, normal_preview(&maps.normal, &maps.opacity), false)?;
    put("depth", &maps.depth, depth_preview(&maps.depth, &maps.opacity), false)?;
    put("opacity", &maps.opacity, maps.opacity.clone(), false)?;
    put("separation", &maps.separation, maps.separation.clone(), false)?;
    m.outputs = outputs;
    m.finish(&out.join(MANIFEST_NAME))
}
