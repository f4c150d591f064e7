#![allow(dead_code)]

use lumikit::deform::{DeformOptions, DeformationField, GateMode};
use lumikit::geometry::{Camera, Rng, Vec3};
use lumikit::image::ImageBuffer;
use lumikit::optim::*;
use lumikit::shading::EnvironmentMap;
use lumikit::splat::{Gaussian2D, RenderSettings};

/// Orientation whose normal is within about 35 degrees of the direction to
/// the micro-scene camera, so no splat is seen near grazing.
fn facing(rng: &mut Rng) -> lumikit::geometry::Quat {
    use lumikit::geometry::{frame_to_quat, orthonormal_basis, Frame};
    let to_cam = Vec3::new(0.3, -4.0, 1.2).normalize();
    let tilt = Vec3::new(rng.normal(), rng.normal(), rng.normal()) * 0.3;
    let n = (to_cam + tilt - to_cam * to_cam.dot(&tilt)).normalize();
    let (a, b) = orthonormal_basis(&n);
    let ang = 2.0 * std::f64::consts::PI * rng.uniform();
    let tu = a * ang.cos() + b * ang.sin();
    frame_to_quat(&Frame { tu, tv: n.cross(&tu), n })
}

pub struct MicroScene {
    pub model: Model,
    pub cfg: TrainConfig,
    pub camera: Camera,
    pub image: ImageBuffer,
    pub mask: ImageBuffer,
}

impl MicroScene {
    pub fn frame(&self) -> FrameRef<'_> {
        FrameRef { camera: &self.camera, image: &self.image, mask: &self.mask }
    }
}

/// Five large splats in front of an 8x8 camera, a perturbed small field and
/// a random target image; every quantity is kept away from clamps.
pub fn micro_scene(seed: u64) -> MicroScene {
    let mut rng = Rng::new(seed);
    let gaussians = (0..5)
        .map(|i| {
            let mu = Vec3::new(rng.uniform() - 0.5, 0.3 * i as f64 - 0.6, rng.uniform() - 0.5) * 0.8;
            let mut g = Gaussian2D::new(
                mu,
                facing(&mut rng),
                [0.9 + 0.5 * rng.uniform(), 0.9 + 0.5 * rng.uniform()],
                0.3 + 0.4 * rng.uniform(),
                Vec3::new(0.3 + 0.4 * rng.uniform(), 0.3 + 0.4 * rng.uniform(), 0.3 + 0.4 * rng.uniform()),
            );
            g.albedo = Vec3::new(0.2 + 0.6 * rng.uniform(), 0.2 + 0.6 * rng.uniform(), 0.2 + 0.6 * rng.uniform());
            g.roughness = 0.3 + 0.5 * rng.uniform();
            g.gate_logit = 0.5 + rng.uniform();
            g
        })
        .collect();
    // few encoding levels keep the loss smooth on the 1e-4 FD scale
    let mut field = DeformationField::with_encoding(2, 8, 3, 4, seed);
    let mut flat = field.to_flat();
    for v in flat.iter_mut() {
        *v += 0.05 * rng.normal();
    }
    field.set_flat(&flat).unwrap();
    let mut env = EnvironmentMap::new(16, 8).unwrap();
    for v in env.data.iter_mut() {
        *v = 0.2 + rng.uniform();
    }
    let mut cfg = TrainConfig::desk();
    cfg.env_width = 16;
    cfg.env_height = 8;
    cfg.stage2.pixels = 64;
    cfg.stage2.rays = 64;
    cfg.stage1.separation_start = 0;
    let camera = Camera::look_at(Vec3::new(0.3, -4.0, 1.2), Vec3::zeros(), Vec3::z(), 35.0, 8, 8, 0.4).unwrap();
    // target held at least 0.1 away from both the splat render and the
    // shaded colors so no L1 kink lies within the FD stencil
    let model = Model { gaussians, field, env: Some(env), stage: 2 };
    let opts = stage2_opts();
    let (posed, _) = lumikit::deform::pose_gaussians(&model.gaussians, &model.field, 0.4, opts.deform);
    let out = lumikit::splat::render(&posed, &camera, opts.render);
    let rendered = out.color_image();
    let mut image = rendered.clone();
    let mask0 = ImageBuffer::filled(8, 8, 1, 1.0);
    let snap = Stage2Snapshot::build(&out, &posed, &camera, cfg.stage2.pixels, opts.threshold, &mut Rng::new(5));
    let frame = FrameRef { camera: &camera, image: &rendered, mask: &mask0 };
    let shaded = stage2_forward(&model, frame, &cfg, &opts, Some(&snap)).unwrap().shaded;
    let mut lo = rendered.data.clone();
    let mut hi = rendered.data.clone();
    for (k, &i) in snap.pixels.iter().enumerate() {
        for c in 0..3 {
            lo[3 * i + c] = lo[3 * i + c].min(shaded[k][c]);
            hi[3 * i + c] = hi[3 * i + c].max(shaded[k][c]);
        }
    }
    for j in 0..image.data.len() {
        let off = 0.1 + 0.2 * rng.uniform();
        image.data[j] = if rng.uniform() < 0.5 { lo[j] - off } else { hi[j] + off };
    }
    let mask = ImageBuffer::from_data(8, 8, 1, (0..64).map(|_| if rng.uniform() < 0.7 { 1.0 } else { 0.0 }).collect()).unwrap();
    MicroScene { model, cfg, camera, image, mask }
}

pub fn stage1_opts() -> Stage1Options {
    Stage1Options {
        iter: 10,
        deform: DeformOptions { gate: GateMode::Sampled { seed: 4, stream: 10 }, ..DeformOptions::default() },
        render: RenderSettings { early_exit: false, ..RenderSettings::default() },
    }
}

pub fn stage2_opts() -> Stage2Options {
    Stage2Options {
        iter: 3,
        seed: 11,
        deform: DeformOptions::default(),
        render: RenderSettings { early_exit: false, ..RenderSettings::default() },
        threshold: 0.5,
    }
}

#[derive(Debug)]
pub struct ClassReport {
    pub group: Group,
    pub checked: usize,
    pub max_rel: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error floor: gradients below this magnitude are compared
/// absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Central-difference check of `analytic` for every parameter of `group`
/// (every `stride`-th entry).
pub fn fd_class(model: &Model, group: Group, analytic: &[f64], h: f64, stride: usize, loss: &dyn Fn(&Model) -> f64) -> ClassReport {
    let x0 = read_group(model, group);
    assert_eq!(x0.len(), analytic.len(), "{group:?}");
    let mut m = model.clone();
    let mut rep = ClassReport { group, checked: 0, max_rel: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    let mut x = x0.clone();
    for i in (0..x0.len()).step_by(stride.max(1)) {
        x[i] = x0[i] + h;
        write_group(&mut m, group, &x);
        let fp = loss(&m);
        x[i] = x0[i] - h;
        write_group(&mut m, group, &x);
        let fm = loss(&m);
        x[i] = x0[i];
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
        rep.checked += 1;
        if rel > rep.max_rel {
            rep.max_rel = rel;
            rep.worst_index = i;
            rep.analytic = a;
            rep.numeric = fd;
        }
    }
    write_group(&mut m, group, &x0);
    rep
}

pub const STAGE1_CLASSES: [Group; 8] =
    [Group::Position, Group::Rotation, Group::Scale, Group::Opacity, Group::Color, Group::Gate, Group::Deform, Group::ColorHead];
pub const STAGE2_CLASSES: [Group; 10] = [
    Group::Position,
    Group::Rotation,
    Group::Scale,
    Group::Opacity,
    Group::Color,
    Group::Albedo,
    Group::Roughness,
    Group::Deform,
    Group::ColorHead,
    Group::Environment,
];

pub fn check_stage1(s: &MicroScene, h: f64) -> Vec<ClassReport> {
    let opts = stage1_opts();
    let fwd = stage1_forward(&s.model, s.frame(), &s.cfg, &opts).unwrap();
    let grad = fwd.backward(&s.model);
    let loss = |m: &Model| stage1_forward(m, s.frame(), &s.cfg, &opts).unwrap().total;
    STAGE1_CLASSES.iter().map(|g| fd_class(&s.model, *g, &grad_group(&grad, *g), h, 1, &loss)).collect()
}

/// Stage 2 with the shading geometry (pixels, points, normals, tracer)
/// frozen at the unperturbed parameters.
pub fn check_stage2(s: &MicroScene, h: f64) -> Vec<ClassReport> {
    use lumikit::deform::pose_gaussians;
    use lumikit::splat::render;
    let opts = stage2_opts();
    let (posed, _) = pose_gaussians(&s.model.gaussians, &s.model.field, s.camera.time, opts.deform);
    let out = render(&posed, &s.camera, opts.render);
    let mut rng = Rng::new(5);
    let snap = Stage2Snapshot::build(&out, &posed, &s.camera, s.cfg.stage2.pixels, opts.threshold, &mut rng);
    assert!(snap.pixels.len() >= 16, "micro-scene needs foreground pixels");
    let fwd = stage2_forward(&s.model, s.frame(), &s.cfg, &opts, Some(&snap)).unwrap();
    let grad = fwd.backward(&s.model);
    let loss = |m: &Model| stage2_forward(m, s.frame(), &s.cfg, &opts, Some(&snap)).unwrap().total;
    STAGE2_CLASSES.iter().map(|g| fd_class(&s.model, *g, &grad_group(&grad, *g), h, 1, &loss)).collect()
}
