//! Parameter registry, Adam, the differentiable loss graphs of both
//! training stages, the training loops and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{pose_backward_with, pose_gaussians, DeformOptions, DeformTape, DeformationField, DeltaGrads, GateMode, GaussianGrad};
use crate::error::{Error, Result};
use crate::geometry::{frame_to_quat, Camera, Frame, Quat, Rng, Vec3};
use crate::image::ImageBuffer;
use crate::losses::{
    env_lower_reg, env_lower_reg_grad, loss_delta_reg, loss_delta_reg_grad, loss_depth_distortion_grad, loss_normal_consistency_grad,
    loss_opacity_mask_grad, loss_reconstruction_grad, loss_separation, loss_separation_grad, DepthMap, NormalInputs, Stage1Terms, Stage1Weights,
    Stage2Weights, FOREGROUND_THRESHOLD,
};
use crate::scene::{InitPoints, SceneDataset};
use crate::shading::{shade_backward, shade_gbuffer, shade_pixel, splat_radiance, EnvironmentMap, IndirectSource, ShadePoint, ShadeResult, Tracer};
use crate::splat::{render, render_backward, Gaussian2D, PosedSplat, RenderAdjoint, RenderOutput, RenderSettings};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// Adam moments for one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        assert_eq!(x.len(), g.len());
        if self.m.len() != x.len() {
            *self = Adam::new(x.len());
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            x[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

/// Named parameter classes of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Position,
    Rotation,
    Scale,
    Opacity,
    Color,
    Albedo,
    Roughness,
    Gate,
    /// Deformation MLP trunk plus the position and rotation heads.
    Deform,
    ColorHead,
    Environment,
}

impl Group {
    pub const ALL: [Group; 11] = [
        Group::Position,
        Group::Rotation,
        Group::Scale,
        Group::Opacity,
        Group::Color,
        Group::Albedo,
        Group::Roughness,
        Group::Gate,
        Group::Deform,
        Group::ColorHead,
        Group::Environment,
    ];

    pub fn bounds(self) -> Bounds {
        match self {
            Group::Opacity | Group::Color | Group::Albedo | Group::Roughness => Bounds::Unit,
            Group::Scale => Bounds::AtLeast(1e-4),
            Group::Environment => Bounds::AtLeast(0.0),
            Group::Rotation => Bounds::UnitQuat,
            _ => Bounds::Free,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bounds {
    Free,
    Unit,
    AtLeast(f64),
    /// Consecutive quadruples are renormalized.
    UnitQuat,
}

impl Bounds {
    pub fn apply(self, x: &mut [f64]) {
        match self {
            Bounds::Free => {}
            Bounds::Unit => x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0)),
            Bounds::AtLeast(lo) => x.iter_mut().for_each(|v| *v = v.max(lo)),
            Bounds::UnitQuat => {
                for q in x.chunks_mut(4) {
                    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        q.iter_mut().for_each(|v| *v /= n);
                    } else {
                        q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub group: Group,
    pub lr: f64,
    pub frozen: bool,
    pub bounds: Bounds,
    pub state: Adam,
}

impl ParamGroup {
    pub fn new(group: Group, lr: f64, frozen: bool) -> Self {
        assert!(lr >= 0.0, "learning rate must be non-negative");
        ParamGroup { group, lr, frozen, bounds: group.bounds(), state: Adam::new(0) }
    }
}

/// A trainable scene: canonical Gaussians, deformation field and (after
/// Stage 2) the environment map.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub gaussians: Vec<Gaussian2D>,
    pub field: DeformationField,
    pub env: Option<EnvironmentMap>,
    /// Last completed stage (0 = untrained).
    pub stage: u8,
}

/// Gradient of a scalar loss with respect to every model parameter.
#[derive(Clone, Debug)]
pub struct ModelGrad {
    pub gaussians: Vec<GaussianGrad>,
    pub field: DeformationField,
    pub env: Option<Vec<f64>>,
}

impl ModelGrad {
    pub fn zeros(model: &Model) -> Self {
        ModelGrad {
            gaussians: vec![GaussianGrad::default(); model.gaussians.len()],
            field: model.field.zeros_like(),
            env: model.env.as_ref().map(|e| vec![0.0; e.data.len()]),
        }
    }
}

fn split_mlp(flat: &[f64], range: &std::ops::Range<usize>) -> (Vec<f64>, Vec<f64>) {
    let mut body = flat[..range.start].to_vec();
    body.extend_from_slice(&flat[range.end..]);
    (body, flat[range.clone()].to_vec())
}

/// Flat values of one parameter class.
pub fn read_group(model: &Model, group: Group) -> Vec<f64> {
    let gs = &model.gaussians;
    match group {
        Group::Position => gs.iter().flat_map(|g| g.mu.iter().copied().collect::<Vec<_>>()).collect(),
        Group::Rotation => gs.iter().flat_map(|g| g.rot.to_array()).collect(),
        Group::Scale => gs.iter().flat_map(|g| g.scale).collect(),
        Group::Opacity => gs.iter().map(|g| g.opacity).collect(),
        Group::Color => gs.iter().flat_map(|g| [g.color.x, g.color.y, g.color.z]).collect(),
        Group::Albedo => gs.iter().flat_map(|g| [g.albedo.x, g.albedo.y, g.albedo.z]).collect(),
        Group::Roughness => gs.iter().map(|g| g.roughness).collect(),
        Group::Gate => gs.iter().map(|g| g.gate_logit).collect(),
        Group::Deform => split_mlp(&model.field.to_flat(), &model.field.color_head_range()).0,
        Group::ColorHead => split_mlp(&model.field.to_flat(), &model.field.color_head_range()).1,
        Group::Environment => model.env.as_ref().map(|e| e.data.clone()).unwrap_or_default(),
    }
}

/// Writes back values produced by [`read_group`].
pub fn write_group(model: &mut Model, group: Group, x: &[f64]) {
    let gs = &mut model.gaussians;
    match group {
        Group::Position => gs.iter_mut().enumerate().for_each(|(i, g)| g.mu = Vec3::from_column_slice(&x[3 * i..3 * i + 3])),
        Group::Rotation => gs
            .iter_mut()
            .enumerate()
            .for_each(|(i, g)| g.rot = Quat::from_array([x[4 * i], x[4 * i + 1], x[4 * i + 2], x[4 * i + 3]])),
        Group::Scale => gs.iter_mut().enumerate().for_each(|(i, g)| g.scale = [x[2 * i], x[2 * i + 1]]),
        Group::Opacity => gs.iter_mut().enumerate().for_each(|(i, g)| g.opacity = x[i]),
        Group::Color => gs.iter_mut().enumerate().for_each(|(i, g)| g.color = Vec3::from_column_slice(&x[3 * i..3 * i + 3])),
        Group::Albedo => gs.iter_mut().enumerate().for_each(|(i, g)| g.albedo = Vec3::from_column_slice(&x[3 * i..3 * i + 3])),
        Group::Roughness => gs.iter_mut().enumerate().for_each(|(i, g)| g.roughness = x[i]),
        Group::Gate => gs.iter_mut().enumerate().for_each(|(i, g)| g.gate_logit = x[i]),
        Group::Deform | Group::ColorHead => {
            let range = model.field.color_head_range();
            let mut flat = model.field.to_flat();
            if group == Group::ColorHead {
                flat[range].copy_from_slice(x);
            } else {
                let (a, b) = x.split_at(range.start);
                flat[..range.start].copy_from_slice(a);
                flat[range.end..].copy_from_slice(b);
            }
            model.field.set_flat(&flat).expect("mlp layout");
        }
        Group::Environment => {
            if let Some(e) = model.env.as_mut() {
                e.data.copy_from_slice(x);
            }
        }
    }
}

/// Flat gradient of one parameter class, aligned with [`read_group`].
pub fn grad_group(grad: &ModelGrad, group: Group) -> Vec<f64> {
    let gs = &grad.gaussians;
    match group {
        Group::Position => gs.iter().flat_map(|g| [g.mu.x, g.mu.y, g.mu.z]).collect(),
        Group::Rotation => gs.iter().flat_map(|g| g.rot).collect(),
        Group::Scale => gs.iter().flat_map(|g| g.scale).collect(),
        Group::Opacity => gs.iter().map(|g| g.opacity).collect(),
        Group::Color => gs.iter().flat_map(|g| [g.color.x, g.color.y, g.color.z]).collect(),
        Group::Albedo => gs.iter().flat_map(|g| [g.albedo.x, g.albedo.y, g.albedo.z]).collect(),
        Group::Roughness => gs.iter().map(|g| g.roughness).collect(),
        Group::Gate => gs.iter().map(|g| g.gate_logit).collect(),
        Group::Deform => split_mlp(&grad.field.to_flat(), &grad.field.color_head_range()).0,
        Group::ColorHead => split_mlp(&grad.field.to_flat(), &grad.field.color_head_range()).1,
        Group::Environment => grad.env.clone().unwrap_or_default(),
    }
}

/// The set of parameter groups a training stage updates.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub groups: Vec<ParamGroup>,
}

impl Optimizer {
    pub fn new(groups: Vec<ParamGroup>) -> Self {
        Optimizer { groups }
    }

    pub fn group_mut(&mut self, g: Group) -> Option<&mut ParamGroup> {
        self.groups.iter_mut().find(|p| p.group == g)
    }

    pub fn is_frozen(&self, g: Group) -> bool {
        self.groups.iter().find(|p| p.group == g).is_none_or(|p| p.frozen)
    }

    /// Gradient slot for `g`; `None` when the group is frozen or absent.
    pub fn slot(&self, grad: &ModelGrad, g: Group) -> Option<Vec<f64>> {
        if self.is_frozen(g) {
            None
        } else {
            Some(grad_group(grad, g))
        }
    }

    /// One Adam step on every unfrozen group followed by its clamp.
    pub fn step(&mut self, model: &mut Model, grad: &ModelGrad) {
        for pg in self.groups.iter_mut() {
            if pg.frozen {
                continue;
            }
            let mut x = read_group(model, pg.group);
            if x.is_empty() {
                continue;
            }
            let g = grad_group(grad, pg.group);
            pg.state.step(&mut x, &g, pg.lr);
            pg.bounds.apply(&mut x);
            write_group(model, pg.group, &x);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub gate: f64,
    pub mlp: f64,
    pub mlp_final: f64,
    pub albedo: f64,
    pub roughness: f64,
    pub env: f64,
    /// Multiplier on the Stage-1 rates of parameters finetuned in Stage 2.
    pub finetune: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            scale: 2.5e-4,
            opacity: 0.02,
            color: 0.01,
            gate: 0.1,
            mlp: 8e-4,
            mlp_final: 8e-5,
            albedo: 0.01,
            roughness: 0.005,
            env: 0.2,
            finetune: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub stage1: Stage1Weights,
    pub stage2: Stage2Weights,
    pub lr: LearningRates,
    pub mlp_depth: usize,
    pub mlp_width: usize,
    /// Positional-encoding frequencies for t and for mu.
    pub enc_t: usize,
    pub enc_mu: usize,
    pub temperature: f64,
    /// Ablation: gate fixed at one.
    pub no_gate: bool,
    /// Ablation: color delta forced to zero.
    pub no_deltac: bool,
    /// Treat the field's mu input as a constant during training.
    pub detach_field_input: bool,
    pub init_opacity: f64,
    pub init_color: f64,
    pub init_gate: f64,
    pub init_roughness: f64,
    pub init_env: f64,
    pub env_width: usize,
    pub env_height: usize,
    pub depth_near: f64,
    pub depth_far: f64,
    /// Rays per splat when precomputing radiance for relighting.
    pub relight_radiance_rays: usize,
    /// Iterations between non-finite checks.
    pub nan_check_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale schedule: 3000 + 2000 iterations.
    pub fn desk() -> Self {
        TrainConfig {
            seed: 0,
            stage1_iters: 3000,
            stage2_iters: 2000,
            stage1: Stage1Weights { normal_start: 700, distortion_start: 300, ..Stage1Weights::default() },
            stage2: Stage2Weights::default(),
            lr: LearningRates::default(),
            mlp_depth: 4,
            mlp_width: 64,
            enc_t: crate::deform::ENC_T,
            enc_mu: crate::deform::ENC_MU,
            temperature: crate::deform::DEFAULT_TEMPERATURE,
            no_gate: false,
            no_deltac: false,
            detach_field_input: true,
            init_opacity: 0.5,
            init_color: 0.5,
            init_gate: 0.01,
            init_roughness: 0.5,
            init_env: 0.5,
            env_width: 32,
            env_height: 16,
            depth_near: 0.2,
            depth_far: 1000.0,
            relight_radiance_rays: 256,
            nan_check_every: 100,
        }
    }

    /// Full-length schedule: 35k + 20k iterations with an 8 x 256 field.
    pub fn paper_scale() -> Self {
        TrainConfig {
            stage1_iters: 35_000,
            stage2_iters: 20_000,
            mlp_depth: 8,
            mlp_width: 256,
            stage1: Stage1Weights { normal_start: 7000, distortion_start: 3000, ..Stage1Weights::default() },
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(Error::InvalidSpec { field: f.into(), reason: r.into() });
        if self.stage1_iters == 0 {
            return bad("stage1_iters", "must be > 0");
        }
        if self.stage2_iters == 0 {
            return bad("stage2_iters", "must be > 0");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature", "must be > 0");
        }
        if self.stage2.pixels == 0 || self.stage2.rays == 0 {
            return bad("stage2", "pixel and ray counts must be > 0");
        }
        if self.mlp_depth == 0 || self.mlp_width == 0 {
            return bad("mlp_depth", "field must have at least one hidden layer");
        }
        if self.enc_t == 0 || self.enc_mu == 0 {
            return bad("enc_t", "encodings need at least one frequency");
        }
        let lr = &self.lr;
        for (name, v) in [
            ("lr.position", lr.position),
            ("lr.position_final", lr.position_final),
            ("lr.rotation", lr.rotation),
            ("lr.scale", lr.scale),
            ("lr.opacity", lr.opacity),
            ("lr.color", lr.color),
            ("lr.gate", lr.gate),
            ("lr.mlp", lr.mlp),
            ("lr.mlp_final", lr.mlp_final),
            ("lr.albedo", lr.albedo),
            ("lr.roughness", lr.roughness),
            ("lr.env", lr.env),
            ("lr.finetune", lr.finetune),
        ] {
            if !(v >= 0.0) {
                return bad(name, "learning rate must be >= 0");
            }
        }
        self.stage1.validate()
    }

    fn depth_map(&self) -> DepthMap {
        DepthMap::Ndc { near: self.depth_near, far: self.depth_far }
    }

    fn deform_options(&self, gate: GateMode, zero_deltas: bool) -> DeformOptions {
        DeformOptions {
            temperature: self.temperature,
            gate: if self.no_gate { GateMode::Disabled } else { gate },
            zero_deltas,
            no_deltac: self.no_deltac,
            detach_input: self.detach_field_input,
        }
    }
}

/// Exponential interpolation from `a` to `b` as `frac` goes 0 -> 1.
pub fn exp_schedule(a: f64, b: f64, frac: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        return a + (b - a) * frac.clamp(0.0, 1.0);
    }
    (a.ln() + (b.ln() - a.ln()) * frac.clamp(0.0, 1.0)).exp()
}

/// Canonical Gaussians at the given surface samples.
pub fn init_gaussians(init: &InitPoints, cfg: &TrainConfig) -> Vec<Gaussian2D> {
    (0..init.len())
        .map(|i| {
            let n = Vec3::from(init.normals[i]).normalize();
            let tu = Vec3::from(init.tangents[i]);
            let tu = (tu - n * n.dot(&tu)).normalize();
            let frame = Frame { tu, tv: n.cross(&tu), n };
            let s = init.scales[i];
            let mut g = Gaussian2D::new(Vec3::from(init.positions[i]), frame_to_quat(&frame), [s, s], cfg.init_opacity, Vec3::repeat(cfg.init_color));
            g.roughness = cfg.init_roughness;
            g.gate_logit = cfg.init_gate;
            g
        })
        .collect()
}

impl Model {
    pub fn new(init: &InitPoints, cfg: &TrainConfig) -> Self {
        Model {
            gaussians: init_gaussians(init, cfg),
            field: DeformationField::with_encoding(cfg.mlp_depth, cfg.mlp_width, cfg.enc_t, cfg.enc_mu, cfg.seed),
            env: None,
            stage: 0,
        }
    }

    /// Inference gate value of every Gaussian.
    pub fn gates(&self, cfg: &TrainConfig) -> Vec<f64> {
        self.gaussians
            .iter()
            .map(|g| if cfg.no_gate { 1.0 } else { crate::deform::gate_inference(g.gate_logit, cfg.temperature) })
            .collect()
    }

    /// Splats posed at `t` with the inference gate.
    pub fn pose(&self, cfg: &TrainConfig, t: f64) -> Vec<PosedSplat> {
        pose_gaussians(&self.gaussians, &self.field, t, cfg.deform_options(GateMode::Inference, false)).0
    }
}

/// One training view.
#[derive(Clone, Copy)]
pub struct FrameRef<'a> {
    pub camera: &'a Camera,
    pub image: &'a ImageBuffer,
    pub mask: &'a ImageBuffer,
}

impl<'a> FrameRef<'a> {
    pub fn from_dataset(data: &'a SceneDataset, i: usize) -> Self {
        FrameRef { camera: &data.cameras[i], image: &data.frames[i], mask: &data.masks[i] }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Stage1Options {
    pub iter: usize,
    pub deform: DeformOptions,
    pub render: RenderSettings,
}

/// Taped Stage-1 forward pass. Consumed by [`Stage1Forward::backward`], so
/// a graph can only be differentiated once:
///
/// ```compile_fail
/// # use lumikit::optim::*;
/// # fn f(model: &Model, fwd: Stage1Forward) {
/// let a = fwd.backward(model);
/// let b = fwd.backward(model); // use of moved value
/// # }
/// ```
pub struct Stage1Forward {
    camera: Camera,
    posed: Vec<PosedSplat>,
    tape: DeformTape,
    out: RenderOutput,
    adj: RenderAdjoint,
    sep_grad: Vec<f64>,
    delta_grads: Option<(Vec<Vec3>, Vec<Vec3>)>,
    pub terms: Stage1Terms,
    pub total: f64,
}

/// Stage-1 objective on one frame: reconstruction, normal consistency,
/// NDC-depth distortion, opacity BCE, separation and delta regularizers.
pub fn stage1_forward(model: &Model, frame: FrameRef, cfg: &TrainConfig, opts: &Stage1Options) -> Result<Stage1Forward> {
    let w = &cfg.stage1;
    let cam = frame.camera;
    let (posed, tape) = pose_gaussians(&model.gaussians, &model.field, cam.time, opts.deform);
    let out = render(&posed, cam, opts.render);
    let n_px = out.pixels.len();
    let mut adj = RenderAdjoint::zeros(n_px);
    let mut terms = Stage1Terms::default();

    let (lc, gimg) = loss_reconstruction_grad(&out.color_image(), frame.image)?;
    terms.reconstruction = lc;
    for (i, a) in adj.pixels.iter_mut().enumerate() {
        a.color = Vec3::from_column_slice(gimg.pixel(i));
    }

    let (lam_n, lam_d) = (w.normal_at(opts.iter), w.distortion_at(opts.iter));
    if lam_n > 0.0 {
        let (mut nn, mut pp, mut oo) = (Vec::new(), Vec::new(), Vec::new());
        let inp = NormalInputs::from_render(&out, cam, &mut nn, &mut pp, &mut oo);
        terms.normal = loss_normal_consistency_grad(&inp, lam_n, &mut adj.pixels);
    }
    if lam_d > 0.0 {
        let (ld, hits) = loss_depth_distortion_grad(&out, cfg.depth_map(), lam_d);
        terms.distortion = ld;
        adj.hits = Some(hits);
    }
    if w.opacity > 0.0 {
        let o: Vec<f64> = out.pixels.iter().map(|p| p.opacity).collect();
        let mut g = vec![0.0; n_px];
        terms.opacity = loss_opacity_mask_grad(&o, &frame.mask.data, &mut g)?;
        for (a, gi) in adj.pixels.iter_mut().zip(g) {
            a.opacity += w.opacity * gi;
        }
    }

    let logits: Vec<f64> = model.gaussians.iter().map(|g| g.gate_logit).collect();
    terms.separation = loss_separation(&logits);
    let lam_p = if cfg.no_gate { 0.0 } else { w.separation_at(opts.iter) };
    let sep_grad = loss_separation_grad(&logits).into_iter().map(|g| g * lam_p).collect();

    let delta_grads = if tape.mlp.is_some() {
        let (dc, dmu) = loss_delta_reg(&tape.deltas.dc, &tape.deltas.dmu);
        terms.delta_c = dc;
        terms.delta_mu = dmu;
        let gc = loss_delta_reg_grad(&tape.deltas.dc).into_iter().map(|g| g * w.delta_c).collect();
        let gm = loss_delta_reg_grad(&tape.deltas.dmu).into_iter().map(|g| g * w.delta_mu).collect();
        Some((gm, gc))
    } else {
        None
    };

    let total = terms.reconstruction
        + lam_n * terms.normal
        + lam_d * terms.distortion
        + w.opacity * terms.opacity
        + lam_p * terms.separation
        + w.delta_c * terms.delta_c
        + w.delta_mu * terms.delta_mu;
    Ok(Stage1Forward { camera: cam.clone(), posed, tape, out, adj, sep_grad, delta_grads, terms, total })
}

impl Stage1Forward {
    pub fn render_output(&self) -> &RenderOutput {
        &self.out
    }

    pub fn backward(self, model: &Model) -> ModelGrad {
        let sg = render_backward(&self.out, &self.posed, &self.camera, &self.adj);
        let mut field = model.field.zeros_like();
        let extra = self.delta_grads.as_ref().map(|(m, c)| DeltaGrads { dmu: m, dc: c });
        let mut gaussians = pose_backward_with(&model.gaussians, &model.field, &self.tape, &sg, extra, &mut field);
        for (g, s) in gaussians.iter_mut().zip(&self.sep_grad) {
            g.gate_logit += s;
        }
        ModelGrad { gaussians, field, env: model.env.as_ref().map(|e| vec![0.0; e.data.len()]) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Stage2Options {
    pub iter: usize,
    pub seed: u64,
    pub deform: DeformOptions,
    pub render: RenderSettings,
    /// Foreground threshold on accumulated opacity.
    pub threshold: f64,
}

/// Shading geometry held fixed while materials are differentiated: sampled
/// pixels, their surface point, normal and view direction, and the tracer
/// used for visibility and indirect light.
pub struct Stage2Snapshot {
    pub pixels: Vec<usize>,
    pub geometry: Vec<(Vec3, Vec3, Vec3)>,
    pub tracer: Tracer,
}

impl Stage2Snapshot {
    pub fn build(out: &RenderOutput, posed: &[PosedSplat], cam: &Camera, n_pixels: usize, threshold: f64, rng: &mut Rng) -> Self {
        let fg: Vec<usize> = (0..out.pixels.len())
            .filter(|&i| {
                let p = &out.pixels[i];
                p.opacity > threshold && p.normal.norm() > 1e-12
            })
            .collect();
        let k = n_pixels.min(fg.len());
        let pick = rng.sample_without_replacement(fg.len(), k);
        let mut pixels = Vec::with_capacity(k);
        let mut geometry = Vec::with_capacity(k);
        for j in pick {
            let i = fg[j];
            let p = &out.pixels[i];
            let x = p.position / p.opacity;
            let view = (cam.position - x).normalize();
            let mut n = p.normal.normalize();
            if n.dot(&view) < 0.0 {
                n = -n;
            }
            pixels.push(i);
            geometry.push((x, n, view));
        }
        Stage2Snapshot { pixels, geometry, tracer: Tracer::new(posed.to_vec(), IndirectSource::Colors) }
    }
}

/// Taped Stage-2 forward pass; see [`Stage1Forward`] for the consumption
/// rule.
pub struct Stage2Forward {
    camera: Camera,
    posed: Vec<PosedSplat>,
    tape: DeformTape,
    out: RenderOutput,
    adj: RenderAdjoint,
    env_grad: Vec<f64>,
    pub reconstruction: f64,
    pub pbr: f64,
    pub env_reg: f64,
    pub total: f64,
    /// Shaded colors of the sampled pixels.
    pub shaded: Vec<Vec3>,
}

fn mc_seed(seed: u64, iter: usize) -> u64 {
    seed ^ 0x5348_4144_4552_0000 ^ (iter as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Stage-2 objective on one frame: `L_c` on the splat render plus the L1
/// between Monte Carlo shaded and observed colors at sampled pixels and the
/// lower-hemisphere environment penalty. With `snapshot = None` the shading
/// geometry is taken from this forward pass.
pub fn stage2_forward(
    model: &Model,
    frame: FrameRef,
    cfg: &TrainConfig,
    opts: &Stage2Options,
    snapshot: Option<&Stage2Snapshot>,
) -> Result<Stage2Forward> {
    let env = model.env.as_ref().ok_or_else(|| Error::MissingState("stage 2 needs an environment map".into()))?;
    let cam = frame.camera;
    let (posed, tape) = pose_gaussians(&model.gaussians, &model.field, cam.time, opts.deform);
    let out = render(&posed, cam, opts.render);
    let owned;
    let snap = match snapshot {
        Some(s) => s,
        None => {
            let mut rng = Rng::stream(opts.seed, 0x7069_7800 + opts.iter as u64);
            owned = Stage2Snapshot::build(&out, &posed, cam, cfg.stage2.pixels, opts.threshold, &mut rng);
            &owned
        }
    };
    let mut adj = RenderAdjoint::zeros(out.pixels.len());
    let (lc, gimg) = loss_reconstruction_grad(&out.color_image(), frame.image)?;
    for (i, a) in adj.pixels.iter_mut().enumerate() {
        a.color = Vec3::from_column_slice(gimg.pixel(i));
    }

    let seed = mc_seed(opts.seed, opts.iter);
    let rays = cfg.stage2.rays;
    let results: Vec<Result<(ShadePoint, ShadeResult)>> = snap
        .pixels
        .par_iter()
        .zip(&snap.geometry)
        .map(|(&i, &(position, normal, view))| {
            let p = &out.pixels[i];
            let o = p.opacity.max(crate::splat::GBUFFER_EPS);
            let pt = ShadePoint { position, normal, view, albedo: p.albedo / o, roughness: p.roughness / o };
            let mut rng = Rng::stream(seed, i as u64);
            let r = shade_pixel(&pt, env, &snap.tracer, rays, &mut rng)?;
            Ok((pt, r))
        })
        .collect();
    let n = snap.pixels.len();
    let denom = (3 * n).max(1) as f64;
    let mut pbr = 0.0;
    let mut env_grad = vec![0.0; env.data.len()];
    let mut shaded = Vec::with_capacity(n);
    for (k, res) in results.into_iter().enumerate() {
        let (pt, r) = res?;
        let i = snap.pixels[k];
        let gt = Vec3::from_column_slice(frame.image.pixel(i));
        let d = r.color - gt;
        pbr += d.abs().sum() / denom;
        let gc = d.map(|v| if v == 0.0 { 0.0 } else { v.signum() / denom });
        let sg = shade_backward(&pt, &r, &gc);
        for (t, g) in &sg.env {
            for c in 0..3 {
                env_grad[3 * t + c] += g[c];
            }
        }
        let o = out.pixels[i].opacity.max(crate::splat::GBUFFER_EPS);
        let a = &mut adj.pixels[i];
        a.albedo += sg.albedo / o;
        a.roughness += sg.roughness / o;
        a.opacity -= (sg.albedo.dot(&pt.albedo) + sg.roughness * pt.roughness) / o;
        shaded.push(r.color);
    }
    let env_reg = env_lower_reg(env);
    env_lower_reg_grad(env, cfg.stage2.env, &mut env_grad);
    let total = lc + pbr + cfg.stage2.env * env_reg;
    Ok(Stage2Forward { camera: cam.clone(), posed, tape, out, adj, env_grad, reconstruction: lc, pbr, env_reg, total, shaded })
}

impl Stage2Forward {
    pub fn render_output(&self) -> &RenderOutput {
        &self.out
    }

    pub fn backward(self, model: &Model) -> ModelGrad {
        let sg = render_backward(&self.out, &self.posed, &self.camera, &self.adj);
        let mut field = model.field.zeros_like();
        let gaussians = pose_backward_with(&model.gaussians, &model.field, &self.tape, &sg, None, &mut field);
        ModelGrad { gaussians, field, env: Some(self.env_grad) }
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: u8,
    pub iter: usize,
    pub frame: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub normal: f64,
    pub distortion: f64,
    pub opacity: f64,
    pub separation: f64,
    pub delta_c: f64,
    pub delta_mu: f64,
    pub pbr: f64,
    pub env_reg: f64,
}

pub const LOSS_CSV_HEADER: &str = "stage,iter,frame,total,reconstruction,normal,distortion,opacity,separation,delta_c,delta_mu,pbr,env_reg";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.stage,
            self.iter,
            self.frame,
            self.total,
            self.reconstruction,
            self.normal,
            self.distortion,
            self.opacity,
            self.separation,
            self.delta_c,
            self.delta_mu,
            self.pbr,
            self.env_reg
        )
    }
}

pub fn write_loss_csv(path: impl AsRef<Path>, log: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{LOSS_CSV_HEADER}")?;
    for r in log {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

fn check_finite(model: &Model, iter: usize) -> Result<()> {
    let bad = |v: f64| !v.is_finite();
    for g in &model.gaussians {
        if g.mu.iter().any(|v| bad(*v))
            || g.rot.to_array().iter().any(|v| bad(*v))
            || g.scale.iter().any(|v| bad(*v))
            || bad(g.opacity)
            || g.color.iter().any(|v| bad(*v))
            || g.albedo.iter().any(|v| bad(*v))
            || bad(g.roughness)
            || bad(g.gate_logit)
        {
            return Err(Error::NumericFailure { iter });
        }
    }
    if model.field.to_flat().iter().any(|v| bad(*v)) {
        return Err(Error::NumericFailure { iter });
    }
    if model.env.as_ref().is_some_and(|e| e.data.iter().any(|v| bad(*v))) {
        return Err(Error::NumericFailure { iter });
    }
    Ok(())
}

pub struct TrainOutput {
    pub model: Model,
    pub log: Vec<LossRecord>,
}

fn stage1_optimizer(cfg: &TrainConfig) -> Optimizer {
    let lr = &cfg.lr;
    Optimizer::new(vec![
        ParamGroup::new(Group::Position, lr.position, false),
        ParamGroup::new(Group::Rotation, lr.rotation, false),
        ParamGroup::new(Group::Scale, lr.scale, false),
        ParamGroup::new(Group::Opacity, lr.opacity, false),
        ParamGroup::new(Group::Color, lr.color, false),
        ParamGroup::new(Group::Albedo, 0.0, true),
        ParamGroup::new(Group::Roughness, 0.0, true),
        ParamGroup::new(Group::Gate, lr.gate, cfg.no_gate),
        ParamGroup::new(Group::Deform, lr.mlp, false),
        ParamGroup::new(Group::ColorHead, lr.mlp, cfg.no_deltac),
        ParamGroup::new(Group::Environment, 0.0, true),
    ])
}

/// Stage 1: geometry, colors and the gated deformation field.
pub fn train_stage1(data: &SceneDataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_stage1_with(data, cfg, |_, _| {})
}

/// [`train_stage1`] calling `observe` after every optimizer step.
pub fn train_stage1_with(data: &SceneDataset, cfg: &TrainConfig, mut observe: impl FnMut(&Model, &LossRecord)) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("dataset has no frames".into()));
    }
    if data.init.is_empty() {
        return Err(Error::InvalidInput("dataset has no initial points".into()));
    }
    let mut model = Model::new(&data.init, cfg);
    let mut opt = stage1_optimizer(cfg);
    let mut frame_rng = Rng::stream(cfg.seed, 1);
    let mut log = Vec::with_capacity(cfg.stage1_iters);
    let w = &cfg.stage1;
    for iter in 0..cfg.stage1_iters {
        let frac = iter as f64 / cfg.stage1_iters.max(1) as f64;
        let mlp_lr = exp_schedule(cfg.lr.mlp, cfg.lr.mlp_final, frac);
        opt.group_mut(Group::Position).unwrap().lr = exp_schedule(cfg.lr.position, cfg.lr.position_final, frac);
        opt.group_mut(Group::Deform).unwrap().lr = mlp_lr;
        opt.group_mut(Group::ColorHead).unwrap().lr = mlp_lr;

        let fi = frame_rng.below(data.len());
        let opts = Stage1Options {
            iter,
            deform: cfg.deform_options(GateMode::Sampled { seed: cfg.seed ^ 0x6761_7465, stream: iter as u64 }, iter < w.deform_warmup),
            render: RenderSettings::default(),
        };
        let fwd = stage1_forward(&model, FrameRef::from_dataset(data, fi), cfg, &opts)?;
        let t = fwd.terms;
        log.push(LossRecord {
            stage: 1,
            iter,
            frame: fi,
            total: fwd.total,
            reconstruction: t.reconstruction,
            normal: t.normal,
            distortion: t.distortion,
            opacity: t.opacity,
            separation: t.separation,
            delta_c: t.delta_c,
            delta_mu: t.delta_mu,
            ..Default::default()
        });
        if !fwd.total.is_finite() {
            return Err(Error::NumericFailure { iter });
        }
        let grad = fwd.backward(&model);
        opt.step(&mut model, &grad);
        observe(&model, log.last().unwrap());
        if cfg.nan_check_every > 0 && (iter + 1) % cfg.nan_check_every == 0 {
            check_finite(&model, iter)?;
        }
    }
    check_finite(&model, cfg.stage1_iters)?;
    model.stage = 1;
    Ok(TrainOutput { model, log })
}

fn stage2_optimizer(cfg: &TrainConfig) -> Optimizer {
    let lr = &cfg.lr;
    let f = lr.finetune;
    Optimizer::new(vec![
        ParamGroup::new(Group::Position, 0.0, true),
        ParamGroup::new(Group::Rotation, 0.0, true),
        ParamGroup::new(Group::Scale, 0.0, true),
        ParamGroup::new(Group::Gate, 0.0, true),
        ParamGroup::new(Group::Deform, 0.0, true),
        ParamGroup::new(Group::Opacity, lr.opacity * f, false),
        ParamGroup::new(Group::Color, lr.color * f, false),
        ParamGroup::new(Group::ColorHead, lr.mlp_final * f, cfg.no_deltac),
        ParamGroup::new(Group::Albedo, lr.albedo, false),
        ParamGroup::new(Group::Roughness, lr.roughness, false),
        ParamGroup::new(Group::Environment, lr.env, false),
    ])
}

/// Groups Stage 2 must leave bit-identical.
pub const STAGE2_FROZEN: [Group; 5] = [Group::Position, Group::Rotation, Group::Scale, Group::Gate, Group::Deform];

/// Stage 2: materials and environment under frozen geometry.
pub fn train_stage2(stage1: Model, data: &SceneDataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_stage2_with(stage1, data, cfg, |_, _| {})
}

/// [`train_stage2`] calling `observe` after every optimizer step.
pub fn train_stage2_with(
    stage1: Model,
    data: &SceneDataset,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&Model, &LossRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if stage1.stage < 1 {
        return Err(Error::MissingState("stage 2 requires a completed stage 1".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidInput("dataset has no frames".into()));
    }
    let mut model = stage1;
    for g in model.gaussians.iter_mut() {
        g.albedo = g.color;
        g.roughness = cfg.init_roughness;
    }
    model.env = Some(EnvironmentMap::uniform(cfg.env_width, cfg.env_height, Vec3::repeat(cfg.init_env))?);
    let frozen_before: Vec<Vec<f64>> = STAGE2_FROZEN.iter().map(|g| read_group(&model, *g)).collect();
    let mut opt = stage2_optimizer(cfg);
    let mut frame_rng = Rng::stream(cfg.seed, 2);
    let mut log = Vec::with_capacity(cfg.stage2_iters);
    for iter in 0..cfg.stage2_iters {
        let fi = frame_rng.below(data.len());
        let opts = Stage2Options {
            iter,
            seed: cfg.seed,
            deform: cfg.deform_options(GateMode::Inference, false),
            render: RenderSettings::default(),
            threshold: FOREGROUND_THRESHOLD,
        };
        let fwd = stage2_forward(&model, FrameRef::from_dataset(data, fi), cfg, &opts, None)?;
        log.push(LossRecord {
            stage: 2,
            iter,
            frame: fi,
            total: fwd.total,
            reconstruction: fwd.reconstruction,
            pbr: fwd.pbr,
            env_reg: fwd.env_reg,
            ..Default::default()
        });
        if !fwd.total.is_finite() {
            return Err(Error::NumericFailure { iter });
        }
        let grad = fwd.backward(&model);
        opt.step(&mut model, &grad);
        observe(&model, log.last().unwrap());
        if cfg.nan_check_every > 0 && (iter + 1) % cfg.nan_check_every == 0 {
            check_finite(&model, iter)?;
        }
    }
    check_finite(&model, cfg.stage2_iters)?;
    for (g, before) in STAGE2_FROZEN.iter().zip(&frozen_before) {
        let after = read_group(&model, *g);
        assert!(
            after.iter().zip(before).all(|(a, b)| a.to_bits() == b.to_bits()),
            "frozen group {g:?} changed during stage 2"
        );
    }
    model.stage = 2;
    Ok(TrainOutput { model, log })
}

/// Secondary radiance used when shading a full image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndirectMode {
    /// Time-modulated Stage-1 colors (training-time shading).
    Stage1Colors,
    /// Each hit splat's own shaded color under the given environment.
    PbrColors,
    Off,
}

/// Shades every foreground pixel of the model at `cam` under `env`.
pub fn render_pbr(model: &Model, cfg: &TrainConfig, cam: &Camera, env: &EnvironmentMap, rays: usize, mode: IndirectMode, seed: u64) -> Result<ImageBuffer> {
    if model.stage < 2 {
        return Err(Error::MissingState("model has no trained materials".into()));
    }
    let posed = model.pose(cfg, cam.time);
    let out = render(&posed, cam, RenderSettings::default());
    let gbuf = out.gbuffer();
    let source = match mode {
        IndirectMode::Stage1Colors => IndirectSource::Colors,
        IndirectMode::PbrColors => IndirectSource::Radiance(splat_radiance(&posed, env, cfg.relight_radiance_rays, seed)),
        IndirectMode::Off => IndirectSource::Off,
    };
    let tracer = Tracer::new(posed, source);
    shade_gbuffer(&gbuf, &cam.position, env, &tracer, rays, seed, FOREGROUND_THRESHOLD)
}

/// Relit linear image of a Stage-2 model.
pub fn relight(model: &Model, cfg: &TrainConfig, cam: &Camera, env: &EnvironmentMap, rays: usize) -> Result<ImageBuffer> {
    render_pbr(model, cfg, cam, env, rays, IndirectMode::PbrColors, cfg.seed)
}

/// Per-pixel attribute maps of a posed model.
pub struct MapSet {
    pub color: ImageBuffer,
    pub albedo: ImageBuffer,
    pub roughness: ImageBuffer,
    pub normal: ImageBuffer,
    pub depth: ImageBuffer,
    pub opacity: ImageBuffer,
    /// Opacity-normalized blend of inference gate values.
    pub separation: ImageBuffer,
}

pub fn render_maps(model: &Model, cfg: &TrainConfig, cam: &Camera) -> MapSet {
    let (posed, tape) = pose_gaussians(&model.gaussians, &model.field, cam.time, cfg.deform_options(GateMode::Inference, false));
    let out = render(&posed, cam, RenderSettings::default());
    let g = out.gbuffer();
    let mut sep = ImageBuffer::new(out.width, out.height, 1);
    for (i, p) in out.pixels.iter().enumerate() {
        if p.opacity > crate::splat::GBUFFER_EPS {
            sep.data[i] = p.hits.iter().map(|h| h.weight * tape.gates[h.index]).sum::<f64>() / p.opacity;
        }
    }
    MapSet { color: g.color, albedo: g.albedo, roughness: g.roughness, normal: g.normal, depth: g.depth, opacity: g.opacity, separation: sep }
}

const RECORD: [(&str, usize); 8] =
    [("mu", 3), ("rot", 4), ("scale", 2), ("opacity", 1), ("color", 3), ("albedo", 3), ("roughness", 1), ("gate_logit", 1)];
const RECORD_LEN: usize = 18;

fn write_f32s(path: &Path, v: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * v.len());
    for x in v {
        bytes.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::MissingState(format!("{}: {e}", path.display())))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format { path: path.into(), reason: "length not a multiple of 4".into() });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    stage: u8,
    config: TrainConfig,
}

impl Model {
    /// Writes `gaussians.bin/json`, `mlp.bin/json`, `config.json` and, after
    /// Stage 2, `env.pfm` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, cfg: &TrainConfig) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut flat = Vec::with_capacity(RECORD_LEN * self.gaussians.len());
        for g in &self.gaussians {
            flat.extend(g.mu.iter());
            flat.extend(g.rot.to_array());
            flat.extend(g.scale);
            flat.push(g.opacity);
            flat.extend(g.color.iter());
            flat.extend(g.albedo.iter());
            flat.push(g.roughness);
            flat.push(g.gate_logit);
        }
        write_f32s(&dir.join("gaussians.bin"), &flat)?;
        let schema = serde_json::json!({
            "count": self.gaussians.len(),
            "dtype": "float32-le",
            "record": RECORD.iter().map(|(n, k)| serde_json::json!([n, k])).collect::<Vec<_>>(),
        });
        fs::write(dir.join("gaussians.json"), serde_json::to_string_pretty(&schema)?)?;
        self.field.save(dir.join("mlp.bin"), dir.join("mlp.json"))?;
        if let Some(env) = &self.env {
            env.write_pfm(dir.join("env.pfm"))?;
        }
        let meta = CheckpointMeta { stage: self.stage, config: cfg.clone() };
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Model, TrainConfig)> {
        let dir = dir.as_ref();
        let cfg_path = dir.join("config.json");
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::MissingState(format!("{}: {e}", cfg_path.display())))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Format { path: cfg_path, reason: e.to_string() })?;
        let flat = read_f32s(&dir.join("gaussians.bin"))?;
        if flat.len() % RECORD_LEN != 0 {
            return Err(Error::Format { path: dir.join("gaussians.bin"), reason: "truncated record".into() });
        }
        let gaussians = flat
            .chunks_exact(RECORD_LEN)
            .map(|r| Gaussian2D {
                mu: Vec3::new(r[0], r[1], r[2]),
                rot: Quat::from_array([r[3], r[4], r[5], r[6]]),
                scale: [r[7], r[8]],
                opacity: r[9],
                color: Vec3::new(r[10], r[11], r[12]),
                albedo: Vec3::new(r[13], r[14], r[15]),
                roughness: r[16],
                gate_logit: r[17],
            })
            .collect();
        let field = DeformationField::load(dir.join("mlp.bin"), dir.join("mlp.json"))?;
        let env_path = dir.join("env.pfm");
        let env = if env_path.exists() { Some(EnvironmentMap::read_pfm(env_path)?) } else { None };
        if meta.stage >= 2 && env.is_none() {
            return Err(Error::MissingState(format!("{} lacks env.pfm", dir.display())));
        }
        Ok((Model { gaussians, field, env, stage: meta.stage }, meta.config))
    }
}
