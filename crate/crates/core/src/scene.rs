//! Synthetic scenes over analytic primitives: spec parsing, a brute-force
//! reference renderer, dataset generation and evaluation metrics.
//!
//! The reference renderer deliberately re-implements its own BRDF,
//! environment lookup and ray casting so it can serve as an oracle for the
//! splat pipeline.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::geometry::{cameras_from_json, cameras_to_json, Camera, Rng, Vec3};
use crate::image::ImageBuffer;
use crate::shading::EnvironmentMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Motion {
    Static,
    Linear { start: [f64; 3], end: [f64; 3] },
    Oscillation { amplitude: [f64; 3], frequency: f64, #[serde(default)] phase: f64 },
}

impl Default for Motion {
    fn default() -> Self {
        Motion::Static
    }
}

impl Motion {
    pub fn offset(&self, t: f64) -> Vec3 {
        match self {
            Motion::Static => Vec3::zeros(),
            Motion::Linear { start, end } => {
                let (s, e) = (Vec3::from(*start), Vec3::from(*end));
                s + (e - s) * t
            }
            Motion::Oscillation { amplitude, frequency, phase } => {
                Vec3::from(*amplitude) * (2.0 * PI * (frequency * t + phase)).sin()
            }
        }
    }

    pub fn is_dynamic(&self) -> bool {
        !matches!(self, Motion::Static)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    /// Horizontal rectangle (normal +z) of the given extent.
    Plane { size: [f64; 2] },
    /// Axis-aligned box; the bottom face is not sampled with splats.
    Box { size: [f64; 3] },
    Sphere { radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(default)]
    pub name: String,
    #[serde(flatten)]
    pub shape: Shape,
    pub center: [f64; 3],
    pub albedo: [f64; 3],
    pub roughness: f64,
    #[serde(default)]
    pub motion: Motion,
    /// Splat samples along one side of each face (sphere: rings).
    #[serde(default = "default_splats")]
    pub splats_per_side: usize,
}

fn default_splats() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitSpec {
    pub radius: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    #[serde(default)]
    pub target: [f64; 3],
    #[serde(default)]
    pub start_deg: f64,
    #[serde(default = "default_sweep")]
    pub sweep_deg: f64,
}

fn default_sweep() -> f64 {
    360.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvSource {
    Preset {
        preset: String,
        #[serde(default)]
        intensity: Option<f64>,
    },
    File {
        file: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    /// Sphere grid for direct light at primary hits.
    pub env_rows: usize,
    pub env_cols: usize,
    /// Hemisphere grid for the single indirect bounce (0 rows disables it).
    pub indirect_rows: usize,
    pub indirect_cols: usize,
    /// Sphere grid for direct light at secondary hits.
    pub secondary_rows: usize,
    pub secondary_cols: usize,
}

impl Quality {
    pub fn oracle() -> Self {
        Quality { env_rows: 64, env_cols: 256, indirect_rows: 8, indirect_cols: 16, secondary_rows: 16, secondary_cols: 64 }
    }

    pub fn direct_only() -> Self {
        Quality { indirect_rows: 0, ..Self::oracle() }
    }
}

impl Default for Quality {
    fn default() -> Self {
        Self::oracle()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default)]
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    #[serde(default)]
    pub seed: u64,
    /// Timestep used for the static variant and for splat initialization.
    #[serde(default = "default_static_time")]
    pub static_time: f64,
    pub camera: OrbitSpec,
    pub environment: EnvSource,
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub quality: Quality,
    /// Relative positional jitter of initial splat samples.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_static_time() -> f64 {
    0.5
}

fn default_jitter() -> f64 {
    0.1
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidSpec { field: field.into(), reason: reason.into() }
}

impl SceneSpec {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(s).map_err(|e| invalid("spec", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
        let mut spec = Self::from_json_str(&text)?;
        if let EnvSource::File { file } = &mut spec.environment {
            if file.is_relative() {
                *file = path.parent().unwrap_or(Path::new(".")).join(&*file);
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 1 {
            return Err(invalid("frames", "must be >= 1"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("width", "image size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.static_time) {
            return Err(invalid("static_time", "must lie in [0, 1]"));
        }
        if !(self.camera.fov_deg > 0.0 && self.camera.fov_deg < 180.0) {
            return Err(invalid("camera.fov_deg", "must lie in (0, 180)"));
        }
        if !(self.camera.radius > 0.0) {
            return Err(invalid("camera.radius", "must be positive"));
        }
        if self.primitives.is_empty() {
            return Err(invalid("primitives", "at least one primitive is required"));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let field = |f: &str| format!("primitives[{i}].{f}");
            if p.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(invalid(&field("albedo"), "channels must lie in [0, 1]"));
            }
            if !(0.0..=1.0).contains(&p.roughness) {
                return Err(invalid(&field("roughness"), "must lie in [0, 1]"));
            }
            let ok = match &p.shape {
                Shape::Plane { size } => size.iter().all(|s| *s > 0.0),
                Shape::Box { size } => size.iter().all(|s| *s > 0.0),
                Shape::Sphere { radius } => *radius > 0.0,
            };
            if !ok {
                return Err(invalid(&field("size"), "extent must be positive"));
            }
            if p.splats_per_side == 0 {
                return Err(invalid(&field("splats_per_side"), "must be >= 1"));
            }
            if let Motion::Oscillation { frequency, .. } = p.motion {
                if !frequency.is_finite() {
                    return Err(invalid(&field("motion.frequency"), "must be finite"));
                }
            }
        }
        if let EnvSource::Preset { preset, .. } = &self.environment {
            if !ENV_PRESETS.contains(&preset.as_str()) {
                return Err(invalid("environment.preset", format!("unknown preset {preset:?}")));
            }
        }
        Ok(())
    }

    pub fn environment_map(&self) -> Result<EnvironmentMap> {
        match &self.environment {
            EnvSource::Preset { preset, intensity } => {
                let mut env = envmap_presets(preset)?;
                if let Some(i) = intensity {
                    let peak = env.data.iter().cloned().fold(0.0, f64::max);
                    if peak > 0.0 {
                        env = env.scaled(i / peak);
                    }
                }
                Ok(env)
            }
            EnvSource::File { file } => EnvironmentMap::read_pfm(file),
        }
    }

    /// One orbit camera per frame with timestamps k / (frames - 1).
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let o = &self.camera;
        let target = Vec3::from(o.target);
        let n = self.frames;
        (0..n)
            .map(|k| {
                let t = if n > 1 { k as f64 / (n - 1) as f64 } else { self.static_time };
                let frac = if n > 1 { k as f64 / n as f64 } else { 0.0 };
                let az = (o.start_deg + o.sweep_deg * frac).to_radians();
                let el = o.elevation_deg.to_radians();
                let eye = target + Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * o.radius;
                Camera::look_at(eye, target, Vec3::z(), o.fov_deg, self.width, self.height, t)
            })
            .collect()
    }
}

pub const ENV_PRESETS: [&str; 4] = ["uniform", "single-texel", "sunset-like", "overcast"];
/// Hot texel of the "single-texel" preset (row, col): about 51 degrees
/// from zenith.
pub const SINGLE_TEXEL: (usize, usize) = (4, 4);
/// Peak of the "sunset-like" preset (row, col): about 11 degrees above the
/// horizon.
pub const SUNSET_PEAK: (usize, usize) = (6, 24);

/// Procedural 32x16 environment maps.
///
/// * `uniform`: every texel 0.5.
/// * `single-texel`: one texel at [`SINGLE_TEXEL`] of radiance 120.
/// * `sunset-like`: warm lobe peaking at [`SUNSET_PEAK`] over a dim sky.
/// * `overcast`: 0.3 + 0.7 cos(theta) over the upper hemisphere; the
///   dominant direction is the zenith (row 0).
pub fn envmap_presets(name: &str) -> Result<EnvironmentMap> {
    let (w, h) = (32, 16);
    let mut env = EnvironmentMap::new(w, h)?;
    let dir = |r: usize, c: usize| {
        let th = PI * (r as f64 + 0.5) / h as f64;
        let ph = 2.0 * PI * (c as f64 + 0.5) / w as f64;
        Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos())
    };
    match name {
        "uniform" => return EnvironmentMap::uniform(w, h, Vec3::repeat(0.5)),
        "single-texel" => {
            let t = env.index(SINGLE_TEXEL.0, SINGLE_TEXEL.1);
            env.set_texel(t, Vec3::repeat(120.0));
        }
        "sunset-like" => {
            let peak = dir(SUNSET_PEAK.0, SUNSET_PEAK.1);
            for r in 0..h {
                for c in 0..w {
                    let d = dir(r, c);
                    if d.z < 0.0 {
                        env.set_texel(env.index(r, c), Vec3::new(0.05, 0.04, 0.03));
                        continue;
                    }
                    let lobe = 40.0 * ((d.dot(&peak) - 1.0) / 0.02).exp();
                    let sky = 0.2 + 0.3 * d.z;
                    env.set_texel(env.index(r, c), Vec3::new(lobe + sky * 0.6, lobe * 0.55 + sky * 0.7, lobe * 0.25 + sky));
                }
            }
        }
        "overcast" => {
            for r in 0..h {
                for c in 0..w {
                    let d = dir(r, c);
                    let v = if d.z >= 0.0 { 0.3 + 0.7 * d.z } else { 0.05 };
                    env.set_texel(env.index(r, c), Vec3::repeat(v));
                }
            }
        }
        other => return Err(invalid("environment.preset", format!("unknown preset {other:?}"))),
    }
    Ok(env)
}

/// Surface record from the analytic ray caster.
#[derive(Clone, Copy, Debug)]
pub struct SurfaceHit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub primitive: usize,
}

fn hit_primitive(p: &Primitive, center: &Vec3, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
    match &p.shape {
        Shape::Plane { size } => {
            if d.z.abs() < 1e-12 {
                return None;
            }
            let t = (center.z - o.z) / d.z;
            if t <= 1e-9 {
                return None;
            }
            let q = o + d * t;
            if (q.x - center.x).abs() > size[0] / 2.0 || (q.y - center.y).abs() > size[1] / 2.0 {
                return None;
            }
            Some((t, Vec3::z()))
        }
        Shape::Box { size } => {
            let half = Vec3::from(*size) / 2.0;
            let (lo, hi) = (center - half, center + half);
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            let mut axis0 = 0;
            let mut axis1 = 0;
            for a in 0..3 {
                if d[a].abs() < 1e-15 {
                    if o[a] < lo[a] || o[a] > hi[a] {
                        return None;
                    }
                    continue;
                }
                let ta = (lo[a] - o[a]) / d[a];
                let tb = (hi[a] - o[a]) / d[a];
                let (near, far) = if ta < tb { (ta, tb) } else { (tb, ta) };
                if near > t0 {
                    t0 = near;
                    axis0 = a;
                }
                if far < t1 {
                    t1 = far;
                    axis1 = a;
                }
            }
            if t0 > t1 || t1 <= 1e-9 {
                return None;
            }
            let (t, axis) = if t0 > 1e-9 { (t0, axis0) } else { (t1, axis1) };
            let mut n = Vec3::zeros();
            n[axis] = if (o + d * t)[axis] > center[axis] { 1.0 } else { -1.0 };
            Some((t, n))
        }
        Shape::Sphere { radius } => {
            let oc = o - center;
            let b = oc.dot(d);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = if -b - s > 1e-9 { -b - s } else { -b + s };
            if t <= 1e-9 {
                return None;
            }
            Some((t, (o + d * t - center) / *radius))
        }
    }
}

/// Scene posed at one timestep for ray casting.
struct Posed<'a> {
    spec: &'a SceneSpec,
    centers: Vec<Vec3>,
}

impl<'a> Posed<'a> {
    fn new(spec: &'a SceneSpec, t: f64) -> Self {
        let centers = spec.primitives.iter().map(|p| Vec3::from(p.center) + p.motion.offset(t)).collect();
        Posed { spec, centers }
    }

    fn cast(&self, o: &Vec3, d: &Vec3) -> Option<SurfaceHit> {
        let mut best: Option<SurfaceHit> = None;
        for (i, p) in self.spec.primitives.iter().enumerate() {
            if let Some((t, n)) = hit_primitive(p, &self.centers[i], o, d) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(SurfaceHit { t, point: o + d * t, normal: n, primitive: i });
                }
            }
        }
        best
    }

    fn occluded(&self, o: &Vec3, d: &Vec3) -> bool {
        self.spec.primitives.iter().enumerate().any(|(i, p)| hit_primitive(p, &self.centers[i], o, d).is_some())
    }
}

/// Radiance arriving from a cell of a sphere grid.
struct LightCell {
    dir: Vec3,
    /// radiance * solid angle
    power: Vec3,
}

/// Env cells of a rows x cols sphere grid. Cells whose radiance is zero are
/// dropped.
fn light_cells(env: &EnvironmentMap, rows: usize, cols: usize) -> Vec<LightCell> {
    let mut out = Vec::new();
    for r in 0..rows {
        let th0 = PI * r as f64 / rows as f64;
        let th1 = PI * (r + 1) as f64 / rows as f64;
        let th = 0.5 * (th0 + th1);
        let omega = 2.0 * PI / cols as f64 * (th0.cos() - th1.cos());
        for c in 0..cols {
            let ph = 2.0 * PI * (c as f64 + 0.5) / cols as f64;
            let dir = Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos());
            // nearest texel, computed from the cell center angles directly
            let er = ((th / PI) * env.height as f64).floor().min(env.height as f64 - 1.0) as usize;
            let ec = ((ph / (2.0 * PI)) * env.width as f64).floor().min(env.width as f64 - 1.0) as usize;
            let k = 3 * (er * env.width + ec);
            let l = Vec3::new(env.data[k], env.data[k + 1], env.data[k + 2]);
            if l.iter().all(|v| *v == 0.0) {
                continue;
            }
            out.push(LightCell { dir, power: l * omega });
        }
    }
    out
}

/// Reflectance written in tangent form: GGX D = a^2 / (pi cos^4 (a^2 + tan^2)^2),
/// Smith G = 1 / (1 + L(v) + L(l)) with L(x) = (sqrt(1 + a^2 tan^2 x) - 1) / 2.
fn reference_brdf(albedo: &Vec3, roughness: f64, n: &Vec3, l: &Vec3, v: &Vec3) -> Vec3 {
    let diffuse = albedo * (1.0 / PI);
    let cl = n.dot(l);
    let cv = n.dot(v);
    if cl <= 0.0 || cv <= 0.0 {
        return diffuse;
    }
    let a = {
        let r = roughness.max(0.03);
        r * r
    };
    let hv = (l + v).normalize();
    let ch = n.dot(&hv).clamp(1e-12, 1.0);
    let tan2 = |c: f64| (1.0 - c * c).max(0.0) / (c * c);
    let d = a * a / (PI * ch.powi(4) * (a * a + tan2(ch)).powi(2));
    let lambda = |c: f64| 0.5 * ((1.0 + a * a * tan2(c)).sqrt() - 1.0);
    let g = 1.0 / (1.0 + lambda(cl) + lambda(cv));
    let f = 0.04 + 0.96 * (1.0 - v.dot(&hv).max(0.0)).powi(5);
    diffuse + Vec3::repeat(d * f * g / (4.0 * cl * cv).max(1e-6))
}

const SHADOW_EPS: f64 = 1e-6;

fn direct(posed: &Posed, cells: &[LightCell], hit: &SurfaceHit, v: &Vec3) -> Vec3 {
    let p = &posed.spec.primitives[hit.primitive];
    let albedo = Vec3::from(p.albedo);
    let mut n = hit.normal;
    if n.dot(v) < 0.0 {
        n = -n;
    }
    let origin = hit.point + n * SHADOW_EPS;
    let mut out = Vec3::zeros();
    for cell in cells {
        let c = n.dot(&cell.dir);
        if c <= 0.0 || posed.occluded(&origin, &cell.dir) {
            continue;
        }
        out += reference_brdf(&albedo, p.roughness, &n, &cell.dir, v).component_mul(&cell.power) * c;
    }
    out
}

/// Per-pixel oracle outputs.
pub struct ReferenceFrame {
    pub color: ImageBuffer,
    pub mask: ImageBuffer,
    pub albedo: ImageBuffer,
    pub roughness: ImageBuffer,
    pub normal: ImageBuffer,
}

/// Brute-force direct + single-bounce render of the analytic scene.
pub fn reference_frame(spec: &SceneSpec, env: &EnvironmentMap, cam: &Camera, t: f64, quality: &Quality) -> ReferenceFrame {
    let posed = Posed::new(spec, t);
    let cells = light_cells(env, quality.env_rows, quality.env_cols);
    let secondary = light_cells(env, quality.secondary_rows.max(1), quality.secondary_cols.max(1));
    let (w, h) = (cam.width, cam.height);
    let rows: Vec<Vec<[f64; 11]>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let mut out = [0.0; 11];
                    let ray = cam.ray_through(x as f64 + 0.5, y as f64 + 0.5);
                    let Some(hit) = posed.cast(&ray.origin, &ray.dir) else {
                        return out;
                    };
                    let v = -ray.dir;
                    let mut n = hit.normal;
                    if n.dot(&v) < 0.0 {
                        n = -n;
                    }
                    let prim = &spec.primitives[hit.primitive];
                    let mut c = direct(&posed, &cells, &hit, &v);
                    if quality.indirect_rows > 0 {
                        c += indirect(&posed, &secondary, &hit, &n, &v, quality);
                    }
                    out[..3].copy_from_slice(c.as_slice());
                    out[3] = 1.0;
                    out[4..7].copy_from_slice(&prim.albedo);
                    out[7] = prim.roughness;
                    out[8..11].copy_from_slice(n.as_slice());
                    out
                })
                .collect()
        })
        .collect();
    let mut f = ReferenceFrame {
        color: ImageBuffer::new(w, h, 3),
        mask: ImageBuffer::new(w, h, 1),
        albedo: ImageBuffer::new(w, h, 3),
        roughness: ImageBuffer::new(w, h, 1),
        normal: ImageBuffer::new(w, h, 3),
    };
    for (y, row) in rows.iter().enumerate() {
        for (x, px) in row.iter().enumerate() {
            let i = y * w + x;
            f.color.pixel_mut(i).copy_from_slice(&px[..3]);
            f.mask.data[i] = px[3];
            f.albedo.pixel_mut(i).copy_from_slice(&px[4..7]);
            f.roughness.data[i] = px[7];
            f.normal.pixel_mut(i).copy_from_slice(&px[8..11]);
        }
    }
    f
}

/// One bounce gathered over a midpoint grid in (theta, phi) of the
/// hemisphere around `n`; the radiance leaving the secondary hit is its
/// direct light only.
fn indirect(posed: &Posed, cells: &[LightCell], hit: &SurfaceHit, n: &Vec3, v: &Vec3, q: &Quality) -> Vec3 {
    let prim = &posed.spec.primitives[hit.primitive];
    let albedo = Vec3::from(prim.albedo);
    // any tangent pair works for the grid
    let a = if n.x.abs() > 0.9 { Vec3::y() } else { Vec3::x() };
    let b1 = n.cross(&a).normalize();
    let b2 = n.cross(&b1);
    let origin = hit.point + n * SHADOW_EPS;
    let (nt, np) = (q.indirect_rows, q.indirect_cols);
    let dt = 0.5 * PI / nt as f64;
    let dp = 2.0 * PI / np as f64;
    let mut out = Vec3::zeros();
    for i in 0..nt {
        let th = (i as f64 + 0.5) * dt;
        for j in 0..np {
            let ph = (j as f64 + 0.5) * dp;
            let d = b1 * (th.sin() * ph.cos()) + b2 * (th.sin() * ph.sin()) + n * th.cos();
            let Some(h2) = posed.cast(&origin, &d) else { continue };
            let l = direct(posed, cells, &h2, &-d);
            let w = th.sin() * dt * dp * th.cos();
            out += reference_brdf(&albedo, prim.roughness, n, &d, v).component_mul(&l) * w;
        }
    }
    out
}

pub fn reference_render(spec: &SceneSpec, env: &EnvironmentMap, cam: &Camera, t: f64, quality: &Quality) -> ImageBuffer {
    reference_frame(spec, env, cam, t, quality).color
}

/// Initial splat samples of every primitive at one timestep.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InitPoints {
    pub positions: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    /// Tangent direction of the sample's local frame.
    pub tangents: Vec<[f64; 3]>,
    pub scales: Vec<f64>,
    pub primitive: Vec<usize>,
    pub dynamic: Vec<bool>,
}

impl InitPoints {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn push(&mut self, p: Vec3, n: Vec3, tan: Vec3, s: f64, prim: usize, dynamic: bool) {
        self.positions.push(p.into());
        self.normals.push(n.into());
        self.tangents.push(tan.into());
        self.scales.push(s);
        self.primitive.push(prim);
        self.dynamic.push(dynamic);
    }
}

/// Samples every primitive surface on a regular grid (with jitter) posed at
/// `t`. Splat scale is 0.7 of the grid spacing.
pub fn sample_surfaces(spec: &SceneSpec, t: f64, rng: &mut Rng) -> InitPoints {
    let mut pts = InitPoints::default();
    for (pi, p) in spec.primitives.iter().enumerate() {
        let c = Vec3::from(p.center) + p.motion.offset(t);
        let dynamic = p.motion.is_dynamic();
        let k = p.splats_per_side;
        let mut face = |origin: Vec3, eu: Vec3, ev: Vec3, n: Vec3, rng: &mut Rng| {
            let (lu, lv) = (eu.norm(), ev.norm());
            let spacing = (lu / k as f64).max(lv / k as f64);
            let ku = ((lu / spacing).round() as usize).max(1);
            let kv = ((lv / spacing).round() as usize).max(1);
            for i in 0..ku {
                for j in 0..kv {
                    let ju = (rng.uniform() - 0.5) * spec.jitter;
                    let jv = (rng.uniform() - 0.5) * spec.jitter;
                    let u = (i as f64 + 0.5 + ju) / ku as f64 - 0.5;
                    let v = (j as f64 + 0.5 + jv) / kv as f64 - 0.5;
                    pts.push(origin + eu * u + ev * v, n, eu / lu, 0.7 * spacing, pi, dynamic);
                }
            }
        };
        match &p.shape {
            Shape::Plane { size } => {
                face(c, Vec3::x() * size[0], Vec3::y() * size[1], Vec3::z(), rng);
            }
            Shape::Box { size } => {
                let s = Vec3::from(*size);
                let hx = Vec3::x() * s.x;
                let hy = Vec3::y() * s.y;
                let hz = Vec3::z() * s.z;
                face(c + hz / 2.0, hx, hy, Vec3::z(), rng);
                face(c + hx / 2.0, hy, hz, Vec3::x(), rng);
                face(c - hx / 2.0, hy, hz, -Vec3::x(), rng);
                face(c + hy / 2.0, hx, hz, Vec3::y(), rng);
                face(c - hy / 2.0, hx, hz, -Vec3::y(), rng);
            }
            Shape::Sphere { radius } => {
                // Fibonacci lattice with about k^2 * 4 / pi samples
                let count = ((k * k) as f64 * 4.0 / PI).ceil() as usize;
                let golden = PI * (3.0 - 5f64.sqrt());
                let spacing = radius * (4.0 * PI / count as f64).sqrt();
                for i in 0..count {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).sqrt();
                    let ph = golden * i as f64;
                    let n = Vec3::new(r * ph.cos(), r * ph.sin(), z);
                    let a = if n.x.abs() > 0.9 { Vec3::y() } else { Vec3::x() };
                    let tan = n.cross(&a).normalize();
                    pts.push(c + n * *radius, n, tan, 0.7 * spacing, pi, dynamic);
                }
            }
        }
    }
    pts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveLabel {
    pub name: String,
    pub kind: String,
    pub dynamic: bool,
}

/// A generated (or loaded) capture.
#[derive(Clone, Debug)]
pub struct SceneDataset {
    pub frames: Vec<ImageBuffer>,
    pub cameras: Vec<Camera>,
    pub masks: Vec<ImageBuffer>,
    pub gt_albedo: Vec<ImageBuffer>,
    pub gt_roughness: Vec<ImageBuffer>,
    pub gt_normal: Vec<ImageBuffer>,
    pub gt_env: Option<EnvironmentMap>,
    pub labels: Vec<PrimitiveLabel>,
    pub init: InitPoints,
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["frames", "masks", "gt/albedo", "gt/rough", "gt/normal"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        for (i, f) in self.frames.iter().enumerate() {
            f.write_pfm(dir.join(format!("frames/{i:04}.pfm")))?;
            self.masks[i].write_pgm(dir.join(format!("masks/{i:04}.pgm")))?;
        }
        for (sub, imgs) in [("gt/albedo", &self.gt_albedo), ("gt/rough", &self.gt_roughness), ("gt/normal", &self.gt_normal)] {
            for (i, img) in imgs.iter().enumerate() {
                img.write_pfm(dir.join(format!("{sub}/{i:04}.pfm")))?;
            }
        }
        if let Some(env) = &self.gt_env {
            env.write_pfm(dir.join("gt/env.pfm"))?;
        }
        fs::write(dir.join("cameras.json"), serde_json::to_string_pretty(&cameras_to_json(&self.cameras))?)?;
        fs::write(dir.join("labels.json"), serde_json::to_string_pretty(&json!({ "primitives": self.labels }))?)?;
        fs::write(dir.join("init_points.json"), serde_json::to_string(&self.init)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cams_path = dir.join("cameras.json");
        if !cams_path.exists() {
            return Err(Error::MissingState(format!("{} has no cameras.json", dir.display())));
        }
        let cameras = cameras_from_json(&serde_json::from_str(&fs::read_to_string(&cams_path)?)?)?;
        let mut frames = Vec::new();
        let mut masks = Vec::new();
        for i in 0..cameras.len() {
            frames.push(ImageBuffer::read_pfm(dir.join(format!("frames/{i:04}.pfm")))?);
            let mpath = dir.join(format!("masks/{i:04}.pgm"));
            masks.push(if mpath.exists() {
                ImageBuffer::read_pgm(mpath)?
            } else {
                ImageBuffer::filled(frames[i].width, frames[i].height, 1, 1.0)
            });
        }
        let load_seq = |sub: &str| -> Result<Vec<ImageBuffer>> {
            let mut out = Vec::new();
            for i in 0..cameras.len() {
                let p = dir.join(format!("{sub}/{i:04}.pfm"));
                if !p.exists() {
                    return Ok(Vec::new());
                }
                out.push(ImageBuffer::read_pfm(p)?);
            }
            Ok(out)
        };
        let env_path = dir.join("gt/env.pfm");
        let gt_env = if env_path.exists() { Some(EnvironmentMap::read_pfm(env_path)?) } else { None };
        let labels = match fs::read_to_string(dir.join("labels.json")) {
            Ok(s) => {
                let v: serde_json::Value = serde_json::from_str(&s)?;
                serde_json::from_value(v["primitives"].clone())?
            }
            Err(_) => Vec::new(),
        };
        let init = match fs::read_to_string(dir.join("init_points.json")) {
            Ok(s) => serde_json::from_str(&s)?,
            Err(_) => InitPoints::default(),
        };
        Ok(SceneDataset {
            gt_albedo: load_seq("gt/albedo")?,
            gt_roughness: load_seq("gt/rough")?,
            gt_normal: load_seq("gt/normal")?,
            frames,
            cameras,
            masks,
            gt_env,
            labels,
            init,
        })
    }
}

/// Both variants of a generated scene.
pub struct GeneratedScene {
    pub dynamic: SceneDataset,
    pub static_: SceneDataset,
}

impl GeneratedScene {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.dynamic.save(dir.as_ref().join("dynamic"))?;
        self.static_.save(dir.as_ref().join("static"))
    }
}

fn render_variant(spec: &SceneSpec, env: &EnvironmentMap, cams: &[Camera], init: &InitPoints) -> SceneDataset {
    let frames: Vec<ReferenceFrame> = cams.iter().map(|c| reference_frame(spec, env, c, c.time, &spec.quality)).collect();
    let labels = spec
        .primitives
        .iter()
        .enumerate()
        .map(|(i, p)| PrimitiveLabel {
            name: if p.name.is_empty() { format!("primitive{i}") } else { p.name.clone() },
            kind: match p.shape {
                Shape::Plane { .. } => "plane",
                Shape::Box { .. } => "box",
                Shape::Sphere { .. } => "sphere",
            }
            .into(),
            dynamic: p.motion.is_dynamic(),
        })
        .collect();
    let mut ds = SceneDataset {
        frames: Vec::new(),
        cameras: cams.to_vec(),
        masks: Vec::new(),
        gt_albedo: Vec::new(),
        gt_roughness: Vec::new(),
        gt_normal: Vec::new(),
        gt_env: Some(env.clone()),
        labels,
        init: init.clone(),
    };
    for f in frames {
        ds.frames.push(f.color);
        ds.masks.push(f.mask);
        ds.gt_albedo.push(f.albedo);
        ds.gt_roughness.push(f.roughness);
        ds.gt_normal.push(f.normal);
    }
    ds
}

/// Renders the dynamic capture and its static counterpart (every frame at
/// `static_time`, same viewpoints).
pub fn gen_scene(spec: &SceneSpec, seed: u64) -> Result<GeneratedScene> {
    spec.validate()?;
    let env = spec.environment_map()?;
    let cams = spec.cameras()?;
    let mut rng = Rng::stream(seed, 0x696e6974);
    let init = sample_surfaces(spec, spec.static_time, &mut rng);
    let dynamic = render_variant(spec, &env, &cams, &init);
    let static_cams: Vec<Camera> = cams.iter().map(|c| c.with_time(spec.static_time)).collect::<Result<_>>()?;
    let mut st_spec = spec.clone();
    for p in st_spec.primitives.iter_mut() {
        let off = p.motion.offset(spec.static_time);
        p.center = (Vec3::from(p.center) + off).into();
        p.motion = Motion::Static;
    }
    let mut static_ = render_variant(&st_spec, &env, &static_cams, &init);
    static_.init.dynamic.iter_mut().for_each(|d| *d = false);
    Ok(GeneratedScene { dynamic, static_ })
}

pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aligned_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aligned_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aligned_ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angular_error_deg: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Image,
    Albedo,
    Roughness,
    Envmap,
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_shape(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len().max(1) as f64)
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * m.log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Per-channel least-squares scale of `pred` onto `gt` over `mask`
/// (all pixels when `None`).
pub fn align_channels(pred: &ImageBuffer, gt: &ImageBuffer, mask: Option<&ImageBuffer>) -> Result<ImageBuffer> {
    pred.check_shape(gt)?;
    let mut out = pred.clone();
    for c in 0..pred.channels {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..pred.pixel_count() {
            if mask.is_some_and(|m| m.data[i] < 0.5) {
                continue;
            }
            let (p, g) = (pred.data[i * pred.channels + c], gt.data[i * gt.channels + c]);
            num += p * g;
            den += p * p;
        }
        let s = if den > 0.0 { num / den } else { 1.0 };
        for i in 0..pred.pixel_count() {
            out.data[i * pred.channels + c] *= s;
        }
    }
    Ok(out)
}

/// MSE restricted to mask pixels.
pub fn masked_mse(a: &ImageBuffer, b: &ImageBuffer, mask: &ImageBuffer) -> Result<f64> {
    a.check_shape(b)?;
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..a.pixel_count() {
        if mask.data[i] < 0.5 {
            continue;
        }
        for c in 0..a.channels {
            let d = a.data[i * a.channels + c] - b.data[i * b.channels + c];
            s += d * d;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

/// Angle in degrees between the argmax-texel directions of two maps.
pub fn envmap_angular_error(pred: &EnvironmentMap, gt: &EnvironmentMap) -> f64 {
    let d = |e: &EnvironmentMap| {
        let (r, c) = e.argmax();
        crate::shading::texel_to_dir(r, c, e.width, e.height)
    };
    d(pred).angle(&d(gt)).to_degrees()
}

/// Image metrics; albedo additionally reports the scale-aligned variant
/// (over `mask` when given) and envmaps report the dominant-light angle.
pub fn eval_metrics(pred: &ImageBuffer, gt: &ImageBuffer, kind: MetricKind, mask: Option<&ImageBuffer>) -> Result<MetricRecord> {
    pred.check_shape(gt)?;
    let m = mse(pred, gt)?;
    let mut rec = MetricRecord { psnr: psnr_from_mse(m), ssim: crate::losses::ssim(pred, gt)?, mse: m, ..Default::default() };
    match kind {
        MetricKind::Albedo => {
            let aligned = align_channels(pred, gt, mask)?;
            let am = mse(&aligned, gt)?;
            rec.aligned_mse = Some(am);
            rec.aligned_psnr = Some(psnr_from_mse(am));
            rec.aligned_ssim = Some(crate::losses::ssim(&aligned, gt)?);
        }
        MetricKind::Envmap => {
            let p = EnvironmentMap::from_image(pred)?;
            let g = EnvironmentMap::from_image(gt)?;
            rec.angular_error_deg = Some(envmap_angular_error(&p, &g));
        }
        _ => {}
    }
    Ok(rec)
}
