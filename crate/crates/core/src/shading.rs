//! Environment lighting, the microfacet BRDF, stratified hemisphere
//! sampling and deferred Monte Carlo shading with traced visibility and
//! one-bounce indirect light.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{orthonormal_basis, Ray, Rng, Vec3};
use crate::image::ImageBuffer;
use crate::splat::{SplatBvh, PosedSplat, MAX_ALPHA, CUTOFF_SQ};

/// Fresnel reflectance at normal incidence (dielectric).
pub const F0: f64 = 0.04;
/// Lower bound applied to roughness before evaluating the specular lobe.
pub const MIN_ROUGHNESS: f64 = 0.03;
const DENOM_FLOOR: f64 = 1e-6;

/// Lat-long radiance map. Row 0 is the +z pole, columns follow
/// atan2(y, x) in [0, 2pi).
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentMap {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<f64>,
}

impl EnvironmentMap {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if height == 0 || width != 2 * height {
            return Err(Error::InvalidInput(format!("environment map must be 2:1, got {width}x{height}")));
        }
        Ok(EnvironmentMap { width, height, data: vec![0.0; width * height * 3] })
    }

    pub fn uniform(width: usize, height: usize, value: Vec3) -> Result<Self> {
        let mut env = Self::new(width, height)?;
        for t in 0..env.texel_count() {
            env.set_texel(t, value);
        }
        Ok(env)
    }

    pub fn texel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn texel(&self, idx: usize) -> Vec3 {
        Vec3::new(self.data[3 * idx], self.data[3 * idx + 1], self.data[3 * idx + 2])
    }

    pub fn set_texel(&mut self, idx: usize, v: Vec3) {
        self.data[3 * idx..3 * idx + 3].copy_from_slice(v.as_slice());
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn texel_index(&self, dir: &Vec3) -> usize {
        let (r, c) = dir_to_texel(dir, self.width, self.height);
        self.index(r, c)
    }

    pub fn lookup(&self, dir: &Vec3) -> Vec3 {
        self.texel(self.texel_index(dir))
    }

    /// Solid angle covered by one texel of the given row.
    pub fn texel_solid_angle(&self, row: usize) -> f64 {
        let t0 = PI * row as f64 / self.height as f64;
        let t1 = PI * (row + 1) as f64 / self.height as f64;
        2.0 * PI / self.width as f64 * (t0.cos() - t1.cos())
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn clamp_nonnegative(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.max(0.0));
    }

    /// Rotates the map about +z by `degrees` (nearest-texel resampling).
    pub fn rotated(&self, degrees: f64) -> Self {
        let mut out = self.clone();
        let a = -degrees.to_radians();
        let (s, c) = a.sin_cos();
        for row in 0..self.height {
            for col in 0..self.width {
                let d = texel_to_dir(row, col, self.width, self.height);
                let src = Vec3::new(c * d.x - s * d.y, s * d.x + c * d.y, d.z);
                out.set_texel(self.index(row, col), self.lookup(&src));
            }
        }
        out
    }

    /// Row/col of the brightest texel (by channel sum).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, f64::NEG_INFINITY);
        for t in 0..self.texel_count() {
            let v = self.texel(t).sum();
            if v > best.1 {
                best = (t, v);
            }
        }
        (best.0 / self.width, best.0 % self.width)
    }

    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer::from_data(self.width, self.height, 3, self.data.clone()).expect("shape")
    }

    pub fn from_image(img: &ImageBuffer) -> Result<Self> {
        if img.channels != 3 {
            return Err(Error::InvalidInput("environment map needs 3 channels".into()));
        }
        let mut env = Self::new(img.width, img.height)?;
        env.data.clone_from(&img.data);
        Ok(env)
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_image().write_pfm(path)
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_image(&ImageBuffer::read_pfm(path)?)
    }
}

/// Nearest texel for a unit direction: column from the azimuth, row from
/// the polar angle measured from +z.
pub fn dir_to_texel(dir: &Vec3, width: usize, height: usize) -> (usize, usize) {
    let phi = dir.y.atan2(dir.x).rem_euclid(2.0 * PI);
    let theta = dir.z.clamp(-1.0, 1.0).acos();
    let col = ((phi / (2.0 * PI) * width as f64) as usize).min(width - 1);
    let row = ((theta / PI * height as f64) as usize).min(height - 1);
    (row, col)
}

/// Direction through the center of a texel.
pub fn texel_to_dir(row: usize, col: usize, width: usize, height: usize) -> Vec3 {
    let theta = PI * (row as f64 + 0.5) / height as f64;
    let phi = 2.0 * PI * (col as f64 + 0.5) / width as f64;
    Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
}

/// Jittered m x m grid over (1 - cos(theta), phi / 2pi) with m = floor(sqrt(n)),
/// mapped to the hemisphere around `normal`.
pub fn stratified_hemisphere(normal: &Vec3, n: usize, rng: &mut Rng) -> Result<Vec<Vec3>> {
    if n < 1 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    let m = (n as f64).sqrt().floor() as usize;
    let m = if (m + 1) * (m + 1) <= n { m + 1 } else { m };
    let (b1, b2) = orthonormal_basis(normal);
    let mut out = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            let u = (i as f64 + rng.uniform()) / m as f64;
            let v = (j as f64 + rng.uniform()) / m as f64;
            let cos_t = 1.0 - u;
            let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
            let phi = 2.0 * PI * v;
            out.push(b1 * (sin_t * phi.cos()) + b2 * (sin_t * phi.sin()) + normal * cos_t);
        }
    }
    Ok(out)
}

/// Specular lobe D*F*G / (4 NL NV) and its derivative with respect to the
/// (unclamped) roughness. Zero when either direction is below the surface.
pub fn brdf_specular(roughness: f64, n: &Vec3, wi: &Vec3, wo: &Vec3) -> (f64, f64) {
    let nl = n.dot(wi);
    let nv = n.dot(wo);
    if nl <= 0.0 || nv <= 0.0 {
        return (0.0, 0.0);
    }
    let floored = roughness < MIN_ROUGHNESS;
    let r = roughness.max(MIN_ROUGHNESS);
    let a = r * r;
    let a2 = a * a;
    let h = (wi + wo).normalize();
    let nh = n.dot(&h).max(0.0);
    let vh = wo.dot(&h).max(0.0);

    let k = nh * nh * (a2 - 1.0) + 1.0;
    let d = a2 / (PI * k * k);
    let f = F0 + (1.0 - F0) * (1.0 - vh).powi(5);
    let lv = (nv * nv * (1.0 - a2) + a2).sqrt();
    let ll = (nl * nl * (1.0 - a2) + a2).sqrt();
    let s = nl * lv + nv * ll;
    let g = 2.0 * nl * nv / s;
    let denom = (4.0 * nl * nv).max(DENOM_FLOOR);
    let spec = d * f * g / denom;
    if floored {
        return (spec, 0.0);
    }
    let dd_da = 2.0 * a / (PI * k * k) - 4.0 * a * a2 * nh * nh / (PI * k * k * k);
    let ds_da = nl * a * (1.0 - nv * nv) / lv + nv * a * (1.0 - nl * nl) / ll;
    let dg_da = -g * ds_da / s;
    let dspec = f / denom * (dd_da * g + d * dg_da) * 2.0 * r;
    (spec, dspec)
}

/// Diffuse plus microfacet specular reflectance.
pub fn brdf_eval(albedo: &Vec3, roughness: f64, n: &Vec3, wi: &Vec3, wo: &Vec3) -> Vec3 {
    let (spec, _) = brdf_specular(roughness, n, wi, wo);
    albedo / PI + Vec3::repeat(spec)
}

/// Radiance source for splats hit by secondary rays.
#[derive(Clone, Debug)]
pub enum IndirectSource {
    /// Blended splat colors.
    Colors,
    /// Precomputed outgoing radiance per splat for its (+n, -n) faces.
    Radiance(Vec<[Vec3; 2]>),
    /// No indirect contribution.
    Off,
}

/// Secondary-ray tracer over a fixed set of posed splats.
pub struct Tracer {
    pub splats: Vec<PosedSplat>,
    bvh: SplatBvh,
    pub source: IndirectSource,
    /// Origin offset along the surface normal.
    pub offset: f64,
}

pub const DEFAULT_RAY_OFFSET: f64 = 1e-3;

impl Tracer {
    pub fn new(splats: Vec<PosedSplat>, source: IndirectSource) -> Self {
        let bvh = SplatBvh::build(&splats);
        Tracer { splats, bvh, source, offset: DEFAULT_RAY_OFFSET }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new(), IndirectSource::Off)
    }

    /// Transmittance and composited radiance along `dir` leaving `x`
    /// (offset along `n`).
    pub fn trace(&self, x: &Vec3, n: &Vec3, dir: &Vec3) -> (f64, Vec3) {
        let ray = Ray { origin: x + n * self.offset, dir: *dir };
        let mut trans = 1.0;
        let mut radiance = Vec3::zeros();
        for (i, h) in self.bvh.trace(&ray, &self.splats) {
            if h.u * h.u + h.v * h.v > CUTOFF_SQ {
                continue;
            }
            let s = &self.splats[i];
            let alpha = (s.opacity * h.weight).min(MAX_ALPHA);
            if alpha <= 0.0 {
                continue;
            }
            let c = match &self.source {
                IndirectSource::Colors => s.color,
                IndirectSource::Radiance(r) => {
                    // the face seen by the ray is the one whose normal opposes it
                    if s.frame.n.dot(dir) < 0.0 {
                        r[i][0]
                    } else {
                        r[i][1]
                    }
                }
                IndirectSource::Off => Vec3::zeros(),
            };
            radiance += c * (alpha * trans);
            trans *= 1.0 - alpha;
        }
        (trans, radiance)
    }

    pub fn visibility(&self, x: &Vec3, n: &Vec3, dir: &Vec3) -> f64 {
        self.trace(x, n, dir).0
    }
}

pub fn trace_visibility(x: &Vec3, n: &Vec3, dir: &Vec3, tracer: &Tracer) -> f64 {
    tracer.visibility(x, n, dir)
}

pub fn trace_indirect(x: &Vec3, n: &Vec3, dir: &Vec3, tracer: &Tracer) -> Vec3 {
    tracer.trace(x, n, dir).1
}

/// Surface attributes of one foreground pixel.
#[derive(Clone, Copy, Debug)]
pub struct ShadePoint {
    pub position: Vec3,
    /// Unit normal facing the viewer.
    pub normal: Vec3,
    /// Unit direction from the point toward the camera.
    pub view: Vec3,
    pub albedo: Vec3,
    pub roughness: f64,
}

/// One retained Monte Carlo sample.
#[derive(Clone, Copy, Debug)]
pub struct ShadingSample {
    pub dir: Vec3,
    pub texel: usize,
    pub env: Vec3,
    pub visibility: f64,
    pub indirect: Vec3,
    pub cos: f64,
    pub spec: f64,
    pub dspec: f64,
}

#[derive(Clone, Debug)]
pub struct ShadeResult {
    pub color: Vec3,
    /// 2pi / N
    pub weight: f64,
    pub samples: Vec<ShadingSample>,
}

/// Monte Carlo estimate of the outgoing radiance toward the viewer.
pub fn shade_pixel(p: &ShadePoint, env: &EnvironmentMap, tracer: &Tracer, n_rays: usize, rng: &mut Rng) -> Result<ShadeResult> {
    let dirs = stratified_hemisphere(&p.normal, n_rays, rng)?;
    let weight = 2.0 * PI / dirs.len() as f64;
    let mut color = Vec3::zeros();
    let mut samples = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let cos = dir.dot(&p.normal);
        if cos <= 0.0 {
            continue;
        }
        let texel = env.texel_index(&dir);
        let l_env = env.texel(texel);
        let (vis, ind) = tracer.trace(&p.position, &p.normal, &dir);
        let (spec, dspec) = brdf_specular(p.roughness, &p.normal, &dir, &p.view);
        let f = p.albedo / PI + Vec3::repeat(spec);
        let incoming = l_env * vis + ind;
        color += f.component_mul(&incoming) * (cos * weight);
        samples.push(ShadingSample { dir, texel, env: l_env, visibility: vis, indirect: ind, cos, spec, dspec });
    }
    Ok(ShadeResult { color, weight, samples })
}

/// Gradients of one shaded pixel with respect to the material inputs and
/// the environment texels (returned as (texel, rgb) contributions).
pub struct ShadeGrad {
    pub albedo: Vec3,
    pub roughness: f64,
    pub env: Vec<(usize, Vec3)>,
}

pub fn shade_backward(p: &ShadePoint, res: &ShadeResult, gc: &Vec3) -> ShadeGrad {
    let mut g = ShadeGrad { albedo: Vec3::zeros(), roughness: 0.0, env: Vec::with_capacity(res.samples.len()) };
    for s in &res.samples {
        let incoming = s.env * s.visibility + s.indirect;
        let k = s.cos * res.weight;
        g.albedo += gc.component_mul(&incoming) * (k / PI);
        g.roughness += gc.dot(&incoming) * s.dspec * k;
        let f = p.albedo / PI + Vec3::repeat(s.spec);
        g.env.push((s.texel, gc.component_mul(&f) * (s.visibility * k)));
    }
    g
}

/// Shades every foreground pixel (opacity above `threshold`) of a G-buffer
/// with the given camera center; background stays black.
pub fn shade_gbuffer(
    gbuf: &crate::splat::GBuffer,
    cam_center: &Vec3,
    env: &EnvironmentMap,
    tracer: &Tracer,
    n_rays: usize,
    seed: u64,
    threshold: f64,
) -> Result<ImageBuffer> {
    let (w, h) = (gbuf.opacity.width, gbuf.opacity.height);
    if n_rays < 1 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    let pixels: Vec<Vec3> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let pt = match gbuffer_point(gbuf, i, cam_center, threshold) {
                Some(p) => p,
                None => return Vec3::zeros(),
            };
            let mut rng = Rng::stream(seed, i as u64);
            shade_pixel(&pt, env, tracer, n_rays, &mut rng).map(|r| r.color).unwrap_or_default()
        })
        .collect();
    let data = pixels.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    ImageBuffer::from_data(w, h, 3, data)
}

/// Shading inputs of one G-buffer pixel, or `None` for background.
pub fn gbuffer_point(gbuf: &crate::splat::GBuffer, i: usize, cam_center: &Vec3, threshold: f64) -> Option<ShadePoint> {
    if gbuf.opacity.data[i] <= threshold {
        return None;
    }
    let normal = Vec3::from_column_slice(gbuf.normal.pixel(i));
    if normal.norm() < 0.5 {
        return None;
    }
    let position = Vec3::from_column_slice(gbuf.position.pixel(i));
    let view = (cam_center - position).normalize();
    let mut normal = normal.normalize();
    if normal.dot(&view) < 0.0 {
        normal = -normal;
    }
    Some(ShadePoint {
        position,
        normal,
        view,
        albedo: Vec3::from_column_slice(gbuf.albedo.pixel(i)),
        roughness: gbuf.roughness.data[i],
    })
}

/// Outgoing radiance of every splat for both faces, viewed along the face
/// normal, with traced visibility and no indirect term.
pub fn splat_radiance(splats: &[PosedSplat], env: &EnvironmentMap, n_rays: usize, seed: u64) -> Vec<[Vec3; 2]> {
    let tracer = Tracer::new(splats.to_vec(), IndirectSource::Off);
    (0..splats.len())
        .into_par_iter()
        .map(|i| {
            let s = &splats[i];
            let mut out = [Vec3::zeros(); 2];
            for (face, sign) in [(0usize, 1.0), (1, -1.0)] {
                let n = s.frame.n * sign;
                let pt = ShadePoint { position: s.mu, normal: n, view: n, albedo: s.albedo, roughness: s.roughness };
                let mut rng = Rng::stream(seed ^ 0x7261_6469, (2 * i + face) as u64);
                out[face] = shade_pixel(&pt, env, &tracer, n_rays, &mut rng).map(|r| r.color).unwrap_or_default();
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Quat, Rng};
    use crate::splat::{composite_pixel, CompositeOptions, Gaussian2D};
    use approx::assert_relative_eq;

    #[test]
    fn pole_maps_to_top_row() {
        assert_eq!(dir_to_texel(&Vec3::z(), 32, 16).0, 0);
        assert_eq!(dir_to_texel(&-Vec3::z(), 32, 16).0, 15);
    }

    #[test]
    fn texel_center_round_trip() {
        for r in 0..16 {
            for c in 0..32 {
                assert_eq!(dir_to_texel(&texel_to_dir(r, c, 32, 16), 32, 16), (r, c));
            }
        }
    }

    #[test]
    fn round_trip_angular_error_bounded() {
        let mut rng = Rng::new(1);
        let (w, h) = (32, 16);
        for _ in 0..10_000 {
            let d = rng.unit_vector();
            let (r, c) = dir_to_texel(&d, w, h);
            let back = texel_to_dir(r, c, w, h);
            // half diagonal of this texel, measured on the sphere
            let corner_a = {
                let th = PI * r as f64 / h as f64;
                let ph = 2.0 * PI * c as f64 / w as f64;
                Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos())
            };
            let corner_b = {
                let th = PI * (r + 1) as f64 / h as f64;
                let ph = 2.0 * PI * (c + 1) as f64 / w as f64;
                Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos())
            };
            let corner_c = {
                let th = PI * (r + 1) as f64 / h as f64;
                let ph = 2.0 * PI * c as f64 / w as f64;
                Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos())
            };
            let limit = corner_a.angle(&back).max(corner_b.angle(&back)).max(corner_c.angle(&back));
            assert!(d.angle(&back) <= limit + 1e-9);
        }
    }

    #[test]
    fn hemisphere_containment() {
        let mut rng = Rng::new(2);
        let dirs = stratified_hemisphere(&Vec3::z(), 4, &mut rng).unwrap();
        assert_eq!(dirs.len(), 4);
        assert!(dirs.iter().all(|d| d.z >= 0.0 && (d.norm() - 1.0).abs() < 1e-12));
        assert!(stratified_hemisphere(&Vec3::z(), 0, &mut rng).is_err());
    }

    #[test]
    fn hemisphere_centroid() {
        let mut rng = Rng::new(3);
        let dirs = stratified_hemisphere(&Vec3::z(), 1 << 16, &mut rng).unwrap();
        let mean = dirs.iter().sum::<Vec3>() / dirs.len() as f64;
        assert!((mean - Vec3::new(0.0, 0.0, 0.5)).norm() < 0.01);
    }

    #[test]
    fn cosine_integral_is_pi() {
        let mut rng = Rng::new(4);
        let n = Vec3::new(0.3, -0.5, 0.8).normalize();
        let dirs = stratified_hemisphere(&n, 1 << 14, &mut rng).unwrap();
        let est = 2.0 * PI / dirs.len() as f64 * dirs.iter().map(|d| d.dot(&n)).sum::<f64>();
        assert!((est - PI).abs() / PI < 0.01);
    }

    #[test]
    fn rough_limit_is_diffuse_dominated() {
        let n = Vec3::z();
        let w = Vec3::z();
        let rho = Vec3::new(0.8, 0.8, 0.8);
        let f = brdf_eval(&rho, 1.0, &n, &w, &w);
        // at alpha = 1 the lobe is 1 / (4 pi) * F0, far below rho / pi
        assert!((f - rho / PI).norm() < 0.05 * (rho / PI).norm());
    }

    #[test]
    fn black_diffuse_below_horizon() {
        let f = brdf_eval(&Vec3::zeros(), 0.5, &Vec3::z(), &-Vec3::z(), &Vec3::z());
        assert_eq!(f, Vec3::zeros());
    }

    /// Midpoint quadrature over a 64 x 256 grid on the hemisphere of +z.
    fn hemisphere_quadrature(mut f: impl FnMut(&Vec3) -> f64) -> f64 {
        let (nt, np) = (64, 256);
        let dt = 0.5 * PI / nt as f64;
        let dp = 2.0 * PI / np as f64;
        let mut sum = 0.0;
        for i in 0..nt {
            let th = (i as f64 + 0.5) * dt;
            for j in 0..np {
                let ph = (j as f64 + 0.5) * dp;
                let d = Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos());
                sum += f(&d) * th.sin() * dt * dp;
            }
        }
        sum
    }

    #[test]
    fn white_furnace_diffuse() {
        let rho = Vec3::new(0.9, 0.5, 0.2);
        let v = hemisphere_quadrature(|d| rho.x / PI * d.z);
        assert!((v - rho.x).abs() / rho.x < 0.005);
    }

    #[test]
    fn energy_bounded() {
        // The diffuse and specular lobes are not coupled, so a white diffuse
        // lobe or grazing views (NV < 0.5, where Fresnel grows) exceed the
        // bound; the check covers albedo <= 0.95 and view elevation >= 30 deg.
        for &alpha in &[0.05, 0.1, 0.2, 0.3, 0.6, 1.0] {
            for &vz in &[0.5f64, 0.6, 0.7, 0.8, 0.9, 1.0] {
                let wo = Vec3::new((1.0 - vz * vz).sqrt(), 0.0, vz);
                let v = hemisphere_quadrature(|d| brdf_eval(&Vec3::repeat(0.95), alpha, &Vec3::z(), d, &wo).x * d.z);
                assert!(v <= 1.05, "alpha {alpha} vz {vz}: {v}");
            }
        }
    }

    #[test]
    fn specular_roughness_derivative() {
        let n = Vec3::z();
        let wi = Vec3::new(0.3, 0.1, 0.9).normalize();
        let wo = Vec3::new(-0.4, 0.2, 0.8).normalize();
        for &r in &[0.1, 0.35, 0.8] {
            let (_, d) = brdf_specular(r, &n, &wi, &wo);
            let h = 1e-6;
            let fd = (brdf_specular(r + h, &n, &wi, &wo).0 - brdf_specular(r - h, &n, &wi, &wo).0) / (2.0 * h);
            assert!((fd - d).abs() < 1e-6 * (1.0 + fd.abs()), "{r}: {fd} vs {d}");
        }
    }

    fn blocker(mu: Vec3, o: f64, color: Vec3) -> PosedSplat {
        Gaussian2D::new(mu, Quat::IDENTITY, [0.5, 0.5], o, color).posed()
    }

    #[test]
    fn empty_scene_unoccluded() {
        let t = Tracer::empty();
        assert_eq!(trace_visibility(&Vec3::zeros(), &Vec3::z(), &Vec3::z(), &t), 1.0);
        assert_eq!(trace_indirect(&Vec3::zeros(), &Vec3::z(), &Vec3::z(), &t), Vec3::zeros());
    }

    #[test]
    fn single_blocker() {
        let t = Tracer::new(vec![blocker(Vec3::new(0.0, 0.0, 1.0), 0.999, Vec3::x())], IndirectSource::Colors);
        let (v, l) = t.trace(&Vec3::zeros(), &Vec3::z(), &Vec3::z());
        assert_relative_eq!(v, 0.001, epsilon = 1e-9);
        assert!((l - Vec3::x() * 0.999).norm() < 1e-9);
    }

    #[test]
    fn visibility_matches_independent_enumeration() {
        let mut rng = Rng::new(8);
        let splats: Vec<_> = (0..40)
            .map(|_| {
                Gaussian2D::new(
                    Vec3::new(rng.uniform() - 0.5, rng.uniform() - 0.5, 0.5 + rng.uniform() * 2.0),
                    rng.quat(),
                    [0.2, 0.3],
                    0.2 + 0.7 * rng.uniform(),
                    Vec3::new(rng.uniform(), rng.uniform(), rng.uniform()),
                )
                .posed()
            })
            .collect();
        let tracer = Tracer::new(splats.clone(), IndirectSource::Colors);
        for _ in 0..100 {
            let dir = (Vec3::new(rng.uniform() - 0.5, rng.uniform() - 0.5, 1.0)).normalize();
            let x = Vec3::zeros();
            let origin = x + Vec3::z() * tracer.offset;
            // enumerate every splat, sort hits by distance, multiply
            let mut hits: Vec<(f64, usize, f64)> = Vec::new();
            for (i, s) in splats.iter().enumerate() {
                let dn = dir.dot(&s.frame.n);
                let t = (s.mu - origin).dot(&s.frame.n) / dn;
                if dn.abs() < 1e-9 || t <= 0.0 {
                    continue;
                }
                let p = origin + dir * t - s.mu;
                let (u, v) = (p.dot(&s.frame.tu) / 0.2, p.dot(&s.frame.tv) / 0.3);
                if u * u + v * v > 9.0 {
                    continue;
                }
                hits.push((t, i, (s.opacity * (-(u * u + v * v) / 2.0).exp()).min(0.999)));
            }
            hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut v = 1.0;
            for (_, _, a) in &hits {
                v *= 1.0 - a;
            }
            let got = tracer.visibility(&x, &Vec3::z(), &dir);
            assert!((got - v).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&got));

            // the composited indirect radiance equals a primary-style composite
            let order: Vec<usize> = hits.iter().map(|h| h.1).collect();
            let ray = Ray { origin, dir };
            let px = composite_pixel(&ray, &dir, &order, &splats, CompositeOptions { early_exit: false });
            assert!((px.color - tracer.trace(&x, &Vec3::z(), &dir).1).norm() < 1e-12);
        }
    }

    #[test]
    fn removing_occluder_never_lowers_visibility() {
        let mut rng = Rng::new(9);
        let splats: Vec<_> = (0..20)
            .map(|_| blocker(Vec3::new(rng.uniform() - 0.5, rng.uniform() - 0.5, 0.5 + rng.uniform()), 0.6, Vec3::zeros()))
            .collect();
        let full = Tracer::new(splats.clone(), IndirectSource::Off);
        let fewer = Tracer::new(splats[1..].to_vec(), IndirectSource::Off);
        for _ in 0..50 {
            let d = (Vec3::new(rng.uniform() - 0.5, rng.uniform() - 0.5, 1.0)).normalize();
            assert!(fewer.visibility(&Vec3::zeros(), &Vec3::z(), &d) >= full.visibility(&Vec3::zeros(), &Vec3::z(), &d));
        }
    }

    fn lambert_point(albedo: Vec3) -> ShadePoint {
        ShadePoint { position: Vec3::zeros(), normal: Vec3::z(), view: Vec3::z(), albedo, roughness: 1.0 }
    }

    #[test]
    fn lambertian_under_uniform_sky() {
        let rho = Vec3::new(0.8, 0.4, 0.2);
        let env = EnvironmentMap::uniform(32, 16, Vec3::repeat(0.5)).unwrap();
        let mut rng = Rng::new(10);
        let pt = lambert_point(rho);
        let res = shade_pixel(&pt, &env, &Tracer::empty(), 4096, &mut rng).unwrap();
        // specular part separately so the diffuse identity is exact
        let spec: f64 = res.samples.iter().map(|s| s.spec * s.cos * s.env.x).sum::<f64>() * res.weight;
        let diffuse = res.color - Vec3::repeat(spec);
        for k in 0..3 {
            assert!((diffuse[k] - rho[k] * 0.5).abs() / (rho[k] * 0.5) < 0.02);
        }
    }

    #[test]
    fn dark_env_and_full_shadow_are_black() {
        let pt = lambert_point(Vec3::repeat(0.7));
        let black = EnvironmentMap::new(32, 16).unwrap();
        let mut rng = Rng::new(11);
        assert_eq!(shade_pixel(&pt, &black, &Tracer::empty(), 64, &mut rng).unwrap().color, Vec3::zeros());
        // a huge opaque sheet right above the point blocks the whole hemisphere
        let bright = EnvironmentMap::uniform(32, 16, Vec3::repeat(1.0)).unwrap();
        let lid = Gaussian2D::new(Vec3::new(0.0, 0.0, 0.01), Quat::IDENTITY, [1e4, 1e4], 1.0, Vec3::zeros()).posed();
        let tracer = Tracer::new(vec![lid], IndirectSource::Off);
        let res = shade_pixel(&pt, &bright, &tracer, 64, &mut rng).unwrap();
        assert!(res.color.norm() < 1e-2, "{:?}", res.color);
    }

    #[test]
    fn shade_is_linear_in_env_and_deterministic() {
        let mut rng = Rng::new(12);
        let mut env = EnvironmentMap::new(32, 16).unwrap();
        for v in env.data.iter_mut() {
            *v = rng.uniform();
        }
        let pt = ShadePoint {
            position: Vec3::zeros(),
            normal: Vec3::z(),
            view: Vec3::new(0.3, 0.0, 1.0).normalize(),
            albedo: Vec3::new(0.5, 0.3, 0.2),
            roughness: 0.4,
        };
        let t = Tracer::empty();
        let a = shade_pixel(&pt, &env, &t, 256, &mut Rng::new(5)).unwrap().color;
        let b = shade_pixel(&pt, &env.scaled(2.0), &t, 256, &mut Rng::new(5)).unwrap().color;
        let c = shade_pixel(&pt, &env, &t, 256, &mut Rng::new(5)).unwrap().color;
        assert!((b - a * 2.0).norm() < 1e-12);
        assert_eq!(a, c);
    }

    #[test]
    fn shade_backward_matches_finite_differences() {
        let mut rng = Rng::new(13);
        let mut env = EnvironmentMap::new(8, 4).unwrap();
        for v in env.data.iter_mut() {
            *v = rng.uniform();
        }
        let pt = ShadePoint {
            position: Vec3::zeros(),
            normal: Vec3::z(),
            view: Vec3::new(0.2, -0.1, 1.0).normalize(),
            albedo: Vec3::new(0.5, 0.3, 0.2),
            roughness: 0.4,
        };
        let gc = Vec3::new(0.7, -0.3, 1.1);
        let t = Tracer::empty();
        let eval = |p: &ShadePoint, e: &EnvironmentMap| shade_pixel(p, e, &t, 64, &mut Rng::new(1)).unwrap().color.dot(&gc);
        let res = shade_pixel(&pt, &env, &t, 64, &mut Rng::new(1)).unwrap();
        let g = shade_backward(&pt, &res, &gc);
        let h = 1e-6;
        let mut p2 = pt;
        p2.roughness += h;
        let up = eval(&p2, &env);
        p2.roughness -= 2.0 * h;
        let fd = (up - eval(&p2, &env)) / (2.0 * h);
        assert!((fd - g.roughness).abs() < 1e-6 * (1.0 + fd.abs()));
        for k in 0..3 {
            let mut p2 = pt;
            p2.albedo[k] += h;
            let up = eval(&p2, &env);
            p2.albedo[k] -= 2.0 * h;
            let fd = (up - eval(&p2, &env)) / (2.0 * h);
            assert!((fd - g.albedo[k]).abs() < 1e-6);
        }
        let mut genv = vec![0.0; env.data.len()];
        for (t, v) in &g.env {
            for k in 0..3 {
                genv[3 * t + k] += v[k];
            }
        }
        for i in 0..env.data.len() {
            let mut e2 = env.clone();
            e2.data[i] += h;
            let up = eval(&pt, &e2);
            e2.data[i] -= 2.0 * h;
            let fd = (up - eval(&pt, &e2)) / (2.0 * h);
            assert!((fd - genv[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn texel_solid_angles_cover_sphere() {
        let env = EnvironmentMap::new(32, 16).unwrap();
        let total: f64 = (0..16).map(|r| env.texel_solid_angle(r) * 32.0).sum();
        assert_relative_eq!(total, 4.0 * PI, epsilon = 1e-12);
    }

    #[test]
    fn rotation_moves_argmax() {
        let mut env = EnvironmentMap::new(32, 16).unwrap();
        env.set_texel(env.index(5, 3), Vec3::repeat(10.0));
        let r = env.rotated(90.0);
        assert_eq!(r.argmax(), (5, 11));
    }
}
