//! Training objectives and their adjoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Vec3};
use crate::image::ImageBuffer;
use crate::shading::{texel_to_dir, EnvironmentMap};
use crate::splat::{HitAdjoint, PixelAdjoint, RenderOutput};

pub const SSIM_WEIGHT: f64 = 0.2;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
pub const OPACITY_EPS: f64 = 1e-6;
/// Pixels at or below this accumulated opacity are background for the
/// normal term.
pub const FOREGROUND_THRESHOLD: f64 = 0.5;

fn gaussian_kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "same" convolution of one channel with zero padding.
fn blur(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn channel(img: &ImageBuffer, c: usize) -> Vec<f64> {
    (0..img.pixel_count()).map(|i| img.data[i * img.channels + c]).collect()
}

/// Mean SSIM and, optionally, its gradient with respect to `a`.
fn ssim_impl(a: &ImageBuffer, b: &ImageBuffer, want_grad: bool) -> Result<(f64, Option<ImageBuffer>)> {
    a.check_shape(b)?;
    let (w, h, ch) = (a.width, a.height, a.channels);
    let n = (w * h * ch) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| ImageBuffer::new(w, h, ch));
    for c in 0..ch {
        let x = channel(a, c);
        let y = channel(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur(&x, w, h), blur(&y, w, h));
        let (exx, eyy, exy) = (blur(&xx, w, h), blur(&yy, w, h), blur(&xy, w, h));
        let mut g_mx = vec![0.0; w * h];
        let mut g_exx = vec![0.0; w * h];
        let mut g_exy = vec![0.0; w * h];
        for p in 0..w * h {
            let (ux, uy) = (mx[p], my[p]);
            let sx = exx[p] - ux * ux;
            let sy = eyy[p] - uy * uy;
            let sxy = exy[p] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = sx + sy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                g_mx[p] = (2.0 * uy * a2 - 2.0 * uy * a1) / (b1 * b2) - s * 2.0 * ux / b1 + s * 2.0 * ux / b2;
                g_exx[p] = -s / b2;
                g_exy[p] = 2.0 * a1 / (b1 * b2);
            }
        }
        if let Some(g) = grad.as_mut() {
            // the symmetric kernel makes the zero-padded blur self-adjoint
            let (bm, bxx, bxy) = (blur(&g_mx, w, h), blur(&g_exx, w, h), blur(&g_exy, w, h));
            for q in 0..w * h {
                g.data[q * ch + c] = (bm[q] + 2.0 * x[q] * bxx[q] + y[q] * bxy[q]) / n;
            }
        }
    }
    Ok((total / n, grad))
}

/// Mean structural similarity over all pixels and channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

pub fn l1(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_shape(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.data.len().max(1) as f64)
}

/// `(1 - w) * L1 + w * (1 - SSIM)` with w = 0.2.
pub fn loss_reconstruction(render: &ImageBuffer, gt: &ImageBuffer) -> Result<f64> {
    Ok((1.0 - SSIM_WEIGHT) * l1(render, gt)? + SSIM_WEIGHT * (1.0 - ssim(render, gt)?))
}

pub fn loss_reconstruction_grad(render: &ImageBuffer, gt: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    let l = l1(render, gt)?;
    let (s, gs) = ssim_impl(render, gt, true)?;
    let gs = gs.expect("requested");
    let n = render.data.len().max(1) as f64;
    let mut g = gs.scaled(-SSIM_WEIGHT);
    for (gv, (p, q)) in g.data.iter_mut().zip(render.data.iter().zip(&gt.data)) {
        let d = p - q;
        if d != 0.0 {
            *gv += (1.0 - SSIM_WEIGHT) * d.signum() / n;
        }
    }
    Ok(((1.0 - SSIM_WEIGHT) * l + SSIM_WEIGHT * (1.0 - s), g))
}

/// Pixel mask for the normal term: the pixel and its four neighbours are
/// all above the foreground threshold (so central differences stay on the
/// surface).
fn normal_mask(opacity: &[f64], w: usize, h: usize) -> Vec<bool> {
    let fg = |x: usize, y: usize| opacity[y * w + x] > FOREGROUND_THRESHOLD;
    let mut m = vec![false; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            m[y * w + x] = fg(x, y) && fg(x - 1, y) && fg(x + 1, y) && fg(x, y - 1) && fg(x, y + 1);
        }
    }
    m
}

/// Raw per-pixel maps the normal term reads.
pub struct NormalInputs<'a> {
    pub width: usize,
    pub height: usize,
    /// Blended (unnormalized) normals.
    pub normal: &'a [Vec3],
    /// Blended (unnormalized) hit positions.
    pub position: &'a [Vec3],
    pub opacity: &'a [f64],
    pub eye: Vec3,
}

impl<'a> NormalInputs<'a> {
    pub fn from_render(out: &RenderOutput, cam: &Camera, normal: &'a mut Vec<Vec3>, position: &'a mut Vec<Vec3>, opacity: &'a mut Vec<f64>) -> Self {
        *normal = out.pixels.iter().map(|p| p.normal).collect();
        *position = out.pixels.iter().map(|p| p.position).collect();
        *opacity = out.pixels.iter().map(|p| p.opacity).collect();
        NormalInputs { width: out.width, height: out.height, normal, position, opacity, eye: cam.position }
    }
}

struct SurfaceNormal {
    n: Vec3,
    chat: Vec3,
    len: f64,
    sign: f64,
    dx: Vec3,
    dy: Vec3,
}

fn surface_normal(inp: &NormalInputs, pos: &[Vec3], x: usize, y: usize) -> Option<SurfaceNormal> {
    let w = inp.width;
    let dx = pos[y * w + x + 1] - pos[y * w + x - 1];
    let dy = pos[(y + 1) * w + x] - pos[(y - 1) * w + x];
    let c = dx.cross(&dy);
    let len = c.norm();
    if len < 1e-20 {
        return None;
    }
    let chat = c / len;
    let sign = if chat.dot(&(inp.eye - pos[y * w + x])) < 0.0 { -1.0 } else { 1.0 };
    Some(SurfaceNormal { n: chat * sign, chat, len, sign, dx, dy })
}

/// Mean over interior foreground pixels of `O - n_blend . N`, where N is
/// the normal of the finite-differenced expected-surface map.
pub fn loss_normal_consistency(inp: &NormalInputs) -> f64 {
    normal_consistency_impl(inp, None)
}

/// Same as [`loss_normal_consistency`], adding `scale * dL/d(maps)` into
/// the pixel adjoints.
pub fn loss_normal_consistency_grad(inp: &NormalInputs, scale: f64, adj: &mut [PixelAdjoint]) -> f64 {
    normal_consistency_impl(inp, Some((scale, adj)))
}

fn normal_consistency_impl(inp: &NormalInputs, mut grad: Option<(f64, &mut [PixelAdjoint])>) -> f64 {
    let (w, h) = (inp.width, inp.height);
    let mask = normal_mask(inp.opacity, w, h);
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return 0.0;
    }
    let pos: Vec<Vec3> = (0..w * h).map(|i| inp.position[i] / (inp.opacity[i] + OPACITY_EPS)).collect();
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    let mut g_pos = vec![Vec3::zeros(); w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            let sn = surface_normal(inp, &pos, x, y);
            let nn = sn.as_ref().map_or(Vec3::zeros(), |s| s.n);
            total += inp.opacity[i] - inp.normal[i].dot(&nn);
            if let Some((scale, adj)) = grad.as_mut() {
                let k = *scale * inv;
                adj[i].opacity += k;
                adj[i].normal -= nn * k;
                if let Some(s) = sn {
                    let gn = -inp.normal[i] * k;
                    let gchat = gn * s.sign;
                    let gc = (gchat - s.chat * s.chat.dot(&gchat)) / s.len;
                    let gdx = s.dy.cross(&gc);
                    let gdy = gc.cross(&s.dx);
                    g_pos[y * w + x + 1] += gdx;
                    g_pos[y * w + x - 1] -= gdx;
                    g_pos[(y + 1) * w + x] += gdy;
                    g_pos[(y - 1) * w + x] -= gdy;
                }
            }
        }
    }
    if let Some((_, adj)) = grad {
        for i in 0..w * h {
            if g_pos[i] == Vec3::zeros() {
                continue;
            }
            let d = inp.opacity[i] + OPACITY_EPS;
            adj[i].position += g_pos[i] / d;
            adj[i].opacity -= g_pos[i].dot(&pos[i]) / d;
        }
    }
    total * inv
}

/// Pairwise distortion of one pixel: sum_ij w_i w_j |z_i - z_j|.
pub fn distortion_pixel(w: &[f64], z: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..w.len() {
        for j in 0..w.len() {
            s += w[i] * w[j] * (z[i] - z[j]).abs();
        }
    }
    s
}

/// Gradient of [`distortion_pixel`] with respect to weights and depths.
pub fn distortion_pixel_grad(w: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = w.len();
    let mut gw = vec![0.0; k];
    let mut gz = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            let d = z[i] - z[j];
            gw[i] += 2.0 * w[j] * d.abs();
            gz[i] += 2.0 * w[i] * w[j] * d.signum() * (d != 0.0) as u8 as f64;
        }
    }
    (gw, gz)
}

/// Depth warp applied before the distortion term, with its derivative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DepthMap {
    Identity,
    /// far * (d - near) / ((far - near) * d)
    Ndc { near: f64, far: f64 },
}

impl DepthMap {
    pub fn apply(&self, d: f64) -> (f64, f64) {
        match *self {
            DepthMap::Identity => (d, 1.0),
            DepthMap::Ndc { near, far } => {
                let d = d.max(1e-9);
                (far * (d - near) / ((far - near) * d), far * near / ((far - near) * d * d))
            }
        }
    }
}

/// Mean over pixels of the per-pixel distortion of the retained hits.
pub fn loss_depth_distortion(out: &RenderOutput, map: DepthMap) -> f64 {
    let n = out.pixels.len().max(1) as f64;
    out.pixels
        .iter()
        .map(|p| {
            let w: Vec<f64> = p.hits.iter().map(|h| h.weight).collect();
            let z: Vec<f64> = p.hits.iter().map(|h| map.apply(h.depth).0).collect();
            distortion_pixel(&w, &z)
        })
        .sum::<f64>()
        / n
}

/// Per-hit adjoints of `scale * loss_depth_distortion`.
pub fn loss_depth_distortion_grad(out: &RenderOutput, map: DepthMap, scale: f64) -> (f64, Vec<Vec<HitAdjoint>>) {
    let n = out.pixels.len().max(1) as f64;
    let mut total = 0.0;
    let mut adj = Vec::with_capacity(out.pixels.len());
    for p in &out.pixels {
        let w: Vec<f64> = p.hits.iter().map(|h| h.weight).collect();
        let zm: Vec<(f64, f64)> = p.hits.iter().map(|h| map.apply(h.depth)).collect();
        let z: Vec<f64> = zm.iter().map(|v| v.0).collect();
        total += distortion_pixel(&w, &z);
        let (gw, gz) = distortion_pixel_grad(&w, &z);
        adj.push(
            (0..w.len())
                .map(|i| HitAdjoint { weight: scale * gw[i] / n, depth: scale * gz[i] * zm[i].1 / n })
                .collect(),
        );
    }
    (total / n, adj)
}

/// Binary cross-entropy between accumulated opacity and a mask.
pub fn loss_opacity_mask(opacity: &[f64], mask: &[f64]) -> Result<f64> {
    Ok(opacity_mask_impl(opacity, mask, None)?)
}

pub fn loss_opacity_mask_grad(opacity: &[f64], mask: &[f64], grad: &mut [f64]) -> Result<f64> {
    opacity_mask_impl(opacity, mask, Some(grad))
}

fn opacity_mask_impl(opacity: &[f64], mask: &[f64], mut grad: Option<&mut [f64]>) -> Result<f64> {
    if opacity.len() != mask.len() {
        return Err(Error::DimensionMismatch(format!("{} opacities vs {} mask values", opacity.len(), mask.len())));
    }
    let n = opacity.len().max(1) as f64;
    let mut total = 0.0;
    for i in 0..opacity.len() {
        let raw = opacity[i];
        let o = raw.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
        let m = mask[i];
        total += -m * o.ln() - (1.0 - m) * (1.0 - o).ln();
        if let Some(g) = grad.as_mut() {
            if raw > OPACITY_EPS && raw < 1.0 - OPACITY_EPS {
                g[i] = (-m / o + (1.0 - m) / (1.0 - o)) / n;
            } else {
                g[i] = 0.0;
            }
        }
    }
    Ok(total / n)
}

/// Mean absolute gate logit.
pub fn loss_separation(logits: &[f64]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    logits.iter().map(|p| p.abs()).sum::<f64>() / logits.len() as f64
}

/// Subgradient of [`loss_separation`]; zero at P = 0.
pub fn loss_separation_grad(logits: &[f64]) -> Vec<f64> {
    let n = logits.len().max(1) as f64;
    logits.iter().map(|&p| if p == 0.0 { 0.0 } else { p.signum() / n }).collect()
}

/// (mean squared norm of dc, mean squared norm of dmu)
pub fn loss_delta_reg(dc: &[Vec3], dmu: &[Vec3]) -> (f64, f64) {
    let msq = |v: &[Vec3]| if v.is_empty() { 0.0 } else { v.iter().map(|x| x.norm_squared()).sum::<f64>() / v.len() as f64 };
    (msq(dc), msq(dmu))
}

pub fn loss_delta_reg_grad(v: &[Vec3]) -> Vec<Vec3> {
    let n = v.len().max(1) as f64;
    v.iter().map(|x| x * (2.0 / n)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Weights {
    pub normal: f64,
    pub distortion: f64,
    pub opacity: f64,
    pub separation: f64,
    pub delta_c: f64,
    pub delta_mu: f64,
    /// Iteration at which the separation term switches on.
    pub separation_start: usize,
    /// Iteration at which normal consistency switches on.
    pub normal_start: usize,
    /// Iteration at which depth distortion switches on.
    pub distortion_start: usize,
    /// Iterations during which the deformation deltas are held at zero.
    pub deform_warmup: usize,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Stage1Weights {
            normal: 0.002,
            distortion: 1000.0,
            opacity: 0.1,
            separation: 0.005,
            delta_c: 0.01,
            delta_mu: 0.001,
            separation_start: 1000,
            normal_start: 0,
            distortion_start: 0,
            deform_warmup: 0,
        }
    }
}

impl Stage1Weights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("normal", self.normal),
            ("distortion", self.distortion),
            ("opacity", self.opacity),
            ("separation", self.separation),
            ("delta_c", self.delta_c),
            ("delta_mu", self.delta_mu),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidSpec { field: name.into(), reason: "weight must be >= 0".into() });
            }
        }
        Ok(())
    }

    /// Separation weight in effect at `iter`.
    pub fn separation_at(&self, iter: usize) -> f64 {
        if iter >= self.separation_start {
            self.separation
        } else {
            0.0
        }
    }

    pub fn normal_at(&self, iter: usize) -> f64 {
        if iter >= self.normal_start {
            self.normal
        } else {
            0.0
        }
    }

    pub fn distortion_at(&self, iter: usize) -> f64 {
        if iter >= self.distortion_start {
            self.distortion
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Terms {
    pub reconstruction: f64,
    pub normal: f64,
    pub distortion: f64,
    pub opacity: f64,
    pub separation: f64,
    pub delta_c: f64,
    pub delta_mu: f64,
}

pub fn total_stage1(t: &Stage1Terms, w: &Stage1Weights, iter: usize) -> f64 {
    t.reconstruction
        + w.normal_at(iter) * t.normal
        + w.distortion_at(iter) * t.distortion
        + w.opacity * t.opacity
        + w.separation_at(iter) * t.separation
        + w.delta_c * t.delta_c
        + w.delta_mu * t.delta_mu
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Weights {
    pub env: f64,
    /// Pixels shaded per iteration.
    pub pixels: usize,
    /// Rays per shaded pixel.
    pub rays: usize,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Stage2Weights { env: 1e-3, pixels: 128, rays: 256 }
    }
}

/// Sum of squared radiance over texels whose center points below the
/// horizon.
pub fn env_lower_reg(env: &EnvironmentMap) -> f64 {
    let mut s = 0.0;
    for row in 0..env.height {
        if texel_to_dir(row, 0, env.width, env.height).z >= 0.0 {
            continue;
        }
        for col in 0..env.width {
            s += env.texel(env.index(row, col)).norm_squared();
        }
    }
    s
}

/// Adds `scale * d(env_lower_reg)/d(env)` into `grad`.
pub fn env_lower_reg_grad(env: &EnvironmentMap, scale: f64, grad: &mut [f64]) {
    for row in 0..env.height {
        if texel_to_dir(row, 0, env.width, env.height).z >= 0.0 {
            continue;
        }
        for col in 0..env.width {
            let t = env.index(row, col);
            for k in 0..3 {
                grad[3 * t + k] += 2.0 * scale * env.data[3 * t + k];
            }
        }
    }
}

/// Mean absolute error over a set of shaded pixels.
pub fn l1_pixels(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    let n = (3 * pred.len()).max(1) as f64;
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b).abs().sum()).sum::<f64>() / n)
}

pub fn l1_pixels_grad(pred: &[Vec3], gt: &[Vec3]) -> Vec<Vec3> {
    let n = (3 * pred.len()).max(1) as f64;
    pred.iter().zip(gt).map(|(a, b)| (a - b).map(|d| if d == 0.0 { 0.0 } else { d.signum() / n })).collect()
}

/// `L_c(render) + L1(pbr) + lambda_env * lower-hemisphere energy`.
pub fn total_stage2(gs_render: &ImageBuffer, gt: &ImageBuffer, pbr: &[Vec3], pbr_gt: &[Vec3], env: &EnvironmentMap, w: &Stage2Weights) -> Result<f64> {
    Ok(loss_reconstruction(gs_render, gt)? + l1_pixels(pbr, pbr_gt)? + w.env * env_lower_reg(env))
}
