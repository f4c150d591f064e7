//! Flat-disk Gaussian primitives: ray-splat intersection, depth ordering,
//! front-to-back compositing, full-image rasterization with its adjoint,
//! and a bounding volume hierarchy for secondary rays.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{quat_to_frame, Camera, Frame, Quat, Ray, Vec3};
use crate::image::ImageBuffer;

/// Hits farther than three standard deviations from the center are ignored.
pub const CUTOFF_SQ: f64 = 9.0;
pub const MAX_ALPHA: f64 = 0.999;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
const NEAR_PLANE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2D {
    pub mu: Vec3,
    pub rot: Quat,
    pub scale: [f64; 2],
    pub opacity: f64,
    pub color: Vec3,
    pub albedo: Vec3,
    pub roughness: f64,
    /// Static/dynamic logit `P`; the gate uses `|P|`.
    pub gate_logit: f64,
}

impl Gaussian2D {
    pub fn new(mu: Vec3, rot: Quat, scale: [f64; 2], opacity: f64, color: Vec3) -> Self {
        Gaussian2D {
            mu,
            rot: rot.normalize(),
            scale,
            opacity,
            color,
            albedo: color,
            roughness: 0.5,
            gate_logit: 0.01,
        }
    }

    pub fn frame(&self) -> Frame {
        quat_to_frame(self.rot.normalize())
    }

    /// Splat at its canonical pose, shading with the canonical color.
    pub fn posed(&self) -> PosedSplat {
        PosedSplat {
            mu: self.mu,
            frame: self.frame(),
            scale: self.scale,
            opacity: self.opacity,
            color: self.color,
            albedo: self.albedo,
            roughness: self.roughness,
        }
    }

    /// Enforces the box constraints on the bounded fields.
    pub fn clamp_fields(&mut self) {
        self.scale[0] = self.scale[0].max(1e-4);
        self.scale[1] = self.scale[1].max(1e-4);
        self.opacity = self.opacity.clamp(0.0, 1.0);
        self.color = self.color.map(|c| c.clamp(0.0, 1.0));
        self.albedo = self.albedo.map(|c| c.clamp(0.0, 1.0));
        self.roughness = self.roughness.clamp(0.0, 1.0);
        self.rot = self.rot.normalize();
    }
}

/// A splat placed for one particular render: deformed center and frame plus
/// the attributes that get blended.
#[derive(Clone, Debug, PartialEq)]
pub struct PosedSplat {
    pub mu: Vec3,
    pub frame: Frame,
    pub scale: [f64; 2],
    pub opacity: f64,
    pub color: Vec3,
    pub albedo: Vec3,
    pub roughness: f64,
}

impl PosedSplat {
    /// Axis-aligned bounds of the 3-sigma rectangle.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let eu = self.frame.tu * (3.0 * self.scale[0]);
        let ev = self.frame.tv * (3.0 * self.scale[1]);
        let ext = eu.abs() + ev.abs();
        (self.mu - ext, self.mu + ext)
    }

    fn corners(&self) -> [Vec3; 4] {
        let eu = self.frame.tu * (3.0 * self.scale[0]);
        let ev = self.frame.tv * (3.0 * self.scale[1]);
        [self.mu + eu + ev, self.mu + eu - ev, self.mu - eu + ev, self.mu - eu - ev]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatHit {
    /// Local coordinates in units of the scales.
    pub u: f64,
    pub v: f64,
    /// Distance along the (unit) ray direction.
    pub t: f64,
    pub point: Vec3,
    /// exp(-(u^2+v^2)/2)
    pub weight: f64,
}

pub fn ray_splat_intersect(ray: &Ray, mu: &Vec3, frame: &Frame, scale: [f64; 2]) -> Option<SplatHit> {
    let dn = ray.dir.dot(&frame.n);
    if dn.abs() < 1e-9 {
        return None;
    }
    let t = (mu - ray.origin).dot(&frame.n) / dn;
    if t <= 0.0 {
        return None;
    }
    let point = ray.origin + ray.dir * t;
    let r = point - mu;
    let u = r.dot(&frame.tu) / scale[0];
    let v = r.dot(&frame.tv) / scale[1];
    Some(SplatHit { u, v, t, point, weight: (-0.5 * (u * u + v * v)).exp() })
}

/// Indices of splats whose center lies in front of the camera and projects
/// inside the image grown by a 3-sigma margin, ordered by camera depth
/// (stable on index).
pub fn cull_and_sort(splats: &[PosedSplat], cam: &Camera) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = splats
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let pc = cam.world_to_camera(&s.mu);
            if pc.z <= NEAR_PLANE {
                return None;
            }
            let (x, y) = cam.project_camera(&pc)?;
            let margin = 3.0 * s.scale[0].max(s.scale[1]) * cam.fx.max(cam.fy) / pc.z;
            let inside = x >= -margin
                && x <= cam.width as f64 + margin
                && y >= -margin
                && y <= cam.height as f64 + margin;
            inside.then_some((pc.z, i))
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct CompositeOptions {
    pub early_exit: bool,
}

impl Default for CompositeOptions {
    fn default() -> Self {
        CompositeOptions { early_exit: true }
    }
}

/// One retained contribution along a ray.
#[derive(Clone, Copy, Debug)]
pub struct CompositeHit {
    pub index: usize,
    pub hit: SplatHit,
    /// Depth along the compositing axis (camera z for primary rays).
    pub depth: f64,
    pub alpha: f64,
    /// Transmittance in front of this hit.
    pub trans: f64,
    /// Blending weight alpha * trans.
    pub weight: f64,
    pub clamped: bool,
    /// +1 or -1 so that the blended normal faces the ray.
    pub flip: f64,
}

/// Raw (unnormalized) blended attributes at one pixel or along one ray.
#[derive(Clone, Debug, Default)]
pub struct PixelSample {
    pub color: Vec3,
    pub albedo: Vec3,
    pub roughness: f64,
    pub normal: Vec3,
    pub position: Vec3,
    pub depth: f64,
    pub opacity: f64,
    pub transmittance: f64,
    pub hits: Vec<CompositeHit>,
}

/// Composites already-intersected hits given in front-to-back order.
pub fn composite_hits(
    ray: &Ray,
    depth_axis: &Vec3,
    ordered: impl IntoIterator<Item = (usize, SplatHit)>,
    splats: &[PosedSplat],
    opts: CompositeOptions,
) -> PixelSample {
    let mut out = PixelSample { transmittance: 1.0, ..Default::default() };
    let mut trans = 1.0;
    for (index, hit) in ordered {
        if hit.u * hit.u + hit.v * hit.v > CUTOFF_SQ {
            continue;
        }
        let s = &splats[index];
        let raw = s.opacity * hit.weight;
        let clamped = raw > MAX_ALPHA;
        let alpha = raw.min(MAX_ALPHA);
        if alpha <= 0.0 {
            continue;
        }
        let weight = alpha * trans;
        let flip = if s.frame.n.dot(&ray.dir) > 0.0 { -1.0 } else { 1.0 };
        let depth = (hit.point - ray.origin).dot(depth_axis);
        out.color += s.color * weight;
        out.albedo += s.albedo * weight;
        out.roughness += s.roughness * weight;
        out.normal += s.frame.n * (flip * weight);
        out.position += hit.point * weight;
        out.depth += depth * weight;
        out.opacity += weight;
        out.hits.push(CompositeHit { index, hit, depth, alpha, trans, weight, clamped, flip });
        trans *= 1.0 - alpha;
        if opts.early_exit && trans < MIN_TRANSMITTANCE {
            break;
        }
    }
    out.transmittance = trans;
    out
}

/// Intersects the ray with `order` (front-to-back) and composites.
pub fn composite_pixel(
    ray: &Ray,
    depth_axis: &Vec3,
    order: &[usize],
    splats: &[PosedSplat],
    opts: CompositeOptions,
) -> PixelSample {
    let hits = order.iter().filter_map(|&i| {
        let s = &splats[i];
        ray_splat_intersect(ray, &s.mu, &s.frame, s.scale).map(|h| (i, h))
    });
    composite_hits(ray, depth_axis, hits, splats, opts)
}

#[derive(Clone, Copy, Debug)]
pub struct RenderSettings {
    pub early_exit: bool,
    pub tile: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings { early_exit: true, tile: 4 }
    }
}

/// Per-pixel samples with their hit lists; serves as the tape for
/// [`render_backward`].
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub rays: Vec<Ray>,
    pub pixels: Vec<PixelSample>,
}

/// Deferred-shading maps. Albedo, roughness, position and depth are
/// normalized by accumulated opacity (expected surface attribute), the
/// normal is unit length; all are zero where opacity vanishes.
#[derive(Clone, Debug)]
pub struct GBuffer {
    pub albedo: ImageBuffer,
    pub roughness: ImageBuffer,
    pub normal: ImageBuffer,
    pub depth: ImageBuffer,
    pub opacity: ImageBuffer,
    pub position: ImageBuffer,
    pub color: ImageBuffer,
}

/// Opacity below which normalized G-buffer attributes are reported as zero.
pub const GBUFFER_EPS: f64 = 1e-6;

impl RenderOutput {
    pub fn color_image(&self) -> ImageBuffer {
        let data = self.pixels.iter().flat_map(|p| [p.color.x, p.color.y, p.color.z]).collect();
        ImageBuffer::from_data(self.width, self.height, 3, data).expect("shape")
    }

    pub fn opacity_image(&self) -> ImageBuffer {
        let data = self.pixels.iter().map(|p| p.opacity).collect();
        ImageBuffer::from_data(self.width, self.height, 1, data).expect("shape")
    }

    pub fn gbuffer(&self) -> GBuffer {
        let (w, h) = (self.width, self.height);
        let mut g = GBuffer {
            albedo: ImageBuffer::new(w, h, 3),
            roughness: ImageBuffer::new(w, h, 1),
            normal: ImageBuffer::new(w, h, 3),
            depth: ImageBuffer::new(w, h, 1),
            opacity: ImageBuffer::new(w, h, 1),
            position: ImageBuffer::new(w, h, 3),
            color: self.color_image(),
        };
        for (i, p) in self.pixels.iter().enumerate() {
            g.opacity.data[i] = p.opacity;
            if p.opacity <= GBUFFER_EPS {
                continue;
            }
            let inv = 1.0 / p.opacity;
            g.albedo.pixel_mut(i).copy_from_slice((p.albedo * inv).as_slice());
            g.roughness.data[i] = p.roughness * inv;
            g.position.pixel_mut(i).copy_from_slice((p.position * inv).as_slice());
            g.depth.data[i] = p.depth * inv;
            let nn = p.normal.norm();
            if nn > 1e-12 {
                g.normal.pixel_mut(i).copy_from_slice((p.normal / nn).as_slice());
            }
        }
        g
    }
}

pub enum RenderMode {
    Color,
    GBuffer,
}

pub enum Raster {
    Color(ImageBuffer),
    GBuffer(Box<GBuffer>),
}

struct TileGrid {
    tile: usize,
    tiles_x: usize,
    lists: Vec<Vec<usize>>,
}

fn bin_tiles(splats: &[PosedSplat], order: &[usize], cam: &Camera, tile: usize) -> TileGrid {
    let tiles_x = cam.width.div_ceil(tile);
    let tiles_y = cam.height.div_ceil(tile);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for &i in order {
        let s = &splats[i];
        let mut lo = (f64::INFINITY, f64::INFINITY);
        let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut full = false;
        for c in s.corners() {
            let pc = cam.world_to_camera(&c);
            match cam.project_camera(&pc) {
                Some((x, y)) if pc.z > NEAR_PLANE => {
                    lo = (lo.0.min(x), lo.1.min(y));
                    hi = (hi.0.max(x), hi.1.max(y));
                }
                _ => full = true,
            }
        }
        let (tx0, tx1, ty0, ty1) = if full {
            (0, tiles_x - 1, 0, tiles_y - 1)
        } else {
            if hi.0 < 0.0 || hi.1 < 0.0 || lo.0 > cam.width as f64 || lo.1 > cam.height as f64 {
                continue;
            }
            let clampx = |v: f64| ((v.max(0.0) as usize) / tile).min(tiles_x - 1);
            let clampy = |v: f64| ((v.max(0.0) as usize) / tile).min(tiles_y - 1);
            (clampx(lo.0), clampx(hi.0), clampy(lo.1), clampy(hi.1))
        };
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(i);
            }
        }
    }
    TileGrid { tile, tiles_x, lists }
}

/// Renders every pixel of `cam` by compositing the depth-sorted splats.
pub fn render(splats: &[PosedSplat], cam: &Camera, settings: RenderSettings) -> RenderOutput {
    let order = cull_and_sort(splats, cam);
    let grid = bin_tiles(splats, &order, cam, settings.tile.max(1));
    let forward = cam.forward();
    let opts = CompositeOptions { early_exit: settings.early_exit };
    let (w, h) = (cam.width, cam.height);
    let rows: Vec<Vec<(Ray, PixelSample)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let ray = cam.ray_through(x as f64 + 0.5, y as f64 + 0.5);
                    let list = &grid.lists[(y / grid.tile) * grid.tiles_x + x / grid.tile];
                    let px = composite_pixel(&ray, &forward, list, splats, opts);
                    (ray, px)
                })
                .collect()
        })
        .collect();
    let mut rays = Vec::with_capacity(w * h);
    let mut pixels = Vec::with_capacity(w * h);
    for row in rows {
        for (r, p) in row {
            rays.push(r);
            pixels.push(p);
        }
    }
    RenderOutput { width: w, height: h, rays, pixels }
}

pub fn rasterize(splats: &[PosedSplat], cam: &Camera, mode: RenderMode) -> Raster {
    let out = render(splats, cam, RenderSettings::default());
    match mode {
        RenderMode::Color => Raster::Color(out.color_image()),
        RenderMode::GBuffer => Raster::GBuffer(Box::new(out.gbuffer())),
    }
}

/// Adjoints with respect to the raw blended per-pixel attributes.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelAdjoint {
    pub color: Vec3,
    pub albedo: Vec3,
    pub roughness: f64,
    pub normal: Vec3,
    pub position: Vec3,
    pub depth: f64,
    pub opacity: f64,
}

/// Extra adjoints attached directly to one retained hit.
#[derive(Clone, Copy, Debug, Default)]
pub struct HitAdjoint {
    pub weight: f64,
    pub depth: f64,
}

#[derive(Clone, Debug)]
pub struct RenderAdjoint {
    pub pixels: Vec<PixelAdjoint>,
    /// Optional per-hit adjoints aligned with `RenderOutput::pixels[i].hits`.
    pub hits: Option<Vec<Vec<HitAdjoint>>>,
}

impl RenderAdjoint {
    pub fn zeros(n: usize) -> Self {
        RenderAdjoint { pixels: vec![PixelAdjoint::default(); n], hits: None }
    }
}

/// Gradient with respect to one posed splat.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub mu: Vec3,
    pub tu: Vec3,
    pub tv: Vec3,
    pub n: Vec3,
    pub scale: [f64; 2],
    pub opacity: f64,
    pub color: Vec3,
    pub albedo: Vec3,
    pub roughness: f64,
}

impl SplatGrad {
    pub fn add(&mut self, o: &SplatGrad) {
        self.mu += o.mu;
        self.tu += o.tu;
        self.tv += o.tv;
        self.n += o.n;
        self.scale[0] += o.scale[0];
        self.scale[1] += o.scale[1];
        self.opacity += o.opacity;
        self.color += o.color;
        self.albedo += o.albedo;
        self.roughness += o.roughness;
    }
}

/// Reverse pass of [`composite_hits`] for one ray. Calls `sink` with the
/// gradient contribution of every retained hit.
pub fn composite_backward(
    ray: &Ray,
    depth_axis: &Vec3,
    sample: &PixelSample,
    splats: &[PosedSplat],
    adj: &PixelAdjoint,
    hit_adj: Option<&[HitAdjoint]>,
    mut sink: impl FnMut(usize, SplatGrad),
) {
    let k = sample.hits.len();
    if k == 0 {
        return;
    }
    // Total adjoint on every blending weight.
    let mut gw = Vec::with_capacity(k);
    for (i, h) in sample.hits.iter().enumerate() {
        let s = &splats[h.index];
        let mut g = adj.color.dot(&s.color)
            + adj.albedo.dot(&s.albedo)
            + adj.roughness * s.roughness
            + h.flip * adj.normal.dot(&s.frame.n)
            + adj.position.dot(&h.hit.point)
            + adj.depth * h.depth
            + adj.opacity;
        if let Some(ha) = hit_adj {
            g += ha[i].weight;
        }
        gw.push(g);
    }
    let mut suffix = 0.0;
    for i in (0..k).rev() {
        let h = &sample.hits[i];
        let s = &splats[h.index];
        let galpha = h.trans * gw[i] - suffix / (1.0 - h.alpha);
        suffix += h.weight * gw[i];

        let mut g = SplatGrad {
            color: adj.color * h.weight,
            albedo: adj.albedo * h.weight,
            roughness: adj.roughness * h.weight,
            n: adj.normal * (h.flip * h.weight),
            ..Default::default()
        };
        let depth_adj = adj.depth * h.weight + hit_adj.map_or(0.0, |ha| ha[i].depth);
        let gp = adj.position * h.weight + depth_axis * depth_adj;

        let (gu, gv) = if h.clamped {
            (0.0, 0.0)
        } else {
            g.opacity = galpha * h.hit.weight;
            let gg = galpha * s.opacity;
            (-h.hit.u * h.hit.weight * gg, -h.hit.v * h.hit.weight * gg)
        };
        intersect_backward(ray, s, &h.hit, gu, gv, gp, &mut g);
        sink(h.index, g);
    }
}

/// Chain rule through [`ray_splat_intersect`] given adjoints on (u, v) and
/// on the hit point.
fn intersect_backward(
    ray: &Ray,
    s: &PosedSplat,
    hit: &SplatHit,
    gu: f64,
    gv: f64,
    gp: Vec3,
    g: &mut SplatGrad,
) {
    let [su, sv] = s.scale;
    let f = &s.frame;
    let r = hit.point - s.mu;
    let gr = f.tu * (gu / su) + f.tv * (gv / sv);
    g.tu += r * (gu / su);
    g.tv += r * (gv / sv);
    g.scale[0] -= gu * hit.u / su;
    g.scale[1] -= gv * hit.v / sv;
    let gp_total = gp + gr;
    g.mu -= gr;
    let gt = gp_total.dot(&ray.dir);
    let dn = ray.dir.dot(&f.n);
    g.mu += f.n * (gt / dn);
    g.n += ((s.mu - ray.origin) - ray.dir * hit.t) * (gt / dn);
}

/// Accumulates per-splat gradients for a whole render. Rows are reduced in
/// a fixed order so the result does not depend on thread scheduling.
pub fn render_backward(
    out: &RenderOutput,
    splats: &[PosedSplat],
    cam: &Camera,
    adj: &RenderAdjoint,
) -> Vec<SplatGrad> {
    let forward = cam.forward();
    let w = out.width;
    let partial: Vec<Vec<(usize, SplatGrad)>> = (0..out.height)
        .into_par_iter()
        .map(|y| {
            let mut local = Vec::new();
            for x in 0..w {
                let i = y * w + x;
                let hit_adj = adj.hits.as_ref().map(|h| h[i].as_slice());
                composite_backward(
                    &out.rays[i],
                    &forward,
                    &out.pixels[i],
                    splats,
                    &adj.pixels[i],
                    hit_adj,
                    |idx, g| local.push((idx, g)),
                );
            }
            local
        })
        .collect();
    let mut grads = vec![SplatGrad::default(); splats.len()];
    for row in partial {
        for (idx, g) in row {
            grads[idx].add(&g);
        }
    }
    grads
}

/// Bounding volume hierarchy over splat 3-sigma boxes.
pub struct SplatBvh {
    nodes: Vec<BvhNode>,
    indices: Vec<usize>,
}

struct BvhNode {
    lo: Vec3,
    hi: Vec3,
    /// Leaf: (start, count) into `indices`; interior: left child at
    /// `start`, right child at `start + 1`, count == 0.
    start: usize,
    count: usize,
}

const LEAF_SIZE: usize = 4;

impl SplatBvh {
    pub fn build(splats: &[PosedSplat]) -> Self {
        let bounds: Vec<(Vec3, Vec3)> = splats.iter().map(PosedSplat::bounds).collect();
        let centers: Vec<Vec3> = bounds.iter().map(|(l, h)| (l + h) * 0.5).collect();
        let mut indices: Vec<usize> = (0..splats.len()).collect();
        let mut nodes = vec![BvhNode { lo: Vec3::zeros(), hi: Vec3::zeros(), start: 0, count: 0 }];
        if !splats.is_empty() {
            Self::build_node(0, 0, splats.len(), &mut indices, &bounds, &centers, &mut nodes);
        }
        SplatBvh { nodes, indices }
    }

    fn build_node(
        node: usize,
        start: usize,
        end: usize,
        indices: &mut [usize],
        bounds: &[(Vec3, Vec3)],
        centers: &[Vec3],
        nodes: &mut Vec<BvhNode>,
    ) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &indices[start..end] {
            lo = lo.inf(&bounds[i].0);
            hi = hi.sup(&bounds[i].1);
        }
        nodes[node].lo = lo;
        nodes[node].hi = hi;
        if end - start <= LEAF_SIZE {
            nodes[node].start = start;
            nodes[node].count = end - start;
            return;
        }
        let ext = hi - lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        indices[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centers[a][axis].total_cmp(&centers[b][axis]).then(a.cmp(&b))
        });
        let left = nodes.len();
        nodes.push(BvhNode { lo: Vec3::zeros(), hi: Vec3::zeros(), start: 0, count: 0 });
        nodes.push(BvhNode { lo: Vec3::zeros(), hi: Vec3::zeros(), start: 0, count: 0 });
        nodes[node].start = left;
        nodes[node].count = 0;
        Self::build_node(left, start, mid, indices, bounds, centers, nodes);
        Self::build_node(left + 1, mid, end, indices, bounds, centers, nodes);
    }

    fn slab(lo: &Vec3, hi: &Vec3, ray: &Ray, inv: &Vec3) -> bool {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let ta = (lo[a] - ray.origin[a]) * inv[a];
            let tb = (hi[a] - ray.origin[a]) * inv[a];
            let (near, far) = if ta <= tb { (ta, tb) } else { (tb, ta) };
            if near.is_nan() || far.is_nan() {
                // origin on the slab boundary of a zero-direction axis
                if ray.origin[a] < lo[a] || ray.origin[a] > hi[a] {
                    return false;
                }
                continue;
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return false;
            }
        }
        true
    }

    /// All intersections within the 3-sigma cutoff, ordered by distance
    /// (ties broken by index).
    pub fn trace(&self, ray: &Ray, splats: &[PosedSplat]) -> Vec<(usize, SplatHit)> {
        let mut hits = Vec::new();
        if splats.is_empty() {
            return hits;
        }
        let inv = ray.dir.map(|d| 1.0 / d);
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if !Self::slab(&node.lo, &node.hi, ray, &inv) {
                continue;
            }
            if node.count > 0 {
                for &i in &self.indices[node.start..node.start + node.count] {
                    let s = &splats[i];
                    if let Some(h) = ray_splat_intersect(ray, &s.mu, &s.frame, s.scale) {
                        if h.u * h.u + h.v * h.v <= CUTOFF_SQ {
                            hits.push((i, h));
                        }
                    }
                }
            } else {
                stack.push(node.start);
                stack.push(node.start + 1);
            }
        }
        hits.sort_by(|a, b| a.1.t.total_cmp(&b.1.t).then(a.0.cmp(&b.0)));
        hits
    }
}
