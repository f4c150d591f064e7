//! Time-conditioned deformation: an MLP predicting per-splat deltas, the
//! relaxed Bernoulli static/dynamic gate and the gated updates.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{positional_encode_backward, positional_encode_into, quat_to_frame, Mat3, Quat, Rng, Vec3};
use crate::splat::{Gaussian2D, PosedSplat, SplatGrad};

pub const GATE_FLOOR: f64 = 1e-8;
pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const ENC_T: usize = 6;
pub const ENC_MU: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// (out, in)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn zeros(input: usize, output: usize) -> Self {
        Linear { w: Array2::zeros((output, input)), b: Array1::zeros(output) }
    }

    fn kaiming(input: usize, output: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / input as f64).sqrt();
        let w = Array2::from_shape_fn((output, input), |_| rng.normal() * std);
        Linear { w, b: Array1::zeros(output) }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Trunk of `depth` ReLU layers of `width` units and three linear heads for
/// the position, rotation and color deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub enc_t: usize,
    pub enc_mu: usize,
    pub trunk: Vec<Linear>,
    pub head_mu: Linear,
    pub head_r: Linear,
    pub head_c: Linear,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Deltas {
    pub dmu: Vec<Vec3>,
    pub dr: Vec<Vec3>,
    pub dc: Vec<Vec3>,
}

/// Intermediate activations of a batched forward pass.
pub struct MlpTape {
    input: Array2<f64>,
    /// Post-ReLU output of every trunk layer.
    acts: Vec<Array2<f64>>,
    mus: Vec<Vec3>,
}

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    layers: Vec<[usize; 2]>,
    enc_t: usize,
    enc_mu: usize,
}

impl DeformationField {
    pub fn new(depth: usize, width: usize, seed: u64) -> Self {
        Self::with_encoding(depth, width, ENC_T, ENC_MU, seed)
    }

    pub fn with_encoding(depth: usize, width: usize, enc_t: usize, enc_mu: usize, seed: u64) -> Self {
        assert!(depth >= 1 && width >= 1);
        let mut rng = Rng::stream(seed, 0x6d6c70);
        let input = 2 * enc_t + 6 * enc_mu;
        let mut trunk = Vec::with_capacity(depth);
        let mut fan_in = input;
        for _ in 0..depth {
            trunk.push(Linear::kaiming(fan_in, width, &mut rng));
            fan_in = width;
        }
        DeformationField {
            enc_t,
            enc_mu,
            trunk,
            head_mu: Linear::zeros(width, 3),
            head_r: Linear::zeros(width, 3),
            head_c: Linear::zeros(width, 3),
        }
    }

    pub fn input_dim(&self) -> usize {
        2 * self.enc_t + 6 * self.enc_mu
    }

    pub fn width(&self) -> usize {
        self.trunk.last().map_or(0, |l| l.w.nrows())
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.trunk.iter().chain([&self.head_mu, &self.head_r, &self.head_c])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.trunk.iter_mut().chain([&mut self.head_mu, &mut self.head_r, &mut self.head_c])
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Linear::param_count).sum()
    }

    /// Same architecture with every weight zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for l in z.layers_mut() {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        z
    }

    /// Weights and biases of every layer in order, row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} field parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut k = 0;
        for l in self.layers_mut() {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = flat[k];
                k += 1;
            }
        }
        Ok(())
    }

    /// Index range of the color head inside [`Self::to_flat`].
    pub fn color_head_range(&self) -> std::ops::Range<usize> {
        let n = self.head_c.param_count();
        let end = self.param_count();
        end - n..end
    }

    fn encode(&self, t: f64, mu: &Vec3, out: &mut Vec<f64>) {
        positional_encode_into(&[t], self.enc_t, out);
        positional_encode_into(mu.as_slice(), self.enc_mu, out);
    }

    /// Batched forward pass over all centers at one timestep.
    pub fn forward_batch(&self, t: f64, mus: &[Vec3]) -> (Deltas, MlpTape) {
        let dim = self.input_dim();
        let mut flat = Vec::with_capacity(mus.len() * dim);
        for mu in mus {
            self.encode(t, mu, &mut flat);
        }
        let input = Array2::from_shape_vec((mus.len(), dim), flat).expect("encoding shape");
        let mut acts = Vec::with_capacity(self.trunk.len());
        let mut h = input.clone();
        for layer in &self.trunk {
            h = layer.forward(&h).mapv(|v| v.max(0.0));
            acts.push(h.clone());
        }
        let to_vecs = |a: Array2<f64>| a.rows().into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect();
        let deltas = Deltas {
            dmu: to_vecs(self.head_mu.forward(&h)),
            dr: to_vecs(self.head_r.forward(&h)),
            dc: to_vecs(self.head_c.forward(&h)),
        };
        (deltas, MlpTape { input, acts, mus: mus.to_vec() })
    }

    /// Reverse pass: accumulates weight gradients into `grad` and returns
    /// the gradient on every input center.
    pub fn backward_batch(
        &self,
        tape: &MlpTape,
        gdmu: &[Vec3],
        gdr: &[Vec3],
        gdc: &[Vec3],
        grad: &mut DeformationField,
    ) -> Vec<Vec3> {
        let n = tape.mus.len();
        let to_arr = |g: &[Vec3]| Array2::from_shape_fn((n, 3), |(i, j)| g[i][j]);
        let h_last = tape.acts.last().expect("non-empty trunk");
        let mut gh = Array2::<f64>::zeros(h_last.raw_dim());
        for (g, head, ghead) in [
            (to_arr(gdmu), &self.head_mu, &mut grad.head_mu),
            (to_arr(gdr), &self.head_r, &mut grad.head_r),
            (to_arr(gdc), &self.head_c, &mut grad.head_c),
        ] {
            ghead.w += &g.t().dot(h_last);
            ghead.b += &g.sum_axis(Axis(0));
            gh += &g.dot(&head.w);
        }
        for li in (0..self.trunk.len()).rev() {
            // ReLU mask from the post-activation values
            let act = &tape.acts[li];
            gh.zip_mut_with(act, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            });
            let x = if li == 0 { &tape.input } else { &tape.acts[li - 1] };
            grad.trunk[li].w += &gh.t().dot(x);
            grad.trunk[li].b += &gh.sum_axis(Axis(0));
            gh = gh.dot(&self.trunk[li].w);
        }
        let off = 2 * self.enc_t;
        (0..n)
            .map(|i| {
                let row = gh.row(i);
                let genc: Vec<f64> = row.iter().skip(off).copied().collect();
                let g = positional_encode_backward(tape.mus[i].as_slice(), self.enc_mu, &genc);
                Vec3::new(g[0], g[1], g[2])
            })
            .collect()
    }

    pub fn save(&self, bin_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
        let header = FieldHeader {
            layers: self.layers().map(|l| [l.w.ncols(), l.w.nrows()]).collect(),
            enc_t: self.enc_t,
            enc_mu: self.enc_mu,
        };
        fs::write(json_path, serde_json::to_string_pretty(&header)?)?;
        let bytes: Vec<u8> = self.to_flat().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(bin_path, bytes)?;
        Ok(())
    }

    pub fn load(bin_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<Self> {
        let json_path = json_path.as_ref();
        let header: FieldHeader = serde_json::from_str(&fs::read_to_string(json_path)?)?;
        let bad = |r: &str| Error::Format { path: json_path.to_path_buf(), reason: r.into() };
        if header.layers.len() < 4 {
            return Err(bad("need at least one trunk layer and three heads"));
        }
        let depth = header.layers.len() - 3;
        let width = header.layers[0][1];
        let mut field = DeformationField::with_encoding(depth, width, header.enc_t, header.enc_mu, 0);
        let expect: Vec<[usize; 2]> = field.layers().map(|l| [l.w.ncols(), l.w.nrows()]).collect();
        if expect != header.layers {
            return Err(bad("layer shapes do not form a supported network"));
        }
        let raw = fs::read(bin_path.as_ref())?;
        if raw.len() != field.param_count() * 4 {
            return Err(Error::Format {
                path: bin_path.as_ref().to_path_buf(),
                reason: format!("expected {} floats", field.param_count()),
            });
        }
        let flat: Vec<f64> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        field.set_flat(&flat)?;
        Ok(field)
    }
}

/// Single-point convenience wrapper around [`DeformationField::forward_batch`].
pub fn mlp_forward(field: &DeformationField, t: f64, mu: &Vec3) -> (Vec3, Vec3, Vec3) {
    let (d, _) = field.forward_batch(t, std::slice::from_ref(mu));
    (d.dmu[0], d.dr[0], d.dc[0])
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Relaxed Bernoulli draw `sigmoid((log|P| + log U - log(1-U)) / T)`.
pub fn concrete_sample(p: f64, temperature: f64, u: f64) -> f64 {
    concrete_sample_grad(p, temperature, u).0
}

/// Gate value and its derivative with respect to the logit `P`.
pub fn concrete_sample_grad(p: f64, temperature: f64, u: f64) -> (f64, f64) {
    let a = p.abs();
    let floored = a < GATE_FLOOR;
    // noise term first so that U = 0.5 contributes an exact zero
    let logit = (a.max(GATE_FLOOR).ln() + (u.ln() - (1.0 - u).ln())) / temperature;
    let s = sigmoid(logit);
    let d = if floored { 0.0 } else { s * (1.0 - s) / (temperature * p) };
    (s, d)
}

/// Deterministic gate used at inference (U = 0.5).
pub fn gate_inference(p: f64, temperature: f64) -> f64 {
    concrete_sample(p, temperature, 0.5)
}

/// Gated position/rotation update. Opacity and scales are untouched by
/// construction: only the center and orientation are returned.
pub fn apply_deformation(g: &Gaussian2D, dmu: &Vec3, dr: &Vec3, gate: f64) -> (Vec3, Quat) {
    let mu = g.mu + dmu * gate;
    let q = Quat::new(g.rot.w, g.rot.x + gate * dr.x, g.rot.y + gate * dr.y, g.rot.z + gate * dr.z);
    (mu, q.normalize())
}

pub fn modulate_color(c: &Vec3, dc: &Vec3) -> Vec3 {
    c.zip_map(dc, |c, d| (c * (1.0 - d)).clamp(0.0, 1.0))
}

/// How the gate is evaluated when posing splats.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    /// Fresh uniform draw per splat from the given stream.
    Sampled { seed: u64, stream: u64 },
    /// U = 0.5.
    Inference,
    /// Gate fixed at one (no separation).
    Disabled,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformOptions {
    pub temperature: f64,
    pub gate: GateMode,
    /// Zero all deltas (warm-up or canonical render).
    pub zero_deltas: bool,
    /// Force the color delta to zero.
    pub no_deltac: bool,
    /// Stop the gradient from flowing into mu through the field's input.
    pub detach_input: bool,
}

impl Default for DeformOptions {
    fn default() -> Self {
        DeformOptions { temperature: DEFAULT_TEMPERATURE, gate: GateMode::Inference, zero_deltas: false, no_deltac: false, detach_input: false }
    }
}

/// Everything the reverse pass needs from [`pose_gaussians`].
pub struct DeformTape {
    pub t: f64,
    pub mlp: Option<MlpTape>,
    pub deltas: Deltas,
    pub gates: Vec<f64>,
    pub gate_grads: Vec<f64>,
    /// Un-normalized rotation sums q + (0, gate * dr).
    pub q_raw: Vec<Quat>,
    /// Color modulation before clamping.
    pub color_raw: Vec<Vec3>,
    pub opts: DeformOptions,
}

/// Poses every Gaussian at timestep `t`.
pub fn pose_gaussians(
    gaussians: &[Gaussian2D],
    field: &DeformationField,
    t: f64,
    opts: DeformOptions,
) -> (Vec<PosedSplat>, DeformTape) {
    let n = gaussians.len();
    let (deltas, mlp) = if opts.zero_deltas {
        let z = vec![Vec3::zeros(); n];
        (Deltas { dmu: z.clone(), dr: z.clone(), dc: z }, None)
    } else {
        let mus: Vec<Vec3> = gaussians.iter().map(|g| g.mu).collect();
        let (mut d, tape) = field.forward_batch(t, &mus);
        if opts.no_deltac {
            d.dc.iter_mut().for_each(|c| *c = Vec3::zeros());
        }
        (d, Some(tape))
    };
    let mut rng = match opts.gate {
        GateMode::Sampled { seed, stream } => Some(Rng::stream(seed, stream)),
        _ => None,
    };
    let mut gates = Vec::with_capacity(n);
    let mut gate_grads = Vec::with_capacity(n);
    for g in gaussians {
        let (v, d) = match opts.gate {
            GateMode::Disabled => (1.0, 0.0),
            GateMode::Inference => concrete_sample_grad(g.gate_logit, opts.temperature, 0.5),
            GateMode::Sampled { .. } => {
                let u = rng.as_mut().expect("rng").uniform_open();
                concrete_sample_grad(g.gate_logit, opts.temperature, u)
            }
        };
        gates.push(v);
        gate_grads.push(d);
    }
    let mut posed = Vec::with_capacity(n);
    let mut q_raw = Vec::with_capacity(n);
    let mut color_raw = Vec::with_capacity(n);
    for (i, g) in gaussians.iter().enumerate() {
        let gate = gates[i];
        let mu = g.mu + deltas.dmu[i] * gate;
        let dr = deltas.dr[i];
        let q = Quat::new(g.rot.w, g.rot.x + gate * dr.x, g.rot.y + gate * dr.y, g.rot.z + gate * dr.z);
        let raw_c = g.color.component_mul(&deltas.dc[i].map(|d| 1.0 - d));
        posed.push(PosedSplat {
            mu,
            frame: quat_to_frame(q.normalize()),
            scale: g.scale,
            opacity: g.opacity,
            color: raw_c.map(|c| c.clamp(0.0, 1.0)),
            albedo: g.albedo,
            roughness: g.roughness,
        });
        q_raw.push(q);
        color_raw.push(raw_c);
    }
    (posed, DeformTape { t, mlp, deltas, gates, gate_grads, q_raw, color_raw, opts })
}

/// Gradient with respect to the stored parameters of one Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub mu: Vec3,
    pub rot: [f64; 4],
    pub scale: [f64; 2],
    pub opacity: f64,
    pub color: Vec3,
    pub albedo: Vec3,
    pub roughness: f64,
    pub gate_logit: f64,
}

/// Reverse pass of [`pose_gaussians`]. Field gradients are added to
/// `field_grad`; the per-Gaussian gradients are returned.
pub fn pose_backward(
    gaussians: &[Gaussian2D],
    field: &DeformationField,
    tape: &DeformTape,
    splat_grads: &[SplatGrad],
    field_grad: &mut DeformationField,
) -> Vec<GaussianGrad> {
    pose_backward_with(gaussians, field, tape, splat_grads, None, field_grad)
}

/// Extra gradients on the raw (ungated) MLP outputs, e.g. from delta
/// regularizers.
pub struct DeltaGrads<'a> {
    pub dmu: &'a [Vec3],
    pub dc: &'a [Vec3],
}

/// [`pose_backward`] with additional gradients on the raw deltas.
pub fn pose_backward_with(
    gaussians: &[Gaussian2D],
    field: &DeformationField,
    tape: &DeformTape,
    splat_grads: &[SplatGrad],
    extra: Option<DeltaGrads>,
    field_grad: &mut DeformationField,
) -> Vec<GaussianGrad> {
    let n = gaussians.len();
    let mut out = vec![GaussianGrad::default(); n];
    let mut gdmu = vec![Vec3::zeros(); n];
    let mut gdr = vec![Vec3::zeros(); n];
    let mut gdc = vec![Vec3::zeros(); n];
    for i in 0..n {
        let sg = &splat_grads[i];
        let g = &gaussians[i];
        let gate = tape.gates[i];
        let o = &mut out[i];
        o.scale = sg.scale;
        o.opacity = sg.opacity;
        o.albedo = sg.albedo;
        o.roughness = sg.roughness;

        // color: clamp passes gradient only strictly inside (0, 1)
        let raw = tape.color_raw[i];
        let one_minus = tape.deltas.dc[i].map(|d| 1.0 - d);
        for k in 0..3 {
            if raw[k] > 0.0 && raw[k] < 1.0 {
                o.color[k] = sg.color[k] * one_minus[k];
                gdc[i][k] = -sg.color[k] * g.color[k];
            }
        }

        o.mu = sg.mu;
        gdmu[i] = sg.mu * gate;
        let mut ggate = sg.mu.dot(&tape.deltas.dmu[i]);

        let q = tape.q_raw[i];
        let gm = Mat3::from_columns(&[sg.tu, sg.tv, sg.n]);
        let gunit = q.normalize().to_matrix_backward(&gm);
        let gq = q.normalize_backward(gunit);
        o.rot = gq;
        let gvec = Vec3::new(gq[1], gq[2], gq[3]);
        gdr[i] = gvec * gate;
        ggate += gvec.dot(&tape.deltas.dr[i]);

        o.gate_logit = ggate * tape.gate_grads[i];
    }
    if let Some(e) = &extra {
        for i in 0..n {
            gdmu[i] += e.dmu[i];
            gdc[i] += e.dc[i];
        }
    }
    if let Some(mlp) = &tape.mlp {
        if tape.opts.no_deltac {
            gdc.iter_mut().for_each(|c| *c = Vec3::zeros());
        }
        let gmu = field.backward_batch(mlp, &gdmu, &gdr, &gdc, field_grad);
        if !tape.opts.detach_input {
            for (o, g) in out.iter_mut().zip(gmu) {
                o.mu += g;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use crate::geometry::Rng;

    fn random_field(seed: u64) -> DeformationField {
        let mut f = DeformationField::new(3, 16, seed);
        let mut rng = Rng::new(seed + 100);
        let mut flat = f.to_flat();
        for v in flat.iter_mut() {
            *v += rng.normal() * 0.1;
        }
        f.set_flat(&flat).unwrap();
        f
    }

    /// Plain nested-loop forward pass.
    fn reference_forward(f: &DeformationField, t: f64, mu: &Vec3) -> [Vec3; 3] {
        let mut x: Vec<f64> = Vec::new();
        for k in 0..f.enc_t {
            let w = 2f64.powi(k as i32) * std::f64::consts::PI;
            x.push((w * t).sin());
            x.push((w * t).cos());
        }
        for k in 0..f.enc_mu {
            let w = 2f64.powi(k as i32) * std::f64::consts::PI;
            for d in 0..3 {
                x.push((w * mu[d]).sin());
            }
            for d in 0..3 {
                x.push((w * mu[d]).cos());
            }
        }
        for l in &f.trunk {
            let mut y = vec![0.0; l.w.nrows()];
            for o in 0..l.w.nrows() {
                let mut s = l.b[o];
                for i in 0..l.w.ncols() {
                    s += l.w[(o, i)] * x[i];
                }
                y[o] = s.max(0.0);
            }
            x = y;
        }
        let head = |l: &Linear| {
            let mut v = Vec3::zeros();
            for o in 0..3 {
                v[o] = l.b[o] + (0..x.len()).map(|i| l.w[(o, i)] * x[i]).sum::<f64>();
            }
            v
        };
        [head(&f.head_mu), head(&f.head_r), head(&f.head_c)]
    }

    #[test]
    fn zero_heads_give_zero_deltas() {
        let f = DeformationField::new(4, 64, 1);
        let (a, b, c) = mlp_forward(&f, 0.3, &Vec3::new(0.1, -0.4, 0.9));
        assert_eq!((a, b, c), (Vec3::zeros(), Vec3::zeros(), Vec3::zeros()));
    }

    #[test]
    fn matches_scalar_reference() {
        let f = random_field(2);
        let mut rng = Rng::new(9);
        for _ in 0..20 {
            let t = rng.uniform();
            let mu = Vec3::new(rng.uniform() - 0.5, rng.uniform() - 0.5, rng.uniform() - 0.5);
            let (a, b, c) = mlp_forward(&f, t, &mu);
            let r = reference_forward(&f, t, &mu);
            assert!((a - r[0]).norm() < 1e-6 && (b - r[1]).norm() < 1e-6 && (c - r[2]).norm() < 1e-6);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let f = random_field(3);
        let mu = Vec3::new(0.2, 0.1, -0.3);
        assert_eq!(mlp_forward(&f, 0.25, &mu), mlp_forward(&f, 0.25, &mu));
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let f = random_field(4);
        let mus = vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-0.2, 0.05, 0.4)];
        let t = 0.4;
        let mut rng = Rng::new(5);
        let w: Vec<[Vec3; 3]> = (0..2)
            .map(|_| [0, 1, 2].map(|_| Vec3::new(rng.normal(), rng.normal(), rng.normal())))
            .collect();
        let objective = |f: &DeformationField, mus: &[Vec3]| {
            let (d, _) = f.forward_batch(t, mus);
            (0..2).map(|i| d.dmu[i].dot(&w[i][0]) + d.dr[i].dot(&w[i][1]) + d.dc[i].dot(&w[i][2])).sum::<f64>()
        };
        let (_, tape) = f.forward_batch(t, &mus);
        let mut grad = f.zeros_like();
        let gdmu: Vec<_> = w.iter().map(|x| x[0]).collect();
        let gdr: Vec<_> = w.iter().map(|x| x[1]).collect();
        let gdc: Vec<_> = w.iter().map(|x| x[2]).collect();
        let gmu = f.backward_batch(&tape, &gdmu, &gdr, &gdc, &mut grad);
        let flat = f.to_flat();
        let gflat = grad.to_flat();
        let h = 1e-6;
        for k in (0..flat.len()).step_by(37) {
            let mut p = f.clone();
            let mut v = flat.clone();
            v[k] += h;
            p.set_flat(&v).unwrap();
            let up = objective(&p, &mus);
            v[k] -= 2.0 * h;
            p.set_flat(&v).unwrap();
            let dn = objective(&p, &mus);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - gflat[k]).abs() < 1e-5 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", gflat[k]);
        }
        for i in 0..2 {
            for d in 0..3 {
                let mut m = mus.clone();
                m[i][d] += h;
                let up = objective(&f, &m);
                m[i][d] -= 2.0 * h;
                let dn = objective(&f, &m);
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - gmu[i][d]).abs() < 1e-5 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = random_field(6);
        f.save(dir.path().join("mlp.bin"), dir.path().join("mlp.json")).unwrap();
        let g = DeformationField::load(dir.path().join("mlp.bin"), dir.path().join("mlp.json")).unwrap();
        for (a, b) in f.to_flat().iter().zip(g.to_flat()) {
            assert_eq!(*a as f32 as f64, b);
        }
        let header: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("mlp.json")).unwrap()).unwrap();
        assert_eq!(header["enc_t"], 6);
        assert_eq!(header["enc_mu"], 10);
    }

    #[test]
    fn concrete_examples() {
        assert_relative_eq!(concrete_sample(1.0, 0.5, 0.5), 0.5, epsilon = 1e-15);
        // floored: sigmoid(ln(1e-8) / 0.5) = 1e-16
        assert!(concrete_sample(1e-12, 0.5, 0.5) < 1e-15);
        let e2 = 2f64.exp();
        assert_relative_eq!(concrete_sample(e2, 0.5, 0.5), 1.0 / (1.0 + (-4f64).exp()), epsilon = 1e-12);
        assert_relative_eq!(gate_inference(e2, 0.5), 0.98201379, epsilon = 1e-7);
        assert_eq!(gate_inference(-3.0, 0.5), gate_inference(3.0, 0.5));
    }

    #[test]
    fn concrete_derivative() {
        for &p in &[0.3, -0.7, 2.0] {
            for &u in &[0.2, 0.5, 0.9] {
                let (_, d) = concrete_sample_grad(p, 0.5, u);
                let h = 1e-6;
                let fd = (concrete_sample(p + h, 0.5, u) - concrete_sample(p - h, 0.5, u)) / (2.0 * h);
                assert!((fd - d).abs() < 1e-7, "{p} {u}: {fd} vs {d}");
            }
        }
    }

    #[test]
    fn deformation_examples() {
        let g = Gaussian2D::new(Vec3::new(1.0, 2.0, 3.0), Quat::from_axis_angle(Vec3::x(), 0.4), [0.1, 0.2], 0.7, Vec3::zeros());
        let (mu, q) = apply_deformation(&g, &Vec3::new(5.0, 5.0, 5.0), &Vec3::new(1.0, 1.0, 1.0), 0.0);
        assert_eq!(mu, g.mu);
        assert!((q.to_array().iter().zip(g.rot.to_array()).map(|(a, b)| (a - b).abs()).sum::<f64>()) < 1e-15);
        let (mu, _) = apply_deformation(&g, &Vec3::new(0.0, 0.0, 1.0), &Vec3::zeros(), 1.0);
        assert_eq!(mu, g.mu + Vec3::new(0.0, 0.0, 1.0));
        let (mu, _) = apply_deformation(&g, &Vec3::new(2.0, 0.0, 0.0), &Vec3::zeros(), 0.5);
        assert_eq!(mu, g.mu + Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn color_modulation_examples() {
        let c = Vec3::new(0.8, 0.8, 0.8);
        assert_eq!(modulate_color(&c, &Vec3::zeros()), c);
        assert!((modulate_color(&c, &Vec3::repeat(0.5)) - Vec3::repeat(0.4)).norm() < 1e-15);
        assert_eq!(modulate_color(&c, &Vec3::repeat(1.0)), Vec3::zeros());
    }

    #[test]
    fn posing_never_touches_scale_or_opacity() {
        let f = random_field(7);
        let gs: Vec<_> = (0..5)
            .map(|i| {
                let mut g = Gaussian2D::new(Vec3::new(i as f64 * 0.1, 0.0, 0.0), Quat::IDENTITY, [0.1, 0.3], 0.6, Vec3::repeat(0.5));
                g.gate_logit = 3.0;
                g
            })
            .collect();
        let (posed, _) = pose_gaussians(&gs, &f, 0.7, DeformOptions::default());
        for (g, p) in gs.iter().zip(&posed) {
            assert_eq!(p.scale, g.scale);
            assert_eq!(p.opacity, g.opacity);
        }
    }

    #[test]
    fn zero_gate_and_zero_color_head_reproduce_canonical() {
        let mut f = random_field(8);
        f.head_c = Linear::zeros(f.width(), 3);
        let gs: Vec<_> = (0..4)
            .map(|i| {
                let mut g = Gaussian2D::new(Vec3::new(0.0, i as f64 * 0.2, 0.0), Quat::from_axis_angle(Vec3::y(), 0.3), [0.1, 0.1], 0.6, Vec3::repeat(0.5));
                g.gate_logit = 0.0;
                g
            })
            .collect();
        let (posed, _) = pose_gaussians(&gs, &f, 0.9, DeformOptions::default());
        for (g, p) in gs.iter().zip(&posed) {
            assert!((p.mu - g.mu).norm() < 1e-14);
            assert!((p.frame.matrix() - g.posed().frame.matrix()).norm() < 1e-14);
            assert_eq!(p.color, g.color);
        }
    }

    proptest! {
        #[test]
        fn gate_monotone_and_bounded(a in 1e-6f64..50.0, b in 1e-6f64..50.0, u in 0.01f64..0.99) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(hi - lo > 1e-9 * hi);
            let (x, y) = (concrete_sample(lo, 0.5, u), concrete_sample(hi, 0.5, u));
            prop_assert!(x > 0.0 && y <= 1.0);
            prop_assert!(y >= x);
            prop_assert_eq!(gate_inference(a, 0.5), 1.0 / (1.0 + (-(a.ln() / 0.5)).exp()));
        }
    }
}
