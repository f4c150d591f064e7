//! Shared math: vectors, quaternion frames, pinhole cameras, positional
//! encoding and the seeded random stream used everywhere else.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Quaternion stored as (w, x, y, z). Not necessarily unit length; the
/// rotation helpers normalize or assume normalized input as documented.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = axis.normalize() * (0.5 * angle).sin();
        Quat::new((0.5 * angle).cos(), a.x, a.y, a.z)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quat::new(a[0], a[1], a[2], a[3])
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Unit quaternion in the same direction. A zero quaternion maps to identity.
    pub fn normalize(self) -> Self {
        let n = self.norm();
        if n < 1e-300 {
            return Quat::IDENTITY;
        }
        Quat::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    /// Adjoint of [`Quat::normalize`]: maps a gradient on the unit output back
    /// onto the raw input.
    pub fn normalize_backward(self, grad_unit: [f64; 4]) -> [f64; 4] {
        let n = self.norm();
        let u = self.normalize().to_array();
        let dot: f64 = u.iter().zip(grad_unit.iter()).map(|(a, b)| a * b).sum();
        let mut out = [0.0; 4];
        for k in 0..4 {
            out[k] = (grad_unit[k] - u[k] * dot) / n;
        }
        out
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_matrix(self) -> Mat3 {
        let Quat { w, x, y, z } = self;
        Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Gradient of `sum(grad_r .* R(q))` with respect to (w, x, y, z),
    /// treating the matrix formula as a polynomial in q.
    pub fn to_matrix_backward(self, g: &Mat3) -> [f64; 4] {
        let Quat { w, x, y, z } = self;
        let gw = 2.0
            * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
                + x * g[(2, 1)]);
        let gx = 2.0
            * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)]
                - w * g[(1, 2)]
                + z * g[(2, 0)]
                + w * g[(2, 1)]
                - 2.0 * x * g[(2, 2)]);
        let gy = 2.0
            * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)]
                + z * g[(1, 2)]
                - w * g[(2, 0)]
                + z * g[(2, 1)]
                - 2.0 * y * g[(2, 2)]);
        let gz = 2.0
            * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
                - 2.0 * z * g[(1, 1)]
                + y * g[(1, 2)]
                + x * g[(2, 0)]
                + y * g[(2, 1)]);
        [gw, gx, gy, gz]
    }
}

/// Tangent frame of a splat: the columns of the rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub tu: Vec3,
    pub tv: Vec3,
    pub n: Vec3,
}

impl Frame {
    pub fn matrix(&self) -> Mat3 {
        Mat3::from_columns(&[self.tu, self.tv, self.n])
    }
}

pub fn quat_to_frame(q: Quat) -> Frame {
    let r = q.to_matrix();
    Frame {
        tu: r.column(0).into_owned(),
        tv: r.column(1).into_owned(),
        n: r.column(2).into_owned(),
    }
}

/// Inverse of [`quat_to_frame`] for an orthonormal right-handed frame.
/// The returned quaternion has w >= 0.
pub fn frame_to_quat(frame: &Frame) -> Quat {
    let rot = Rotation3::from_matrix_unchecked(frame.matrix());
    let uq = UnitQuaternion::from_rotation_matrix(&rot);
    let q = uq.quaternion();
    let out = Quat::new(q.w, q.i, q.j, q.k);
    if out.w < 0.0 {
        Quat::new(-out.w, -out.x, -out.y, -out.z)
    } else {
        out
    }
}

/// Orthonormal basis around a unit vector (branchless construction of
/// Duff et al.). Returns (b1, b2) with b1 x b2 = n.
pub fn orthonormal_basis(n: &Vec3) -> (Vec3, Vec3) {
    let sign = 1.0_f64.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    let b1 = Vec3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x);
    let b2 = Vec3::new(b, sign + n.y * n.y * a, -n.y);
    (b1, b2)
}

/// NeRF-style encoding. For every frequency k in 0..L the block
/// `[sin(2^k pi x_d) for d] ++ [cos(2^k pi x_d) for d]` is appended.
pub fn positional_encode(x: &[f64], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * 2 * levels);
    positional_encode_into(x, levels, &mut out);
    out
}

pub fn positional_encode_into(x: &[f64], levels: usize, out: &mut Vec<f64>) {
    let mut freq = std::f64::consts::PI;
    for _ in 0..levels {
        for &v in x {
            out.push((freq * v).sin());
        }
        for &v in x {
            out.push((freq * v).cos());
        }
        freq *= 2.0;
    }
}

/// Chain rule through [`positional_encode`]: given the gradient on the
/// encoded vector, returns the gradient on `x`.
pub fn positional_encode_backward(x: &[f64], levels: usize, grad: &[f64]) -> Vec<f64> {
    let dim = x.len();
    let mut gx = vec![0.0; dim];
    let mut freq = std::f64::consts::PI;
    for k in 0..levels {
        let base = k * 2 * dim;
        for d in 0..dim {
            let (s, c) = (freq * x[d]).sin_cos();
            gx[d] += grad[base + d] * freq * c - grad[base + dim + d] * freq * s;
        }
        freq *= 2.0;
    }
    gx
}

/// Pinhole camera. Camera space follows the x-right, y-down, z-forward
/// convention; `rotation` and `position` form the world-from-camera transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub rotation: Mat3,
    pub position: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub time: f64,
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    transform: Vec<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Camera {
    pub fn new(
        rotation: Mat3,
        position: Vec3,
        intrinsics: [f64; 4],
        width: usize,
        height: usize,
        time: f64,
    ) -> Result<Self> {
        let [fx, fy, cx, cy] = intrinsics;
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidInput("camera focal lengths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&time) {
            return Err(Error::InvalidInput(format!("camera time {time} outside [0,1]")));
        }
        Ok(Camera { rotation, position, fx, fy, cx, cy, width, height, time })
    }

    /// Camera at `eye` looking at `target`, with `up` giving the image's
    /// upward direction. Field of view is horizontal, in degrees.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fov_deg: f64,
        width: usize,
        height: usize,
        time: f64,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        let fx = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Camera::new(
            rotation,
            eye,
            [fx, fx, 0.5 * width as f64, 0.5 * height as f64],
            width,
            height,
            time,
        )
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.position)
    }

    /// Projects a camera-space point to continuous pixel coordinates.
    pub fn project_camera(&self, pc: &Vec3) -> Option<(f64, f64)> {
        if pc.z <= 1e-9 {
            return None;
        }
        Some((self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy))
    }

    /// Ray through continuous image coordinates (x, y).
    pub fn ray_through(&self, x: f64, y: f64) -> Ray {
        let d = Vec3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0);
        Ray { origin: self.position, dir: (self.rotation * d).normalize() }
    }

    pub fn with_time(&self, time: f64) -> Result<Self> {
        Camera::new(
            self.rotation,
            self.position,
            [self.fx, self.fy, self.cx, self.cy],
            self.width,
            self.height,
            time,
        )
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let mut transform = Vec::with_capacity(16);
        for r in 0..3 {
            for c in 0..3 {
                transform.push(self.rotation[(r, c)]);
            }
            transform.push(self.position[r]);
        }
        transform.extend_from_slice(&[0.0, 0.0, 0.0, 1.0]);
        serde_json::to_value(CameraJson {
            transform,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            time: self.time,
        })
        .expect("camera serializes")
    }

    pub fn from_json_value(v: &serde_json::Value) -> Result<Self> {
        let cj: CameraJson = serde_json::from_value(v.clone())?;
        if cj.transform.len() != 16 {
            return Err(Error::InvalidInput("camera transform must have 16 entries".into()));
        }
        let t = &cj.transform;
        let rotation = Mat3::new(t[0], t[1], t[2], t[4], t[5], t[6], t[8], t[9], t[10]);
        let position = Vec3::new(t[3], t[7], t[11]);
        Camera::new(rotation, position, [cj.fx, cj.fy, cj.cx, cj.cy], cj.width, cj.height, cj.time)
    }
}

/// Back-projects the center of integer pixel (col, row).
pub fn pixel_ray(cam: &Camera, col: usize, row: usize) -> Result<Ray> {
    if col >= cam.width || row >= cam.height {
        return Err(Error::OutOfBounds(format!(
            "pixel ({col},{row}) outside {}x{} image",
            cam.width, cam.height
        )));
    }
    Ok(cam.ray_through(col as f64 + 0.5, row as f64 + 0.5))
}

pub fn cameras_to_json(cams: &[Camera]) -> serde_json::Value {
    serde_json::Value::Array(cams.iter().map(Camera::to_json_value).collect())
}

/// Accepts either a single camera object or an array of cameras.
pub fn cameras_from_json(v: &serde_json::Value) -> Result<Vec<Camera>> {
    match v {
        serde_json::Value::Array(items) => items.iter().map(Camera::from_json_value).collect(),
        other => Ok(vec![Camera::from_json_value(other)?]),
    }
}

/// Seeded counter-based generator. `stream` selects an independent
/// sequence for the same seed, so per-pixel or per-iteration streams are
/// reproducible regardless of how work is scheduled.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.inner.random::<f64>();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    pub fn normal(&mut self) -> f64 {
        // Box-Muller
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniformly distributed unit quaternion.
    pub fn quat(&mut self) -> Quat {
        Quat::new(self.normal(), self.normal(), self.normal(), self.normal()).normalize()
    }

    pub fn unit_vector(&mut self) -> Vec3 {
        loop {
            let v = Vec3::new(self.normal(), self.normal(), self.normal());
            let n = v.norm();
            if n > 1e-9 {
                return v / n;
            }
        }
    }

    /// `k` distinct indices out of `0..n`, in draw order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}
