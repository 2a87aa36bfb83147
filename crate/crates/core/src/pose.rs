//! Six-parameter rigid poses, their homogeneous matrices, and the product
//! metric on SO(3) x R^3 used for geodesic distances and gradients.
//!
//! Angles are in degrees and translations in millimeters. The matrix of a
//! pose is `M_t * M_rx * M_ry * M_rz` acting on column vectors expressed
//! relative to the volume center, i.e. the volume rotates about its own
//! center (intrinsic x-y-z Euler order) and is then translated.

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3, DEG};

/// Rigid pose: rotations in degrees, translations in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Pose {
    #[cfg_attr(feature = "serde", serde(rename = "rx_deg"))]
    pub rx: f64,
    #[cfg_attr(feature = "serde", serde(rename = "ry_deg"))]
    pub ry: f64,
    #[cfg_attr(feature = "serde", serde(rename = "rz_deg"))]
    pub rz: f64,
    #[cfg_attr(feature = "serde", serde(rename = "tx_mm"))]
    pub tx: f64,
    #[cfg_attr(feature = "serde", serde(rename = "ty_mm"))]
    pub ty: f64,
    #[cfg_attr(feature = "serde", serde(rename = "tz_mm"))]
    pub tz: f64,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { rx: 0.0, ry: 0.0, rz: 0.0, tx: 0.0, ty: 0.0, tz: 0.0 };

    pub const fn new(rx: f64, ry: f64, rz: f64, tx: f64, ty: f64, tz: f64) -> Self {
        Pose { rx, ry, rz, tx, ty, tz }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Pose::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.rx, self.ry, self.rz, self.tx, self.ty, self.tz]
    }

    pub fn rotation(self) -> Vec3 {
        [self.rx, self.ry, self.rz]
    }

    pub fn translation(self) -> Vec3 {
        [self.tx, self.ty, self.tz]
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Same pose with every angle wrapped into (-180, 180].
    pub fn normalized(self) -> Self {
        Pose { rx: wrap_deg(self.rx), ry: wrap_deg(self.ry), rz: wrap_deg(self.rz), ..self }
    }

    /// Parameter-wise `self + s * g`, with `g` split into rotation and translation parts.
    pub fn step(self, g: &GradVec, s_rot: f64, s_trans: f64) -> Self {
        Pose {
            rx: self.rx + s_rot * g.v_r[0],
            ry: self.ry + s_rot * g.v_r[1],
            rz: self.rz + s_rot * g.v_r[2],
            tx: self.tx + s_trans * g.v_t[0],
            ty: self.ty + s_trans * g.v_t[1],
            tz: self.tz + s_trans * g.v_t[2],
        }
    }

    /// Offsets parameter `i` (0..6) by `delta`.
    pub fn perturbed(self, i: usize, delta: f64) -> Self {
        let mut a = self.to_array();
        a[i] += delta;
        Pose::from_array(a)
    }

    pub fn rotation_matrix(self) -> Mat3 {
        let (sa, ca) = (math::sin(self.rx * DEG), math::cos(self.rx * DEG));
        let (sb, cb) = (math::sin(self.ry * DEG), math::cos(self.ry * DEG));
        let (sc, cc) = (math::sin(self.rz * DEG), math::cos(self.rz * DEG));
        let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
        math::mat3_mul(&math::mat3_mul(&rx, &ry), &rz)
    }
}

/// Wraps an angle in degrees into (-180, 180].
pub fn wrap_deg(a: f64) -> f64 {
    let mut r = a - 360.0 * math::floor(a / 360.0);
    if r > 180.0 {
        r -= 360.0;
    }
    r
}

/// Homogeneous rigid transform, row-major, bottom row (0, 0, 0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(from = "[f64; 16]", into = "[f64; 16]"))]
pub struct Mat4(pub [[f64; 4]; 4]);

impl Mat4 {
    pub const IDENTITY: Mat4 =
        Mat4([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]);

    pub fn from_parts(r: &Mat3, t: Vec3) -> Self {
        let mut m = Mat4::IDENTITY;
        for i in 0..3 {
            m.0[i][..3].copy_from_slice(&r[i]);
            m.0[i][3] = t[i];
        }
        m
    }

    pub fn rotation(&self) -> Mat3 {
        let m = &self.0;
        [[m[0][0], m[0][1], m[0][2]], [m[1][0], m[1][1], m[1][2]], [m[2][0], m[2][1], m[2][2]]]
    }

    pub fn translation(&self) -> Vec3 {
        [self.0[0][3], self.0[1][3], self.0[2][3]]
    }

    pub fn mul(&self, other: &Mat4) -> Mat4 {
        let mut out = [[0.0; 4]; 4];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        Mat4(out)
    }

    pub fn apply(&self, p: [f64; 4]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (i, v) in out.iter_mut().enumerate() {
            *v = (0..4).map(|k| self.0[i][k] * p[k]).sum();
        }
        out
    }

    /// Transforms a 3D point (w = 1).
    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        let q = self.apply([p[0], p[1], p[2], 1.0]);
        [q[0], q[1], q[2]]
    }
}

impl From<[f64; 16]> for Mat4 {
    fn from(a: [f64; 16]) -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, v) in a.iter().enumerate() {
            m[i / 4][i % 4] = *v;
        }
        Mat4(m)
    }
}

impl From<Mat4> for [f64; 16] {
    fn from(m: Mat4) -> Self {
        let mut a = [0.0; 16];
        for (i, v) in a.iter_mut().enumerate() {
            *v = m.0[i / 4][i % 4];
        }
        a
    }
}

/// `A = M_t * M_rx * M_ry * M_rz`.
pub fn euler_to_matrix(pose: Pose) -> Mat4 {
    let t = |x: f64, y: f64, z: f64| {
        Mat4([[1.0, 0.0, 0.0, x], [0.0, 1.0, 0.0, y], [0.0, 0.0, 1.0, z], [0.0, 0.0, 0.0, 1.0]])
    };
    let (sa, ca) = (math::sin(pose.rx * DEG), math::cos(pose.rx * DEG));
    let (sb, cb) = (math::sin(pose.ry * DEG), math::cos(pose.ry * DEG));
    let (sc, cc) = (math::sin(pose.rz * DEG), math::cos(pose.rz * DEG));
    let m_rx = Mat4([[1.0, 0.0, 0.0, 0.0], [0.0, ca, -sa, 0.0], [0.0, sa, ca, 0.0], [0.0, 0.0, 0.0, 1.0]]);
    let m_ry = Mat4([[cb, 0.0, sb, 0.0], [0.0, 1.0, 0.0, 0.0], [-sb, 0.0, cb, 0.0], [0.0, 0.0, 0.0, 1.0]]);
    let m_rz = Mat4([[cc, -sc, 0.0, 0.0], [sc, cc, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]);
    t(pose.tx, pose.ty, pose.tz).mul(&m_rx).mul(&m_ry).mul(&m_rz)
}

/// Largest absolute entry of `R^T R - I`.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    let rtr = math::mat3_mul(&math::mat3_transpose(r), r);
    let mut worst: f64 = 0.0;
    for (i, row) in rtr.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max(math::abs(v - target));
        }
    }
    worst
}

/// Inverse of [`euler_to_matrix`] away from gimbal lock.
pub fn matrix_to_pose(m: &Mat4) -> Result<Pose> {
    let r = m.rotation();
    let mut err = orthonormality_error(&r);
    let bottom = m.0[3];
    err = err.max(math::abs(bottom[0])).max(math::abs(bottom[1])).max(math::abs(bottom[2]));
    err = err.max(math::abs(bottom[3] - 1.0));
    if !(err <= 1e-6) || math::mat3_det(&r) < 0.0 {
        return Err(Error::NonRigidMatrix(err));
    }
    let sb = r[0][2].clamp(-1.0, 1.0);
    let cb = math::sqrt(r[0][0] * r[0][0] + r[0][1] * r[0][1]);
    if cb < 1e-8 {
        return Err(Error::GimbalLock(cb));
    }
    let ry = math::atan2(sb, cb);
    let rx = math::atan2(-r[1][2], r[2][2]);
    let rz = math::atan2(-r[0][1], r[0][0]);
    let t = m.translation();
    Ok(Pose::new(rx / DEG, ry / DEG, rz / DEG, t[0], t[1], t[2]))
}

/// Relative weights of the rotation (deg^2) and translation (mm^2) parts
/// of the product metric.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GeodesicWeights {
    pub rot: f64,
    pub trans: f64,
}

impl Default for GeodesicWeights {
    fn default() -> Self {
        GeodesicWeights { rot: 1.0, trans: 1.0 }
    }
}

/// Pose-space gradient split into rotation (per degree) and translation
/// (per millimeter) components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GradVec {
    pub v_r: Vec3,
    pub v_t: Vec3,
}

impl GradVec {
    pub const ZERO: GradVec = GradVec { v_r: [0.0; 3], v_t: [0.0; 3] };

    pub fn from_array(a: [f64; 6]) -> Self {
        GradVec { v_r: [a[0], a[1], a[2]], v_t: [a[3], a[4], a[5]] }
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.v_r[0], self.v_r[1], self.v_r[2], self.v_t[0], self.v_t[1], self.v_t[2]]
    }

    pub fn dot(&self, other: &GradVec) -> f64 {
        math::dot(self.v_r, other.v_r) + math::dot(self.v_t, other.v_t)
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.dot(self))
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Rotation angle between `a` and `b` in degrees, and the Euclidean distance
/// between their translations in millimeters.
pub fn geodesic_distance(a: Pose, b: Pose) -> (f64, f64) {
    let rel = math::mat3_mul(&a.rotation_matrix(), &math::mat3_transpose(&b.rotation_matrix()));
    let rot = math::norm(math::so3_log(&rel)) / DEG;
    let trans = math::norm(math::sub(a.translation(), b.translation()));
    (rot, trans)
}

/// `sqrt(w_r * rot^2 + w_t * trans^2)` for the product metric.
pub fn geodesic_norm(a: Pose, b: Pose, w: GeodesicWeights) -> f64 {
    let (r, t) = geodesic_distance(a, b);
    math::sqrt(w.rot * r * r + w.trans * t * t)
}

/// `0.5 * (w_r * rot^2 + w_t * trans^2)`.
pub fn half_squared_distance(a: Pose, b: Pose, w: GeodesicWeights) -> f64 {
    let (r, t) = geodesic_distance(a, b);
    0.5 * (w.rot * r * r + w.trans * t * t)
}

/// Spatial angular-velocity columns of `R = Rx(a) Ry(b) Rz(c)` with respect to
/// each Euler angle: `dR/d(angle_k) = [J_k]x R`.
fn euler_spatial_jacobian(pose: Pose) -> [Vec3; 3] {
    let (sa, ca) = (math::sin(pose.rx * DEG), math::cos(pose.rx * DEG));
    let (sb, cb) = (math::sin(pose.ry * DEG), math::cos(pose.ry * DEG));
    // J_a = e_x; J_b = Rx e_y; J_c = Rx Ry e_z
    [[1.0, 0.0, 0.0], [0.0, ca, sa], [sb, -sa * cb, ca * cb]]
}

/// Gradient of `0.5 * d^2(theta, target)` with respect to the six pose
/// parameters of `theta`, in per-degree and per-millimeter units.
pub fn geodesic_gradient(theta: Pose, target: Pose) -> GradVec {
    geodesic_gradient_weighted(theta, target, GeodesicWeights::default())
}

pub fn geodesic_gradient_weighted(theta: Pose, target: Pose, w: GeodesicWeights) -> GradVec {
    let rel = math::mat3_mul(&theta.rotation_matrix(), &math::mat3_transpose(&target.rotation_matrix()));
    // log vector in degrees; d(0.5 phi_deg^2)/d(angle_deg) = omega_deg . J_k
    let omega = math::scale(math::so3_log(&rel), 1.0 / DEG);
    let jac = euler_spatial_jacobian(theta);
    let v_r = [
        w.rot * math::dot(omega, jac[0]),
        w.rot * math::dot(omega, jac[1]),
        w.rot * math::dot(omega, jac[2]),
    ];
    let d = math::sub(theta.translation(), target.translation());
    GradVec { v_r, v_t: math::scale(d, w.trans) }
}
