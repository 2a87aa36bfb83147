//! Small fixed-size linear algebra and `libm` wrappers for `no_std` builds.

pub const DEG: f64 = core::f64::consts::PI / 180.0;

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}
#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}
#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}
#[inline]
pub fn atan2(y: f64, x: f64) -> f64 {
    libm::atan2(y, x)
}
#[inline]
pub fn asin(x: f64) -> f64 {
    libm::asin(x)
}
#[inline]
pub fn acos(x: f64) -> f64 {
    libm::acos(x)
}
#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}
#[inline]
pub fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}
#[inline]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}
#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}
#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}
#[inline]
pub fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, n as f64)
}
#[inline]
pub fn log2(x: f64) -> f64 {
    libm::log2(x)
}

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    sqrt(dot(a, a))
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Row-major 3x3 matrix.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat3_transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

#[inline]
pub fn mat3_apply(a: &Mat3, v: Vec3) -> Vec3 {
    [dot(a[0], v), dot(a[1], v), dot(a[2], v)]
}

pub fn mat3_det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Rotation angle (radians) and axis-scaled log vector of a rotation matrix.
///
/// Accurate for angles away from pi; near pi the axis is recovered from the
/// symmetric part.
pub fn so3_log(r: &Mat3) -> Vec3 {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let cos_a = ((tr - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = acos(cos_a);
    let w = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if angle < 1e-7 {
        // first-order: log(R) ~ (R - R^T)/2
        return scale(w, 0.5);
    }
    let s = sin(angle);
    if s > 1e-6 {
        return scale(w, angle / (2.0 * s));
    }
    // angle ~ pi: R ~ 2 a a^T - I
    let mut axis = [
        sqrt(((r[0][0] + 1.0) * 0.5).max(0.0)),
        sqrt(((r[1][1] + 1.0) * 0.5).max(0.0)),
        sqrt(((r[2][2] + 1.0) * 0.5).max(0.0)),
    ];
    if axis[0] >= axis[1] && axis[0] >= axis[2] {
        axis[1] = libm::copysign(axis[1], r[0][1] + r[1][0]);
        axis[2] = libm::copysign(axis[2], r[0][2] + r[2][0]);
    } else if axis[1] >= axis[2] {
        axis[0] = libm::copysign(axis[0], r[0][1] + r[1][0]);
        axis[2] = libm::copysign(axis[2], r[1][2] + r[2][1]);
    } else {
        axis[0] = libm::copysign(axis[0], r[0][2] + r[2][0]);
        axis[1] = libm::copysign(axis[1], r[1][2] + r[2][1]);
    }
    let n = norm(axis);
    scale(axis, angle / n)
}
