//! Pose sampling and per-case registration error metrics.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math;
use crate::pose::{euler_to_matrix, geodesic_distance, wrap_deg, Pose};
use crate::projector::Intrinsics;
use crate::volume::Volume;

/// Zero-mean normal pose distribution with per-parameter standard deviations.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PoseDistribution {
    pub rot_sigma_deg: [f64; 3],
    pub trans_sigma_mm: [f64; 3],
}

impl PoseDistribution {
    pub fn isotropic(rot_deg: f64, trans_mm: f64) -> Self {
        PoseDistribution { rot_sigma_deg: [rot_deg; 3], trans_sigma_mm: [trans_mm; 3] }
    }

    /// Pose-initialization training distribution: N(0, 20) deg on every
    /// axis and N(0, 100), N(0, 30), N(0, 15) mm for tx, ty, tz.
    pub fn rtpi_training() -> Self {
        PoseDistribution { rot_sigma_deg: [20.0; 3], trans_sigma_mm: [100.0, 30.0, 15.0] }
    }

    /// Fine-registration training distribution: N(0, 20) deg and N(0, 20) mm.
    pub fn finereg_training() -> Self {
        PoseDistribution::isotropic(20.0, 20.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rot_sigma_deg.iter().chain(&self.trans_sigma_mm).all(|s| s.is_finite() && *s >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig("pose sigmas must be finite and >= 0".into()))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Pose {
        let mut a = [0.0; 6];
        let sig = [
            self.rot_sigma_deg[0],
            self.rot_sigma_deg[1],
            self.rot_sigma_deg[2],
            self.trans_sigma_mm[0],
            self.trans_sigma_mm[1],
            self.trans_sigma_mm[2],
        ];
        for (v, s) in a.iter_mut().zip(sig) {
            // always draw so the stream layout does not depend on the sigmas
            let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
            *v = s * z;
        }
        Pose::from_array(a)
    }
}

/// Independent draws `(initial, target)` from the same distribution.
pub fn sample_pose_pair<R: Rng + ?Sized>(dist: &PoseDistribution, rng: &mut R) -> (Pose, Pose) {
    let init = dist.sample(rng);
    let target = dist.sample(rng);
    (init, target)
}

/// Residual rotation/translation thresholds for a successful registration.
pub const SUCCESS_ROT_DEG: f64 = 3.0;
pub const SUCCESS_TRANS_MM: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CaseMetrics {
    pub rot_err_deg: f64,
    pub trans_err_mm: f64,
    /// Signed per-parameter residuals `pred - truth` (angles wrapped).
    pub axis_err: [f64; 6],
    pub success: bool,
}

/// Success requires both residuals strictly below their thresholds.
pub fn is_success(rot_err_deg: f64, trans_err_mm: f64) -> bool {
    rot_err_deg < SUCCESS_ROT_DEG && trans_err_mm < SUCCESS_TRANS_MM
}

pub fn evaluate_case(truth: Pose, pred: Pose) -> CaseMetrics {
    let (rot, trans) = geodesic_distance(pred, truth);
    let mut axis_err = [0.0; 6];
    for (i, (p, t)) in pred.to_array().iter().zip(truth.to_array()).enumerate() {
        axis_err[i] = if i < 3 { wrap_deg(p - t) } else { p - t };
    }
    CaseMetrics { rot_err_deg: rot, trans_err_mm: trans, axis_err, success: is_success(rot, trans) }
}

/// Detector position (mm) of each posed volume corner.
pub fn projected_corners(volume: &Volume, pose: Pose, k: &Intrinsics) -> Result<[[f64; 2]; 8]> {
    let m = euler_to_matrix(pose);
    let c = volume.center();
    let mut out = [[0.0; 2]; 8];
    for (o, corner) in out.iter_mut().zip(volume.corners()) {
        let world = m.apply_point(math::sub(corner, c));
        let q = k.project_point(world).ok_or(Error::OffDetector)?;
        if !k.on_detector(q) {
            return Err(Error::OffDetector);
        }
        *o = q;
    }
    Ok(out)
}

/// Mean detector-plane distance (mm) between the projected volume corners
/// under the true and the predicted pose.
pub fn dist_err(truth: Pose, pred: Pose, volume: &Volume, k: &Intrinsics) -> Result<f64> {
    let a = projected_corners(volume, truth, k)?;
    let b = projected_corners(volume, pred, k)?;
    let total: f64 = a
        .iter()
        .zip(&b)
        .map(|(p, q)| math::sqrt((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1])))
        .sum();
    Ok(total / 8.0)
}
