//! Ray-casting DRR projector under a C-arm pinhole model, mask projection,
//! and central finite-difference pose gradients.
//!
//! Geometry: the isocenter is the world origin, the X-ray source sits at
//! `(0, 0, -siso)` and the detector plane is `z = sdd - siso`, centered on
//! the z axis. Pixel `(u, v)` has its center at
//! `((u + 0.5 - w/2) p, (v + 0.5 - h/2) p)` on that plane. A posed volume
//! maps its (centered) voxel positions `x` to `R x + t`, so the identity
//! pose places the volume center at the isocenter.
//!
//! Each ray integrates the trilinear interpolant of the volume, extended by
//! zero outside the grid, with a midpoint rule whose step never exceeds
//! `step_mm`. Rays are clipped to the support of the interpolant first.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::image::{Image, MaskImage};
use crate::math::{self, Vec3};
use crate::pose::{GradVec, Pose};
use crate::volume::{Volume, VoxelMask};

/// C-arm imaging intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Intrinsics {
    pub sdd_mm: f64,
    pub siso_mm: f64,
    pub det_px: [usize; 2],
    pub px_spacing_mm: f64,
    pub step_mm: f64,
}

/// Native detector pitch of the modeled C-arm (mm/pixel at 1024 x 1024).
pub const NATIVE_PITCH_MM: f64 = 0.19959;
pub const DEFAULT_SDD_MM: f64 = 1011.7;
pub const DEFAULT_SISO_MM: f64 = 600.0;

impl Intrinsics {
    /// 256 x 256 detector binned 4x from the native 1024 x 1024 panel.
    pub fn full_scale() -> Self {
        Intrinsics {
            sdd_mm: DEFAULT_SDD_MM,
            siso_mm: DEFAULT_SISO_MM,
            det_px: [256, 256],
            px_spacing_mm: NATIVE_PITCH_MM * 4.0,
            step_mm: 0.5,
        }
    }

    /// 64 x 64 detector covering the same panel (16x binning).
    pub fn toy() -> Self {
        Intrinsics {
            det_px: [64, 64],
            px_spacing_mm: NATIVE_PITCH_MM * 16.0,
            step_mm: 1.5,
            ..Intrinsics::full_scale()
        }
    }

    /// Same intrinsics with the ray step set to half the smallest voxel spacing.
    pub fn with_step_for(mut self, volume: &Volume) -> Self {
        let s = volume.spacing();
        self.step_mm = 0.5 * s[0].min(s[1]).min(s[2]);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.siso_mm > 0.0
            && self.sdd_mm > self.siso_mm
            && self.sdd_mm.is_finite()
            && self.det_px[0] >= 1
            && self.det_px[1] >= 1
            && self.px_spacing_mm > 0.0
            && self.step_mm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::InvalidConfig(alloc::format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn source(&self) -> Vec3 {
        [0.0, 0.0, -self.siso_mm]
    }

    /// World position of the center of detector pixel `(u, v)`.
    pub fn pixel_center(&self, u: usize, v: usize) -> Vec3 {
        let [w, h] = self.det_px;
        [
            (u as f64 + 0.5 - 0.5 * w as f64) * self.px_spacing_mm,
            (v as f64 + 0.5 - 0.5 * h as f64) * self.px_spacing_mm,
            self.sdd_mm - self.siso_mm,
        ]
    }

    /// Perspective projection of a world point onto the detector plane, in
    /// detector millimeters relative to the detector center. `None` when the
    /// point is not in front of the source.
    pub fn project_point(&self, p: Vec3) -> Option<[f64; 2]> {
        let depth = p[2] + self.siso_mm;
        if !(depth > 1e-9) {
            return None;
        }
        let s = self.sdd_mm / depth;
        Some([p[0] * s, p[1] * s])
    }

    /// Whether a detector-plane point (mm) lies on the detector area.
    pub fn on_detector(&self, q: [f64; 2]) -> bool {
        let hw = 0.5 * self.det_px[0] as f64 * self.px_spacing_mm;
        let hh = 0.5 * self.det_px[1] as f64 * self.px_spacing_mm;
        math::abs(q[0]) <= hw && math::abs(q[1]) <= hh
    }
}

/// Strategy for filling image rows. Implementations must call `f` exactly
/// once per row; every row is computed independently, so results never
/// depend on how rows are scheduled.
pub trait RowExecutor: Sync {
    fn for_each_row(&self, out: &mut [f64], width: usize, f: &(dyn Fn(usize, &mut [f64]) + Sync));
}

/// Runs rows one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Serial;

impl RowExecutor for Serial {
    fn for_each_row(&self, out: &mut [f64], width: usize, f: &(dyn Fn(usize, &mut [f64]) + Sync)) {
        for (v, row) in out.chunks_mut(width).enumerate() {
            f(v, row);
        }
    }
}

/// Volume with one layer of zero padding, ready for branch-free trilinear sampling.
struct PaddedGrid {
    dims: [usize; 3],
    stride_y: usize,
    stride_z: usize,
    data: Vec<f64>,
}

impl PaddedGrid {
    fn new(dims: [usize; 3], values: impl Fn(usize) -> f64) -> Self {
        let (px, py, pz) = (dims[0] + 2, dims[1] + 2, dims[2] + 2);
        let mut data = vec![0.0; px * py * pz];
        let mut i = 0;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                let base = 1 + px * (y + 1 + py * (z + 1));
                for x in 0..dims[0] {
                    data[base + x] = values(i);
                    i += 1;
                }
            }
        }
        PaddedGrid { dims, stride_y: px, stride_z: px * py, data }
    }

    /// Trilinear value at padded index coordinates `q` (original index + 1).
    #[inline]
    fn sample(&self, q: Vec3) -> f64 {
        let mut idx = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            // truncation is floor for the nonnegative coordinates inside the clip
            let i = (q[a].max(0.0) as usize).min(self.dims[a]);
            idx[a] = i;
            frac[a] = (q[a] - i as f64).clamp(0.0, 1.0);
        }
        let base = idx[0] + self.stride_y * idx[1] + self.stride_z * idx[2];
        let d = &self.data;
        let (sy, sz) = (self.stride_y, self.stride_z);
        let c00 = d[base] + frac[0] * (d[base + 1] - d[base]);
        let c10 = d[base + sy] + frac[0] * (d[base + sy + 1] - d[base + sy]);
        let c01 = d[base + sz] + frac[0] * (d[base + sz + 1] - d[base + sz]);
        let c11 = d[base + sy + sz] + frac[0] * (d[base + sy + sz + 1] - d[base + sy + sz]);
        let c0 = c00 + frac[1] * (c10 - c00);
        let c1 = c01 + frac[1] * (c11 - c01);
        c0 + frac[2] * (c1 - c0)
    }
}

/// Affine map from world coordinates to padded index coordinates of a posed grid.
struct WorldToIndex {
    m: [[f64; 3]; 3],
    b: Vec3,
}

impl WorldToIndex {
    fn new(dims: [usize; 3], spacing: Vec3, origin: Vec3, pose: Pose) -> Self {
        let r = pose.rotation_matrix();
        let t = pose.translation();
        let center = [
            origin[0] + 0.5 * (dims[0] - 1) as f64 * spacing[0],
            origin[1] + 0.5 * (dims[1] - 1) as f64 * spacing[1],
            origin[2] + 0.5 * (dims[2] - 1) as f64 * spacing[2],
        ];
        // q = diag(1/s) (R^T (x - t) + c - o) + 1
        let mut m = [[0.0; 3]; 3];
        for a in 0..3 {
            for k in 0..3 {
                m[a][k] = r[k][a] / spacing[a];
            }
        }
        let mut b = [0.0; 3];
        for a in 0..3 {
            b[a] = -math::dot(m[a], t) + (center[a] - origin[a]) / spacing[a] + 1.0;
        }
        WorldToIndex { m, b }
    }

    fn point(&self, x: Vec3) -> Vec3 {
        math::add(crate::math::mat3_apply(&self.m, x), self.b)
    }

    fn direction(&self, d: Vec3) -> Vec3 {
        crate::math::mat3_apply(&self.m, d)
    }
}

struct RayCaster<'a> {
    grid: &'a PaddedGrid,
    map: WorldToIndex,
    k: Intrinsics,
}

impl RayCaster<'_> {
    fn integrate(&self, u: usize, v: usize) -> f64 {
        let src = self.k.source();
        let target = self.k.pixel_center(u, v);
        let delta = math::sub(target, src);
        let length = math::norm(delta);
        let dir = math::scale(delta, 1.0 / length);
        let q0 = self.map.point(src);
        let dq = self.map.direction(dir);
        let mut t_in = 0.0f64;
        let mut t_out = length;
        for a in 0..3 {
            let hi = (self.grid.dims[a] + 1) as f64;
            if math::abs(dq[a]) < 1e-15 {
                if q0[a] <= 0.0 || q0[a] >= hi {
                    return 0.0;
                }
                continue;
            }
            let ta = (0.0 - q0[a]) / dq[a];
            let tb = (hi - q0[a]) / dq[a];
            let (lo_t, hi_t) = if ta < tb { (ta, tb) } else { (tb, ta) };
            t_in = t_in.max(lo_t);
            t_out = t_out.min(hi_t);
        }
        let span = t_out - t_in;
        if !(span > 0.0) {
            return 0.0;
        }
        let n = math::ceil(span / self.k.step_mm).max(1.0);
        let dt = span / n;
        let n = n as usize;
        let mut q = math::add(q0, math::scale(dq, t_in + 0.5 * dt));
        let step = math::scale(dq, dt);
        let mut acc = 0.0;
        for _ in 0..n {
            acc += self.grid.sample(q);
            q = math::add(q, step);
        }
        acc * dt
    }
}

fn render(
    grid: &PaddedGrid,
    spacing: Vec3,
    origin: Vec3,
    pose: Pose,
    k: &Intrinsics,
    exec: &dyn RowExecutor,
) -> Image {
    let caster = RayCaster { grid, map: WorldToIndex::new(grid.dims, spacing, origin, pose), k: *k };
    let [w, h] = k.det_px;
    let mut data = vec![0.0; w * h];
    exec.for_each_row(&mut data, w, &|v, row| {
        for (u, px) in row.iter_mut().enumerate() {
            *px = caster.integrate(u, v);
        }
    });
    Image::new([w, h], data).expect("detector dims are validated")
}

/// DRR of `volume` posed by `pose`: per-pixel line integral along the
/// source-to-pixel ray.
pub fn project(volume: &Volume, pose: Pose, k: &Intrinsics) -> Image {
    project_with(volume, pose, k, &Serial)
}

pub fn project_with(volume: &Volume, pose: Pose, k: &Intrinsics, exec: &dyn RowExecutor) -> Image {
    let data = volume.data();
    let grid = PaddedGrid::new(volume.dims(), |i| data[i]);
    render(&grid, volume.spacing(), volume.origin(), pose, k, exec)
}

/// A volume prepared once for repeated projection (padding is reused).
pub struct PreparedVolume {
    grid: PaddedGrid,
    spacing: Vec3,
    origin: Vec3,
}

impl PreparedVolume {
    pub fn new(volume: &Volume) -> Self {
        let data = volume.data();
        PreparedVolume { grid: PaddedGrid::new(volume.dims(), |i| data[i]), spacing: volume.spacing(), origin: volume.origin() }
    }

    pub fn from_mask(mask: &VoxelMask) -> Self {
        let data = mask.data();
        PreparedVolume { grid: PaddedGrid::new(mask.dims(), |i| data[i] as f64), spacing: mask.spacing(), origin: mask.origin() }
    }

    pub fn project(&self, pose: Pose, k: &Intrinsics) -> Image {
        render(&self.grid, self.spacing, self.origin, pose, k, &Serial)
    }

    pub fn project_with(&self, pose: Pose, k: &Intrinsics, exec: &dyn RowExecutor) -> Image {
        render(&self.grid, self.spacing, self.origin, pose, k, exec)
    }

    /// Binarized projection: 1 where the integrated value exceeds `tau`.
    pub fn project_binary(&self, pose: Pose, k: &Intrinsics, tau: f64) -> MaskImage {
        binarize(&self.project(pose, k), tau)
    }
}

fn binarize(img: &Image, tau: f64) -> MaskImage {
    let data = img.data().iter().map(|v| u8::from(*v > tau)).collect();
    MaskImage::new(img.dims(), data).expect("binary data")
}

/// Projected mask `P(pose; M)`: a pixel is set iff the ray's integrated
/// mask value is strictly positive.
pub fn project_mask(mask: &VoxelMask, pose: Pose, k: &Intrinsics) -> MaskImage {
    project_mask_threshold(mask, pose, k, 0.0)
}

pub fn project_mask_threshold(mask: &VoxelMask, pose: Pose, k: &Intrinsics, tau: f64) -> MaskImage {
    PreparedVolume::from_mask(mask).project_binary(pose, k, tau)
}

/// Finite-difference steps for the rotation (deg) and translation (mm) parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FdStep {
    pub rot_deg: f64,
    pub trans_mm: f64,
}

impl Default for FdStep {
    fn default() -> Self {
        FdStep { rot_deg: 0.05, trans_mm: 0.05 }
    }
}

impl FdStep {
    pub fn for_param(&self, i: usize) -> f64 {
        if i < 3 {
            self.rot_deg
        } else {
            self.trans_mm
        }
    }
}

/// Central-difference gradient of a scalar functional of the pose:
/// `(f(theta + h e_i) - f(theta - h e_i)) / 2h` for each of the six parameters.
pub fn fd_pose_grad<E>(mut f: impl FnMut(Pose) -> core::result::Result<f64, E>, theta: Pose, h: FdStep) -> core::result::Result<GradVec, E> {
    let mut g = [0.0; 6];
    for (i, gi) in g.iter_mut().enumerate() {
        let hi = h.for_param(i);
        let plus = f(theta.perturbed(i, hi))?;
        let minus = f(theta.perturbed(i, -hi))?;
        *gi = (plus - minus) / (2.0 * hi);
    }
    Ok(GradVec::from_array(g))
}
