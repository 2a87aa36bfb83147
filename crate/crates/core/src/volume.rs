//! Volumes, voxel masks, and a procedural lumbar-like phantom.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math::{self, Vec3};

/// Regular scalar grid with physical spacing.
///
/// `origin` is the world position (mm) of the center of voxel (0, 0, 0);
/// data is stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: Vec3,
    origin: Vec3,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: Vec3, origin: Vec3, data: Vec<f64>) -> Result<Self> {
        check_grid(dims, spacing, origin)?;
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::ShapeMismatch(format!(
                "{} values for dims {:?}",
                data.len(),
                dims
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig("volume intensities must be finite and >= 0".into()));
        }
        Ok(Volume { dims, spacing, origin, data })
    }

    /// Volume of zeros centered on the world origin.
    pub fn zeros(dims: [usize; 3], spacing: Vec3) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Volume::new(dims, spacing, centered_origin(dims, spacing), vec![0.0; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }
    pub fn origin(&self) -> Vec3 {
        self.origin
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    /// World coordinate of the grid center (the rotation center of a pose).
    pub fn center(&self) -> Vec3 {
        grid_center(self.dims, self.spacing, self.origin)
    }

    /// World positions of the 8 outermost voxel centers.
    pub fn corners(&self) -> [Vec3; 8] {
        let mut out = [[0.0; 3]; 8];
        for (k, c) in out.iter_mut().enumerate() {
            for a in 0..3 {
                let far = (k >> a) & 1 == 1;
                let idx = if far { (self.dims[a] - 1) as f64 } else { 0.0 };
                c[a] = self.origin[a] + idx * self.spacing[a];
            }
        }
        out
    }

    /// Applies `f` to every intensity, clamping the result at zero.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume { data: self.data.iter().map(|v| f(*v).max(0.0)).collect(), ..self.clone() }
    }

    /// Voxelwise product with a mask (the segmented anatomy only).
    pub fn masked(&self, mask: &VoxelMask) -> Result<Volume> {
        self.check_same_grid(mask)?;
        let data = self.data.iter().zip(&mask.data).map(|(v, m)| if *m != 0 { *v } else { 0.0 }).collect();
        Ok(Volume { data, ..self.clone() })
    }

    pub fn check_same_grid(&self, mask: &VoxelMask) -> Result<()> {
        if mask.dims != self.dims || mask.spacing != self.spacing || mask.origin != self.origin {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }
}

/// Binary companion of a [`Volume`] on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMask {
    dims: [usize; 3],
    spacing: Vec3,
    origin: Vec3,
    data: Vec<u8>,
}

impl VoxelMask {
    pub fn new(dims: [usize; 3], spacing: Vec3, origin: Vec3, data: Vec<u8>) -> Result<Self> {
        check_grid(dims, spacing, origin)?;
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::ShapeMismatch(format!("{} mask values for dims {:?}", data.len(), dims)));
        }
        if data.iter().any(|v| *v > 1) {
            return Err(Error::InvalidConfig("mask values must be 0 or 1".into()));
        }
        Ok(VoxelMask { dims, spacing, origin, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }
    pub fn origin(&self) -> Vec3 {
        self.origin
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    /// The mask as a 0/1 intensity volume on the same grid.
    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            data: self.data.iter().map(|v| *v as f64).collect(),
        }
    }
}

fn check_grid(dims: [usize; 3], spacing: Vec3, origin: Vec3) -> Result<()> {
    if dims.iter().any(|d| *d == 0) {
        return Err(Error::InvalidConfig(format!("dims must be >= 1, got {dims:?}")));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) || origin.iter().any(|o| !o.is_finite()) {
        return Err(Error::InvalidConfig("spacing must be positive and finite".into()));
    }
    Ok(())
}

fn grid_center(dims: [usize; 3], spacing: Vec3, origin: Vec3) -> Vec3 {
    [
        origin[0] + 0.5 * (dims[0] - 1) as f64 * spacing[0],
        origin[1] + 0.5 * (dims[1] - 1) as f64 * spacing[1],
        origin[2] + 0.5 * (dims[2] - 1) as f64 * spacing[2],
    ]
}

/// Origin placing the grid center at the world origin.
pub fn centered_origin(dims: [usize; 3], spacing: Vec3) -> Vec3 {
    [
        -0.5 * (dims[0] - 1) as f64 * spacing[0],
        -0.5 * (dims[1] - 1) as f64 * spacing[1],
        -0.5 * (dims[2] - 1) as f64 * spacing[2],
    ]
}

/// Procedural spine phantom parameters.
///
/// Vertebrae are stacked along +y (the detector's vertical axis); each is a
/// y-aligned cylinder (the body) with a box (the posterior elements) behind
/// it along -z. A soft-tissue elliptic cylinder fills most of the grid.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub n_vertebrae: usize,
    pub body_radius_mm: f64,
    pub body_height_mm: f64,
    pub gap_mm: f64,
    pub process_size_mm: f64,
    pub bone_intensity: f64,
    pub tissue_intensity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    /// Three vertebrae on a 32^3 grid at 3 mm.
    fn default() -> Self {
        PhantomSpec {
            dims: [32, 32, 32],
            spacing_mm: 3.0,
            n_vertebrae: 3,
            body_radius_mm: 15.0,
            body_height_mm: 20.0,
            gap_mm: 8.0,
            process_size_mm: 14.0,
            bone_intensity: 1.0,
            tissue_intensity: 0.15,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        let geo = [self.body_radius_mm, self.body_height_mm, self.gap_mm, self.process_size_mm, self.spacing_mm];
        if self.n_vertebrae == 0 || geo.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::InvalidConfig("phantom geometry must be positive with >= 1 vertebra".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.bone_intensity > self.tissue_intensity) || self.tissue_intensity < 0.0 {
            return Err(Error::InvalidConfig("phantom intensities/noise out of range".into()));
        }
        check_grid(self.dims, [self.spacing_mm; 3], [0.0; 3])
    }
}

struct Vertebra {
    cx: f64,
    cy: f64,
    cz: f64,
    radius: f64,
    half_height: f64,
    intensity: f64,
}

/// Builds a deterministic phantom volume and its spine mask.
///
/// The mask is 1 exactly on vertebra voxels; noise is added afterwards and
/// intensities are clamped at zero.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume, VoxelMask)> {
    spec.validate()?;
    let sp = spec.spacing_mm;
    let ext: Vec3 = [
        spec.dims[0] as f64 * sp * 0.5,
        spec.dims[1] as f64 * sp * 0.5,
        spec.dims[2] as f64 * sp * 0.5,
    ];
    // body cylinder in front (+z), posterior box behind; centered as a unit
    let depth = 2.0 * spec.body_radius_mm + spec.process_size_mm;
    let stack = spec.n_vertebrae as f64 * spec.body_height_mm + (spec.n_vertebrae - 1) as f64 * spec.gap_mm;
    let margin = sp;
    if spec.body_radius_mm + margin > ext[0] || 0.5 * depth + margin > ext[2] || 0.5 * stack + margin > ext[1] {
        return Err(Error::GeometryOverflow(format!(
            "anatomy {:.1} x {:.1} x {:.1} mm exceeds grid {:.1} x {:.1} x {:.1} mm",
            2.0 * spec.body_radius_mm,
            stack,
            depth,
            2.0 * ext[0],
            2.0 * ext[1],
            2.0 * ext[2]
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let body_cz = 0.5 * depth - spec.body_radius_mm;
    let mut vertebrae = Vec::with_capacity(spec.n_vertebrae);
    for i in 0..spec.n_vertebrae {
        let cy = -0.5 * stack + spec.body_height_mm * (i as f64 + 0.5) + spec.gap_mm * i as f64;
        // small per-vertebra variation keeps seeds anatomically distinct
        let jitter = 0.25 * sp;
        vertebrae.push(Vertebra {
            cx: rng.random_range(-jitter..=jitter),
            cy,
            cz: body_cz,
            radius: spec.body_radius_mm * rng.random_range(0.9..=1.0),
            half_height: 0.5 * spec.body_height_mm,
            intensity: spec.bone_intensity * rng.random_range(0.9..=1.1),
        });
    }
    let half_box = 0.5 * spec.process_size_mm;
    let tissue_rx = 0.85 * ext[0];
    let tissue_rz = 0.85 * ext[2];

    let origin = centered_origin(spec.dims, [sp; 3]);
    let n = spec.dims[0] * spec.dims[1] * spec.dims[2];
    let mut data = vec![0.0f64; n];
    let mut mask = vec![0u8; n];
    let mut i = 0;
    for z in 0..spec.dims[2] {
        let pz = origin[2] + z as f64 * sp;
        for y in 0..spec.dims[1] {
            let py = origin[1] + y as f64 * sp;
            for x in 0..spec.dims[0] {
                let px = origin[0] + x as f64 * sp;
                let mut value = 0.0f64;
                if (px / tissue_rx) * (px / tissue_rx) + (pz / tissue_rz) * (pz / tissue_rz) <= 1.0 {
                    value = spec.tissue_intensity;
                }
                for v in &vertebrae {
                    let dy = math::abs(py - v.cy);
                    if dy > v.half_height {
                        continue;
                    }
                    let dx = px - v.cx;
                    let dz = pz - v.cz;
                    let in_body = dx * dx + dz * dz <= v.radius * v.radius;
                    let box_cz = v.cz - v.radius - half_box;
                    let in_process = math::abs(dx) <= half_box && math::abs(pz - box_cz) <= half_box && dy <= 0.7 * v.half_height;
                    if in_body || in_process {
                        value = v.intensity;
                        mask[i] = 1;
                    }
                }
                data[i] = value;
                i += 1;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|_| Error::InvalidConfig("noise sigma".into()))?;
        for v in data.iter_mut() {
            let n: f64 = normal.sample(&mut rng);
            *v = (*v + n).max(0.0);
        }
    }
    let volume = Volume::new(spec.dims, [sp; 3], origin, data)?;
    let mask = VoxelMask::new(spec.dims, [sp; 3], origin, mask)?;
    Ok((volume, mask))
}

/// Supplies the `index`-th phantom of a training or evaluation stream.
pub trait PhantomSource {
    fn phantom(&self, index: u64) -> Result<(Volume, VoxelMask)>;
}

impl PhantomSource for PhantomSpec {
    /// Same geometry, seed mixed with the index.
    fn phantom(&self, index: u64) -> Result<(Volume, VoxelMask)> {
        let seed = self.seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        make_phantom(&PhantomSpec { seed, ..self.clone() })
    }
}

/// Mask of voxels with intensity `>= tau`.
pub fn threshold_mask(volume: &Volume, tau: f64) -> VoxelMask {
    VoxelMask {
        dims: volume.dims,
        spacing: volume.spacing,
        origin: volume.origin,
        data: volume.data.iter().map(|v| u8::from(*v >= tau)).collect(),
    }
}

/// Block-mean pooling by an integer factor along every axis.
///
/// The output origin sits at the center of the first block so the grid keeps
/// its physical extent.
pub fn downsample_volume(volume: &Volume, factor: usize) -> Result<Volume> {
    let d = volume.dims;
    if factor == 0 || d.iter().any(|n| n % factor != 0) {
        return Err(Error::IndivisibleDims { dims: d, factor });
    }
    if factor == 1 {
        return Ok(volume.clone());
    }
    let od = [d[0] / factor, d[1] / factor, d[2] / factor];
    let norm = 1.0 / (factor * factor * factor) as f64;
    let mut out = vec![0.0f64; od[0] * od[1] * od[2]];
    for oz in 0..od[2] {
        for oy in 0..od[1] {
            for ox in 0..od[0] {
                let mut acc = 0.0f64;
                for z in oz * factor..(oz + 1) * factor {
                    for y in oy * factor..(oy + 1) * factor {
                        for x in ox * factor..(ox + 1) * factor {
                            acc += volume.get(x, y, z);
                        }
                    }
                }
                out[ox + od[0] * (oy + od[1] * oz)] = acc * norm;
            }
        }
    }
    let f = factor as f64;
    let spacing = [volume.spacing[0] * f, volume.spacing[1] * f, volume.spacing[2] * f];
    let origin = [
        volume.origin[0] + 0.5 * (f - 1.0) * volume.spacing[0],
        volume.origin[1] + 0.5 * (f - 1.0) * volume.spacing[1],
        volume.origin[2] + 0.5 * (f - 1.0) * volume.spacing[2],
    ];
    Volume::new(od, spacing, origin, out)
}
