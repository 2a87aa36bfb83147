//! Detector-plane images, binary mask images, and RGB fusion overlays.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Row-major `w x h` scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    dims: [usize; 2],
    data: Vec<f64>,
}

impl Image {
    pub fn new(dims: [usize; 2], data: Vec<f64>) -> Result<Self> {
        if dims[0] == 0 || dims[1] == 0 || data.len() != dims[0] * dims[1] {
            return Err(Error::ShapeMismatch(alloc::format!("{} values for image {:?}", data.len(), dims)));
        }
        Ok(Image { dims, data })
    }

    pub fn zeros(dims: [usize; 2]) -> Self {
        Image { dims, data: vec![0.0; dims[0] * dims[1]] }
    }

    pub fn from_fn(dims: [usize; 2], f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1]);
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                data.push(f(x, y));
            }
        }
        Image { dims, data }
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }
    pub fn width(&self) -> usize {
        self.dims[0]
    }
    pub fn height(&self) -> usize {
        self.dims[1]
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.dims[0] + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { dims: self.dims, data: self.data.iter().map(|v| f(*v)).collect() }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Zero-mean, unit-variance copy; constant images map to zeros.
    pub fn standardized(&self) -> Image {
        let m = self.mean();
        let var = self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64;
        let inv = if var > 0.0 { 1.0 / math::sqrt(var) } else { 0.0 };
        self.map(|v| (v - m) * inv)
    }

    /// Values linearly mapped so that min -> 0 and max -> 1; constant images map to 0.
    pub fn min_max_normalized(&self) -> Image {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        if !(span > 0.0) {
            return Image::zeros(self.dims);
        }
        self.map(|v| (v - lo) / span)
    }

    pub fn check_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(self.dims, other.dims));
        }
        Ok(())
    }
}

/// Row-major binary image.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    dims: [usize; 2],
    data: Vec<u8>,
}

impl MaskImage {
    pub fn new(dims: [usize; 2], data: Vec<u8>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] || data.iter().any(|v| *v > 1) {
            return Err(Error::ShapeMismatch(alloc::format!("invalid mask image for dims {:?}", dims)));
        }
        Ok(MaskImage { dims, data })
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    /// Downsamples to `target` dims; an output pixel is set if any pixel of
    /// its block is set.
    pub fn downsample_any(&self, target: [usize; 2]) -> Result<MaskImage> {
        if target == self.dims {
            return Ok(self.clone());
        }
        let [w, h] = self.dims;
        if target[0] == 0 || target[1] == 0 || w % target[0] != 0 || h % target[1] != 0 {
            return Err(Error::ShapeMismatch(alloc::format!("cannot pool {:?} to {:?}", self.dims, target)));
        }
        let (fx, fy) = (w / target[0], h / target[1]);
        let mut out = vec![0u8; target[0] * target[1]];
        for y in 0..h {
            for x in 0..w {
                if self.data[y * w + x] != 0 {
                    out[(y / fy) * target[0] + x / fx] = 1;
                }
            }
        }
        Ok(MaskImage { dims: target, data: out })
    }
}

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub dims: [usize; 2],
    pub data: Vec<[u8; 3]>,
}

fn to_u8(v: f64) -> u8 {
    math::round(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// Fusion overlay: the fixed image in red, the moving image in green and
/// blue, each min-max normalized. Identical inputs give a gray image.
pub fn overlay(fixed: &Image, moving: &Image) -> Result<RgbImage> {
    fixed.check_same_dims(moving)?;
    let f = fixed.min_max_normalized();
    let m = moving.min_max_normalized();
    let data = f.data().iter().zip(m.data()).map(|(a, b)| [to_u8(*a), to_u8(*b), to_u8(*b)]).collect();
    Ok(RgbImage { dims: fixed.dims(), data })
}
