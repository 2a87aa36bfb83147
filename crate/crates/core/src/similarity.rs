//! Image similarity metrics and the pose-parameter regression loss.
//!
//! Formulations (all gradients are central differences over interior pixels,
//! so a `w x h` image yields `(w - 2) x (h - 2)` gradient samples):
//!
//! - `ncc`: Pearson correlation of pixel values.
//! - `local_ncc`: mean Pearson correlation over a non-overlapping patch grid,
//!   skipping patches where either image is constant.
//! - `grad_corr`: `(ncc(dx a, dx b) + ncc(dy a, dy b)) / 2`.
//! - `ngi`: `GI(a, b) / GI(b, b)` with
//!   `GI(a, b) = sum min(|ga|, |gb|) (cos(angle) + 1) / 2`; pixels where
//!   either gradient vanishes contribute nothing.
//! - `grad_diff`: with `s2_d = var(d fixed)` for `d in {x, y}` and
//!   `G = sum_d sum_p s2_d / (s2_d + (d a - d b)^2)`, the loss is
//!   `(2P - G) / 2P` where `P` is the number of gradient samples. It is 0
//!   iff the gradients agree and approaches 1 as they diverge.
//! - `mse_params`: mean over the batch of the (unsquared) L2 norm of the
//!   6-parameter difference.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math;
use crate::pose::Pose;

/// Metric selector; names match the CLI strings `ncc|nccl|gc|ngi|gd|mse`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MetricKind {
    Ncc,
    LocalNcc { patch: usize },
    GradCorr,
    Ngi,
    GradDiff,
    Mse,
}

impl MetricKind {
    /// Default patch size of the local NCC variant.
    pub const DEFAULT_PATCH: usize = 8;

    pub fn parse(name: &str) -> Option<MetricKind> {
        Some(match name {
            "ncc" => MetricKind::Ncc,
            "nccl" => MetricKind::LocalNcc { patch: Self::DEFAULT_PATCH },
            "gc" => MetricKind::GradCorr,
            "ngi" => MetricKind::Ngi,
            "gd" => MetricKind::GradDiff,
            "mse" => MetricKind::Mse,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Ncc => "ncc",
            MetricKind::LocalNcc { .. } => "nccl",
            MetricKind::GradCorr => "gc",
            MetricKind::Ngi => "ngi",
            MetricKind::GradDiff => "gd",
            MetricKind::Mse => "mse",
        }
    }

    /// Whether larger values mean more similar.
    pub fn maximize(&self) -> bool {
        !matches!(self, MetricKind::GradDiff | MetricKind::Mse)
    }

    /// Raw metric value between a fixed and a moving image.
    pub fn score(&self, fixed: &Image, moving: &Image) -> Result<f64> {
        match *self {
            MetricKind::Ncc => ncc(fixed, moving),
            MetricKind::LocalNcc { patch } => local_ncc(fixed, moving, patch),
            MetricKind::GradCorr => grad_corr(fixed, moving),
            MetricKind::Ngi => ngi(moving, fixed),
            MetricKind::GradDiff => grad_diff(fixed, moving),
            MetricKind::Mse => image_mse(fixed, moving),
        }
    }

    /// Score oriented so that lower is better.
    pub fn loss(&self, fixed: &Image, moving: &Image) -> Result<f64> {
        let s = self.score(fixed, moving)?;
        Ok(if self.maximize() { -s } else { s })
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    // one square root keeps self-correlation at exactly 1
    Some((sab / math::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

/// Pearson correlation of two images, in [-1, 1].
pub fn ncc(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_dims(b)?;
    pearson(a.data(), b.data()).ok_or(Error::DegenerateInput("zero-variance image"))
}

/// Mean per-patch NCC over non-overlapping `patch x patch` tiles.
pub fn local_ncc(a: &Image, b: &Image, patch: usize) -> Result<f64> {
    a.check_same_dims(b)?;
    let [w, h] = a.dims();
    if patch < 2 || w % patch != 0 || h % patch != 0 {
        return Err(Error::InvalidConfig(alloc::format!("patch {patch} must be >= 2 and divide {w}x{h}")));
    }
    let mut pa = Vec::with_capacity(patch * patch);
    let mut pb = Vec::with_capacity(patch * patch);
    let (mut sum, mut count) = (0.0, 0usize);
    for py in (0..h).step_by(patch) {
        for px in (0..w).step_by(patch) {
            pa.clear();
            pb.clear();
            for y in py..py + patch {
                for x in px..px + patch {
                    pa.push(a.get(x, y));
                    pb.push(b.get(x, y));
                }
            }
            if let Some(r) = pearson(&pa, &pb) {
                sum += r;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::DegenerateInput("every patch has zero variance"));
    }
    Ok(sum / count as f64)
}

/// Central-difference gradients over interior pixels.
pub fn gradients(img: &Image) -> Result<(Vec<f64>, Vec<f64>)> {
    let [w, h] = img.dims();
    if w < 3 || h < 3 {
        return Err(Error::InvalidConfig("gradient metrics need images of at least 3x3".into()));
    }
    let n = (w - 2) * (h - 2);
    let (mut gx, mut gy) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            gx.push(0.5 * (img.get(x + 1, y) - img.get(x - 1, y)));
            gy.push(0.5 * (img.get(x, y + 1) - img.get(x, y - 1)));
        }
    }
    Ok((gx, gy))
}

/// Gradient correlation: mean of the NCCs of the x and y gradient images.
pub fn grad_corr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_dims(b)?;
    let (ax, ay) = gradients(a)?;
    let (bx, by) = gradients(b)?;
    let rx = pearson(&ax, &bx).ok_or(Error::DegenerateInput("zero-variance x gradient"))?;
    let ry = pearson(&ay, &by).ok_or(Error::DegenerateInput("zero-variance y gradient"))?;
    Ok(0.5 * (rx + ry))
}

fn gradient_information(ax: &[f64], ay: &[f64], bx: &[f64], by: &[f64]) -> f64 {
    let mut gi = 0.0;
    for i in 0..ax.len() {
        let na = math::sqrt(ax[i] * ax[i] + ay[i] * ay[i]);
        let nb = math::sqrt(bx[i] * bx[i] + by[i] * by[i]);
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        let cos = ((ax[i] * bx[i] + ay[i] * by[i]) / (na * nb)).clamp(-1.0, 1.0);
        gi += na.min(nb) * 0.5 * (cos + 1.0);
    }
    gi
}

/// Normalized gradient information `GI(a, b) / GI(b, b)`; `b` is the reference.
pub fn ngi(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_dims(b)?;
    let (ax, ay) = gradients(a)?;
    let (bx, by) = gradients(b)?;
    let norm = gradient_information(&bx, &by, &bx, &by);
    if !(norm > 0.0) {
        return Err(Error::DegenerateInput("reference image has no gradient"));
    }
    Ok(gradient_information(&ax, &ay, &bx, &by) / norm)
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

/// Gradient-difference loss in [0, 1]; `fixed` supplies the gradient variances.
pub fn grad_diff(fixed: &Image, moving: &Image) -> Result<f64> {
    fixed.check_same_dims(moving)?;
    let (fx, fy) = gradients(fixed)?;
    let (mx, my) = gradients(moving)?;
    let (sx, sy) = (variance(&fx), variance(&fy));
    if !(sx > 0.0 && sy > 0.0) {
        return Err(Error::DegenerateInput("fixed image gradient has zero variance"));
    }
    let mut g = 0.0;
    for i in 0..fx.len() {
        let dx = fx[i] - mx[i];
        let dy = fy[i] - my[i];
        g += sx / (sx + dx * dx) + sy / (sy + dy * dy);
    }
    let max = 2.0 * fx.len() as f64;
    Ok((max - g) / max)
}

/// Mean squared pixel difference.
pub fn image_mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_dims(b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `(1/N) sum_i ||target_i - pred_i||_2` over the six raw parameters.
///
/// With `squared`, the per-sample norm is squared instead.
pub fn mse_params(targets: &[Pose], preds: &[Pose], squared: bool) -> Result<f64> {
    if targets.is_empty() || targets.len() != preds.len() {
        return Err(Error::ShapeMismatch(alloc::format!("{} targets vs {} predictions", targets.len(), preds.len())));
    }
    let total: f64 = targets.iter().zip(preds).map(|(t, p)| param_distance(*t, *p, squared)).sum();
    Ok(total / targets.len() as f64)
}

pub(crate) fn param_distance(t: Pose, p: Pose, squared: bool) -> f64 {
    let s: f64 = t.to_array().iter().zip(p.to_array()).map(|(a, b)| (a - b) * (a - b)).sum();
    if squared {
        s
    } else {
        math::sqrt(s)
    }
}
