//! Straightforward reference implementations used as test oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use xreg_core::volume::centered_origin;
use xreg_core::{Image, Intrinsics, Pose, Volume};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(dims: [usize; 2], r: &mut impl Rng) -> Image {
    Image::new(dims, (0..dims[0] * dims[1]).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Smooth blob plus noise, so gradients are not pure noise.
pub fn textured_image(dims: [usize; 2], r: &mut impl Rng) -> Image {
    let (cx, cy) = (r.random_range(0.3..0.7) * dims[0] as f64, r.random_range(0.3..0.7) * dims[1] as f64);
    let s = r.random_range(3.0..8.0);
    let data = (0..dims[0] * dims[1])
        .map(|i| {
            let (x, y) = ((i % dims[0]) as f64, (i / dims[0]) as f64);
            (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp() + 0.1 * r.random_range(-1.0..1.0)
        })
        .collect();
    Image::new(dims, data).unwrap()
}

pub fn random_volume(dims: [usize; 3], spacing: f64, r: &mut impl Rng) -> Volume {
    let n = dims[0] * dims[1] * dims[2];
    Volume::new(dims, [spacing; 3], centered_origin(dims, [spacing; 3]), (0..n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

pub fn random_pose(rot_sigma: f64, trans_sigma: f64, r: &mut impl Rng) -> Pose {
    let nr = Normal::new(0.0, rot_sigma).unwrap();
    let nt = Normal::new(0.0, trans_sigma).unwrap();
    Pose::new(nr.sample(r), nr.sample(r), nr.sample(r), nt.sample(r), nt.sample(r), nt.sample(r))
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

// ---- projector ----

fn rot(p: Pose) -> [[f64; 3]; 3] {
    let (a, b, c) = (p.rx.to_radians(), p.ry.to_radians(), p.rz.to_radians());
    let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
    let mul = |x: [[f64; 3]; 3], y: [[f64; 3]; 3]| {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    m[i][j] += x[i][k] * y[k][j];
                }
            }
        }
        m
    };
    mul(mul(rx, ry), rz)
}

/// Trilinear interpolant of `v` at fractional voxel index `q`, zero outside.
pub fn trilinear(v: &Volume, q: [f64; 3]) -> f64 {
    let d = v.dims();
    let f = [q[0].floor(), q[1].floor(), q[2].floor()];
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0i64; 3];
        for a in 0..3 {
            let hi = (corner >> a) & 1 == 1;
            idx[a] = f[a] as i64 + hi as i64;
            let t = q[a] - f[a];
            w *= if hi { t } else { 1.0 - t };
        }
        if w == 0.0 || (0..3).any(|a| idx[a] < 0 || idx[a] >= d[a] as i64) {
            continue;
        }
        acc += w * v.get(idx[0] as usize, idx[1] as usize, idx[2] as usize);
    }
    acc
}

/// Line integral of the posed volume along one source-to-pixel ray, midpoint
/// rule with step `ds`, restricted to the volume's bounding sphere.
pub fn reference_ray(v: &Volume, pose: Pose, k: &Intrinsics, u: usize, w: usize, ds: f64) -> f64 {
    let r = rot(pose);
    let t = pose.translation();
    let dims = v.dims();
    let sp = v.spacing();
    let src = [0.0, 0.0, -k.siso_mm];
    let [pw, ph] = k.det_px;
    let px = [
        (u as f64 + 0.5 - 0.5 * pw as f64) * k.px_spacing_mm,
        (w as f64 + 0.5 - 0.5 * ph as f64) * k.px_spacing_mm,
        k.sdd_mm - k.siso_mm,
    ];
    let d = [px[0] - src[0], px[1] - src[1], px[2] - src[2]];
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let dir = [d[0] / len, d[1] / len, d[2] / len];
    let radius = (0..3).map(|a| ((dims[a] + 1) as f64 * sp[a] * 0.5).powi(2)).sum::<f64>().sqrt();
    // sphere around the translated center
    let oc = [src[0] - t[0], src[1] - t[1], src[2] - t[2]];
    let b = oc[0] * dir[0] + oc[1] * dir[1] + oc[2] * dir[2];
    let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 {
        return 0.0;
    }
    let (s0, s1) = ((-b - disc.sqrt()).max(0.0), (-b + disc.sqrt()).min(len));
    if s1 <= s0 {
        return 0.0;
    }
    let n = ((s1 - s0) / ds).ceil() as usize;
    let h = (s1 - s0) / n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let s = s0 + (i as f64 + 0.5) * h;
        let x = [src[0] + s * dir[0] - t[0], src[1] + s * dir[1] - t[1], src[2] + s * dir[2] - t[2]];
        // local = R^T x
        let mut q = [0.0; 3];
        for a in 0..3 {
            let p = r[0][a] * x[0] + r[1][a] * x[1] + r[2][a] * x[2];
            q[a] = p / sp[a] + 0.5 * (dims[a] - 1) as f64;
        }
        acc += trilinear(v, q);
    }
    acc * h
}

pub fn reference_project(v: &Volume, pose: Pose, k: &Intrinsics, ds: f64) -> Image {
    let [w, h] = k.det_px;
    Image::from_fn([w, h], |x, y| reference_ray(v, pose, k, x, y, ds))
}

// ---- similarity metrics, naive double loops ----

fn mean_of(img: &[Vec<f64>]) -> f64 {
    let n: usize = img.iter().map(Vec::len).sum();
    img.iter().flatten().sum::<f64>() / n as f64
}

fn grid(img: &Image) -> Vec<Vec<f64>> {
    (0..img.height()).map(|y| (0..img.width()).map(|x| img.get(x, y)).collect()).collect()
}

fn corr(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (ma, mb) = (mean_of(a), mean_of(b));
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for y in 0..a.len() {
        for x in 0..a[y].len() {
            ab += (a[y][x] - ma) * (b[y][x] - mb);
            aa += (a[y][x] - ma).powi(2);
            bb += (b[y][x] - mb).powi(2);
        }
    }
    ab / (aa * bb).sqrt()
}

pub fn naive_ncc(a: &Image, b: &Image) -> f64 {
    corr(&grid(a), &grid(b))
}

pub fn naive_local_ncc(a: &Image, b: &Image, patch: usize) -> f64 {
    let (ga, gb) = (grid(a), grid(b));
    let (mut sum, mut n) = (0.0, 0);
    for py in (0..a.height()).step_by(patch) {
        for px in (0..a.width()).step_by(patch) {
            let cut = |g: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { (py..py + patch).map(|y| g[y][px..px + patch].to_vec()).collect() };
            let r = corr(&cut(&ga), &cut(&gb));
            if r.is_finite() {
                sum += r;
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn grads(img: &Image) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let g = grid(img);
    let (w, h) = (img.width(), img.height());
    let gx = (1..h - 1).map(|y| (1..w - 1).map(|x| (g[y][x + 1] - g[y][x - 1]) / 2.0).collect()).collect();
    let gy = (1..h - 1).map(|y| (1..w - 1).map(|x| (g[y + 1][x] - g[y - 1][x]) / 2.0).collect()).collect();
    (gx, gy)
}

pub fn naive_grad_corr(a: &Image, b: &Image) -> f64 {
    let ((ax, ay), (bx, by)) = (grads(a), grads(b));
    (corr(&ax, &bx) + corr(&ay, &by)) / 2.0
}

fn gi(ax: &[Vec<f64>], ay: &[Vec<f64>], bx: &[Vec<f64>], by: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for y in 0..ax.len() {
        for x in 0..ax[y].len() {
            let na = ax[y][x].hypot(ay[y][x]);
            let nb = bx[y][x].hypot(by[y][x]);
            if na > 0.0 && nb > 0.0 {
                let cos = (ax[y][x] * bx[y][x] + ay[y][x] * by[y][x]) / (na * nb);
                s += na.min(nb) * (cos + 1.0) / 2.0;
            }
        }
    }
    s
}

/// `b` is the reference image.
pub fn naive_ngi(a: &Image, b: &Image) -> f64 {
    let ((ax, ay), (bx, by)) = (grads(a), grads(b));
    gi(&ax, &ay, &bx, &by) / gi(&bx, &by, &bx, &by)
}

pub fn naive_grad_diff(fixed: &Image, moving: &Image) -> f64 {
    let ((fx, fy), (mx, my)) = (grads(fixed), grads(moving));
    let var = |g: &Vec<Vec<f64>>| {
        let m = mean_of(g);
        let n: usize = g.iter().map(Vec::len).sum();
        g.iter().flatten().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64
    };
    let (sx, sy) = (var(&fx), var(&fy));
    let mut s = 0.0;
    let mut p = 0.0;
    for y in 0..fx.len() {
        for x in 0..fx[y].len() {
            s += sx / (sx + (fx[y][x] - mx[y][x]).powi(2)) + sy / (sy + (fy[y][x] - my[y][x]).powi(2));
            p += 1.0;
        }
    }
    1.0 - s / (2.0 * p)
}
