//! On-disk formats.
//!
//! Volumes and masks are a text header (`.vh`) next to a raw payload
//! (`.vraw`), x fastest. Images use `.ih` / `.iraw` the same way. Payloads are
//! `f32le` when every value survives the round trip through `f32` and `f64le`
//! otherwise, so save then load is always bit-exact. Masks use `u8`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use xreg_core::nn::checkpoint::Checkpoint;
use xreg_core::{Image, Pose, RgbImage, Volume, VoxelMask};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32le",
            Dtype::F64 => "f64le",
            Dtype::U8 => "u8",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }

    fn parse(s: &str) -> Option<Dtype> {
        match s {
            "f32le" => Some(Dtype::F32),
            "f64le" => Some(Dtype::F64),
            "u8" => Some(Dtype::U8),
            _ => None,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(format!("line {}: duplicate key `{}`", n + 1, k.trim()));
        }
    }
    Ok(out)
}

struct Header {
    path: PathBuf,
    kv: BTreeMap<String, String>,
}

impl Header {
    fn load(path: &Path) -> Result<Header> {
        let kv = parse_kv(&read_text(path)?).map_err(|msg| Error::MalformedHeader { path: path.into(), msg })?;
        Ok(Header { path: path.into(), kv })
    }

    fn bad(&self, msg: impl Into<String>) -> Error {
        Error::MalformedHeader { path: self.path.clone(), msg: msg.into() }
    }

    fn nums<T: std::str::FromStr, const N: usize>(&self, key: &str) -> Result<[T; N]> {
        let v = self.kv.get(key).ok_or_else(|| self.bad(format!("missing `{}`", key)))?;
        let parts: Vec<T> = v.split_whitespace().map(|s| s.parse().map_err(|_| self.bad(format!("bad `{}`", key)))).collect::<Result<_>>()?;
        parts.try_into().map_err(|_| self.bad(format!("`{}` needs {} values", key, N)))
    }

    fn dtype(&self) -> Result<Dtype> {
        let d = self.kv.get("dtype").ok_or_else(|| self.bad("missing `dtype`"))?;
        Dtype::parse(d).ok_or_else(|| self.bad(format!("unknown dtype `{}`", d)))
    }
}

fn lossless_f32(data: &[f64]) -> bool {
    data.iter().all(|v| (*v as f32) as f64 == *v || (v.is_nan() && (*v as f32).is_nan()))
}

fn encode_reals(data: &[f64]) -> (Dtype, Vec<u8>) {
    if lossless_f32(data) {
        (Dtype::F32, data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect())
    } else {
        (Dtype::F64, data.iter().flat_map(|v| v.to_le_bytes()).collect())
    }
}

fn decode(path: &Path, bytes: &[u8], dtype: Dtype, expected: usize) -> Result<Vec<f64>> {
    let size = dtype.size();
    if bytes.len() % size != 0 || bytes.len() / size != expected {
        return Err(Error::SizeMismatch { path: path.into(), expected, found: bytes.len() / size });
    }
    Ok(match dtype {
        Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Dtype::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        Dtype::U8 => bytes.iter().map(|b| *b as f64).collect(),
    })
}

/// Header and payload paths for a `.vh`/`.ih` path or a bare stem.
fn pair(path: &Path, header_ext: &str, payload_ext: &str) -> (PathBuf, PathBuf) {
    (path.with_extension(header_ext), path.with_extension(payload_ext))
}

fn fmt3(v: [f64; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

fn grid_header(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], dtype: Dtype) -> String {
    format!("dims={} {} {}\nspacing={}\norigin={}\ndtype={}\n", dims[0], dims[1], dims[2], fmt3(spacing), fmt3(origin), dtype.name())
}

fn load_grid(path: &Path) -> Result<(Header, [usize; 3], [f64; 3], [f64; 3], Vec<f64>, Dtype)> {
    let (hp, pp) = pair(path, "vh", "vraw");
    let h = Header::load(&hp)?;
    let dims: [usize; 3] = h.nums("dims")?;
    let spacing: [f64; 3] = h.nums("spacing")?;
    let origin: [f64; 3] = h.nums("origin")?;
    if dims.contains(&0) {
        return Err(h.bad("dims must be >= 1"));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(h.bad("spacing must be positive"));
    }
    if origin.iter().any(|o| !o.is_finite()) {
        return Err(h.bad("origin must be finite"));
    }
    let dtype = h.dtype()?;
    let n = dims.iter().product();
    let data = decode(&pp, &read(&pp)?, dtype, n)?;
    Ok((h, dims, spacing, origin, data, dtype))
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    let (hp, pp) = pair(path, "vh", "vraw");
    let (dtype, bytes) = encode_reals(volume.data());
    write(&pp, &bytes)?;
    write(&hp, grid_header(volume.dims(), volume.spacing(), volume.origin(), dtype).as_bytes())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (h, dims, spacing, origin, data, dtype) = load_grid(path)?;
    if dtype == Dtype::U8 {
        return Err(h.bad("volume payload must be f32le or f64le"));
    }
    Volume::new(dims, spacing, origin, data).map_err(|e| h.bad(e.to_string()))
}

pub fn save_mask(mask: &VoxelMask, path: &Path) -> Result<()> {
    let (hp, pp) = pair(path, "vh", "vraw");
    write(&pp, mask.data())?;
    write(&hp, grid_header(mask.dims(), mask.spacing(), mask.origin(), Dtype::U8).as_bytes())
}

pub fn load_mask(path: &Path) -> Result<VoxelMask> {
    let (h, dims, spacing, origin, data, _) = load_grid(path)?;
    let bytes = data.iter().map(|v| *v as u8).collect();
    VoxelMask::new(dims, spacing, origin, bytes).map_err(|e| h.bad(e.to_string()))
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let (hp, pp) = pair(path, "ih", "iraw");
    let (dtype, bytes) = encode_reals(img.data());
    write(&pp, &bytes)?;
    write(&hp, format!("dims={} {}\ndtype={}\n", img.width(), img.height(), dtype.name()).as_bytes())
}

pub fn load_image(path: &Path) -> Result<Image> {
    let (hp, pp) = pair(path, "ih", "iraw");
    let h = Header::load(&hp)?;
    let dims: [usize; 2] = h.nums("dims")?;
    let dtype = h.dtype()?;
    let data = decode(&pp, &read(&pp)?, dtype, dims[0] * dims[1])?;
    Image::new(dims, data).map_err(|e| h.bad(e.to_string()))
}

/// Min-max normalization to `0..=65535` (constant images map to 0).
pub fn pgm16_levels(img: &Image) -> Vec<u16> {
    let (lo, hi) = img.min_max();
    let span = hi - lo;
    img.data()
        .iter()
        .map(|v| if span > 0.0 { ((v - lo) / span * 65535.0).round() as u16 } else { 0 })
        .collect()
}

/// Binary 16-bit PGM (big-endian samples).
pub fn write_pgm16(img: &Image, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width(), img.height()).into_bytes();
    for v in pgm16_levels(img) {
        out.extend_from_slice(&v.to_be_bytes());
    }
    write(path, &out)
}

/// Reads a binary PGM (8 or 16 bit) as raw levels.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = read(path)?;
    let bad = |msg: &str| Error::Format { path: path.into(), msg: msg.into() };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    let wide = max > 255;
    let body = &bytes[pos.min(bytes.len())..];
    let n = w * h;
    let data: Vec<f64> = if wide {
        if body.len() != 2 * n {
            return Err(Error::SizeMismatch { path: path.into(), expected: n, found: body.len() / 2 });
        }
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64).collect()
    } else {
        if body.len() != n {
            return Err(Error::SizeMismatch { path: path.into(), expected: n, found: body.len() });
        }
        body.iter().map(|b| *b as f64).collect()
    };
    Ok(Image::new([w, h], data)?)
}

/// Binary 8-bit PPM.
pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.dims[0], img.dims[1]).into_bytes();
    for px in &img.data {
        out.extend_from_slice(px);
    }
    write(path, &out)
}

/// Manifest at `path`, f32 payload at `path` + `.bin`.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write(path, ck.manifest.as_bytes())?;
    write(&payload_path(path), &ck.payload)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint { manifest: read_text(path)?, payload: read(&payload_path(path))? })
}

fn payload_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".bin");
    PathBuf::from(p)
}

pub fn load_pose(path: &Path) -> Result<Pose> {
    let pose: Pose = serde_json::from_str(&read_text(path)?)?;
    if !pose.is_finite() {
        return Err(Error::Format { path: path.into(), msg: "pose must be finite".into() });
    }
    Ok(pose)
}

pub fn save_json<T: serde::Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, s.as_bytes())
}

/// `iter,loss` rows.
pub fn write_curve(curve: &[f64], path: &Path) -> Result<()> {
    let mut s = String::from("iter,loss\n");
    for (i, l) in curve.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i, l));
    }
    write(path, s.as_bytes())
}

/// `iter,rx,ry,rz,tx,ty,tz,LN` rows.
pub fn write_trajectory(points: &[xreg_core::finereg::TrajectoryPoint], path: &Path) -> Result<()> {
    let mut s = String::from("iter,rx,ry,rz,tx,ty,tz,LN\n");
    for p in points {
        let a = p.pose.to_array();
        s.push_str(&format!("{},{},{},{},{},{},{},{}\n", p.iter, a[0], a[1], a[2], a[3], a[4], a[5], p.loss));
    }
    write(path, s.as_bytes())
}

/// `iter,value` rows.
pub fn write_trace(trace: &[(usize, f64)], path: &Path) -> Result<()> {
    let mut s = String::from("iter,value\n");
    for (i, v) in trace {
        s.push_str(&format!("{},{}\n", i, v));
    }
    write(path, s.as_bytes())
}

pub fn write_text(text: &str, path: &Path) -> Result<()> {
    write(path, text.as_bytes())
}
