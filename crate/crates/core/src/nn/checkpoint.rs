//! Checkpoint encoding: a text manifest (config, layers, parameter shapes)
//! plus a little-endian f32 payload holding every parameter in order.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use super::layers::{LayerSpec, Layout};
use super::params::Params;
use crate::error::{Error, Result};

const MAGIC: &str = "xreg-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: String,
    pub payload: Vec<u8>,
}

/// Parsed manifest.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub config: Vec<(String, String)>,
    pub layers: Vec<(String, LayerSpec)>,
    pub params: Vec<(String, bool, Vec<usize>)>,
}

impl Manifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_parsed<T: core::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("missing or invalid config `{}`", key)))
    }
}

pub fn encode(config: &[(String, String)], layout: &Layout, params: &Params) -> Checkpoint {
    let mut m = String::new();
    let _ = writeln!(m, "{}", MAGIC);
    for (k, v) in config {
        let _ = writeln!(m, "config {} {}", k, v);
    }
    for (name, spec) in &layout.layers {
        let _ = writeln!(m, "layer {} {}", name, spec);
    }
    let mut payload = Vec::new();
    for id in params.ids() {
        let v = params.value(id);
        let shape: Vec<String> = v.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(m, "param {} {} {}", params.name(id), params.is_trainable(id) as u8, shape.join("x"));
        for x in v.data() {
            payload.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    Checkpoint { manifest: m, payload }
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MAGIC) {
        return Err(Error::Checkpoint("missing magic line".into()));
    }
    let mut out = Manifest::default();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (kind, rest) = line.split_once(' ').ok_or_else(|| Error::Checkpoint(format!("bad line `{}`", line)))?;
        let (name, rest) = rest.split_once(' ').ok_or_else(|| Error::Checkpoint(format!("bad line `{}`", line)))?;
        match kind {
            "config" => out.config.push((name.to_string(), rest.to_string())),
            "layer" => out.layers.push((name.to_string(), LayerSpec::parse(rest)?)),
            "param" => {
                let (flag, shape) = rest.split_once(' ').ok_or_else(|| Error::Checkpoint(format!("bad line `{}`", line)))?;
                let shape = shape
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<core::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Checkpoint(format!("bad shape in `{}`", line)))?;
                out.params.push((name.to_string(), flag == "1", shape));
            }
            _ => return Err(Error::Checkpoint(format!("unknown line kind `{}`", kind))),
        }
    }
    Ok(out)
}

/// Loads a checkpoint into a freshly built parameter set, which must have
/// the same names and shapes in the same order.
pub fn load_into(ck: &Checkpoint, params: &mut Params) -> Result<Manifest> {
    let m = parse_manifest(&ck.manifest)?;
    if m.params.len() != params.len() {
        return Err(Error::Checkpoint(format!("{} params in checkpoint, {} in model", m.params.len(), params.len())));
    }
    let total: usize = m.params.iter().map(|p| p.2.iter().product::<usize>()).sum();
    if ck.payload.len() != 4 * total {
        return Err(Error::Checkpoint(format!("payload has {} bytes, expected {}", ck.payload.len(), 4 * total)));
    }
    let ids: Vec<_> = params.ids().collect();
    let mut off = 0;
    for (id, (name, _, shape)) in ids.into_iter().zip(&m.params) {
        if params.name(id) != name || params.value(id).shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!("param `{}` {:?} does not match model `{}`", name, shape, params.name(id))));
        }
        for x in params.value_mut(id).data_mut() {
            let b = [ck.payload[off], ck.payload[off + 1], ck.payload[off + 2], ck.payload[off + 3]];
            *x = f32::from_le_bytes(b) as f64;
            off += 4;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{Conv, Linear, Norm, NormSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Params::new();
        let mut layout = Layout::default();
        Conv::new(&mut p, &mut layout, "c", 3, 2, 4, 3, 2, 1, true, &mut rng);
        Norm::new(&mut p, &mut layout, "n", 4, NormSpec::Batch);
        Norm::new(&mut p, &mut layout, "g", 4, NormSpec::Group(2));
        Linear::new(&mut p, &mut layout, "l", 7, 3, &mut rng);
        p.round_to_f32();
        let cfg = [("width".to_string(), "4".to_string())];
        let ck = encode(&cfg, &layout, &p);
        let mut q = p.clone();
        for id in q.ids().collect::<Vec<_>>() {
            q.value_mut(id).fill(0.0);
        }
        let m = load_into(&ck, &mut q).unwrap();
        assert_eq!(p, q);
        assert_eq!(m.layers, layout.layers);
        assert_eq!(m.get_parsed::<usize>("width").unwrap(), 4);
        assert_eq!(encode(&cfg, &layout, &q), ck);
    }

    #[test]
    fn rejects_mismatched_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Params::new();
        let mut layout = Layout::default();
        Linear::new(&mut p, &mut layout, "l", 7, 3, &mut rng);
        let ck = encode(&[], &layout, &p);
        let mut q = Params::new();
        Linear::new(&mut q, &mut Layout::default(), "l", 6, 3, &mut rng);
        assert!(matches!(load_into(&ck, &mut q), Err(Error::Checkpoint(_))));
        let short = Checkpoint { manifest: ck.manifest.clone(), payload: ck.payload[..8].to_vec() };
        assert!(matches!(load_into(&short, &mut p), Err(Error::Checkpoint(_))));
    }
}
