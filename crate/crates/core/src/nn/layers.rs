use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use super::params::{ParamId, Params};
use super::tape::{NodeId, NormKind, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Layer vocabulary, as written to checkpoint manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d { cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize },
    Conv3d { cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize },
    Linear { fin: usize, fout: usize },
    Relu,
    Norm { channels: usize, norm: NormSpec },
    /// Stride-2 3x3 conv.
    Downsample { cin: usize, cout: usize },
    UpsampleNearest { factor: usize },
    Concat,
    ResidualBlock { channels: usize },
    Flatten3dTo2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormSpec {
    Batch,
    Group(usize),
}

impl fmt::Display for NormSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormSpec::Batch => write!(f, "batch"),
            NormSpec::Group(g) => write!(f, "group:{}", g),
        }
    }
}

impl NormSpec {
    pub fn parse(s: &str) -> Option<NormSpec> {
        match s {
            "batch" => Some(NormSpec::Batch),
            _ => s.strip_prefix("group:")?.parse().ok().map(NormSpec::Group),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv2d { cin, cout, kernel, stride, pad } => {
                write!(f, "conv2d cin={} cout={} kernel={} stride={} pad={}", cin, cout, kernel, stride, pad)
            }
            LayerSpec::Conv3d { cin, cout, kernel, stride, pad } => {
                write!(f, "conv3d cin={} cout={} kernel={} stride={} pad={}", cin, cout, kernel, stride, pad)
            }
            LayerSpec::Linear { fin, fout } => write!(f, "linear fin={} fout={}", fin, fout),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Norm { channels, norm } => write!(f, "norm channels={} kind={}", channels, norm),
            LayerSpec::Downsample { cin, cout } => write!(f, "downsample cin={} cout={}", cin, cout),
            LayerSpec::UpsampleNearest { factor } => write!(f, "upsample factor={}", factor),
            LayerSpec::Concat => write!(f, "concat"),
            LayerSpec::ResidualBlock { channels } => write!(f, "residual channels={}", channels),
            LayerSpec::Flatten3dTo2d => write!(f, "flatten3d"),
        }
    }
}

impl LayerSpec {
    pub fn parse(line: &str) -> Result<LayerSpec> {
        let bad = || Error::Checkpoint(format!("bad layer spec `{}`", line));
        let mut words = line.split_whitespace();
        let kind = words.next().ok_or_else(bad)?;
        let mut kv = Vec::new();
        for w in words {
            let (k, v) = w.split_once('=').ok_or_else(bad)?;
            kv.push((k, v));
        }
        let get = |key: &str| -> Result<usize> {
            kv.iter().find(|(k, _)| *k == key).and_then(|(_, v)| v.parse().ok()).ok_or_else(bad)
        };
        Ok(match kind {
            "conv2d" => LayerSpec::Conv2d { cin: get("cin")?, cout: get("cout")?, kernel: get("kernel")?, stride: get("stride")?, pad: get("pad")? },
            "conv3d" => LayerSpec::Conv3d { cin: get("cin")?, cout: get("cout")?, kernel: get("kernel")?, stride: get("stride")?, pad: get("pad")? },
            "linear" => LayerSpec::Linear { fin: get("fin")?, fout: get("fout")? },
            "relu" => LayerSpec::Relu,
            "norm" => {
                let k = kv.iter().find(|(k, _)| *k == "kind").ok_or_else(bad)?.1;
                LayerSpec::Norm { channels: get("channels")?, norm: NormSpec::parse(k).ok_or_else(bad)? }
            }
            "downsample" => LayerSpec::Downsample { cin: get("cin")?, cout: get("cout")? },
            "upsample" => LayerSpec::UpsampleNearest { factor: get("factor")? },
            "concat" => LayerSpec::Concat,
            "residual" => LayerSpec::ResidualBlock { channels: get("channels")? },
            "flatten3d" => LayerSpec::Flatten3dTo2d,
            _ => return Err(bad()),
        })
    }
}

/// Forward-pass mode. Only batch normalization distinguishes the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named layer list of a network, in construction order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    pub layers: Vec<(String, LayerSpec)>,
}

impl Layout {
    pub fn push(&mut self, name: &str, spec: LayerSpec) {
        self.layers.push((name.to_string(), spec));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Conv {
    /// `dims` = 2 or 3 spatial axes; square/cubic kernel.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        layout: &mut Layout,
        name: &str,
        dims: usize,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Conv {
        let (shape, fan_in, spec) = if dims == 3 {
            (
                alloc::vec![cout, cin, kernel, kernel, kernel],
                cin * kernel * kernel * kernel,
                LayerSpec::Conv3d { cin, cout, kernel, stride, pad },
            )
        } else {
            (alloc::vec![cout, cin, kernel, kernel], cin * kernel * kernel, LayerSpec::Conv2d { cin, cout, kernel, stride, pad })
        };
        layout.push(name, spec);
        let w = params.add_he_uniform(format!("{}.w", name), &shape, fan_in, rng);
        let b = bias.then(|| params.add(format!("{}.b", name), Tensor::zeros(&[cout])));
        let (st, pd) = if dims == 3 { ([stride; 3], [pad; 3]) } else { ([1, stride, stride], [0, pad, pad]) };
        Conv { w, b, stride: st, pad: pd }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        tape.conv(x, self.w, self.b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, layout: &mut Layout, name: &str, fin: usize, fout: usize, rng: &mut R) -> Linear {
        layout.push(name, LayerSpec::Linear { fin, fout });
        let w = params.add_he_uniform(format!("{}.w", name), &[fout, fin], fin, rng);
        let b = params.add(format!("{}.b", name), Tensor::zeros(&[fout]));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        tape.linear(x, self.w, Some(self.b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    kind: NormVariant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum NormVariant {
    Batch { mean: ParamId, var: ParamId },
    Group(usize),
}

impl Norm {
    pub fn new(params: &mut Params, layout: &mut Layout, name: &str, channels: usize, norm: NormSpec) -> Norm {
        layout.push(name, LayerSpec::Norm { channels, norm });
        let gamma = params.add(format!("{}.gamma", name), Tensor::full(&[channels], 1.0));
        let beta = params.add(format!("{}.beta", name), Tensor::zeros(&[channels]));
        let kind = match norm {
            NormSpec::Batch => NormVariant::Batch {
                mean: params.add_buffer(format!("{}.running_mean", name), Tensor::zeros(&[channels])),
                var: params.add_buffer(format!("{}.running_var", name), Tensor::full(&[channels], 1.0)),
            },
            NormSpec::Group(g) => NormVariant::Group(g),
        };
        Norm { gamma, beta, kind }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId, mode: Mode) -> Result<NodeId> {
        let kind = match self.kind {
            NormVariant::Batch { mean, var } => NormKind::Batch { running_mean: mean, running_var: var, train: mode == Mode::Train },
            NormVariant::Group(groups) => NormKind::Group { groups },
        };
        tape.norm(x, self.gamma, self.beta, kind)
    }
}

/// Blends batch statistics recorded on a training tape into the running
/// buffers: `r = (1 - m) r + m s`.
pub fn update_running_stats(params: &mut Params, tape_stats: &[(ParamId, ParamId, Vec<f64>, Vec<f64>)], momentum: f64) {
    for (rm, rv, mean, var) in tape_stats {
        for (r, s) in params.value_mut(*rm).data_mut().iter_mut().zip(mean) {
            *r = (1.0 - momentum) * *r + momentum * s;
        }
        for (r, s) in params.value_mut(*rv).data_mut().iter_mut().zip(var) {
            *r = (1.0 - momentum) * *r + momentum * s;
        }
    }
}

/// conv -> norm -> relu.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        layout: &mut Layout,
        name: &str,
        dims: usize,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        norm: NormSpec,
        rng: &mut R,
    ) -> ConvBlock {
        let conv = Conv::new(params, layout, &format!("{}.conv", name), dims, cin, cout, kernel, stride, kernel / 2, false, rng);
        let norm = Norm::new(params, layout, &format!("{}.norm", name), cout, norm);
        layout.push(&format!("{}.relu", name), LayerSpec::Relu);
        ConvBlock { conv, norm }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId, mode: Mode) -> Result<NodeId> {
        let y = self.conv.forward(tape, x)?;
        let y = self.norm.forward(tape, y, mode)?;
        tape.relu(y)
    }
}

/// `relu(x + norm(conv(relu(norm(conv(x))))))` with 3x3 convs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualBlock {
    pub first: ConvBlock,
    pub conv: Conv,
    pub norm: Norm,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, layout: &mut Layout, name: &str, channels: usize, norm: NormSpec, rng: &mut R) -> ResidualBlock {
        layout.push(name, LayerSpec::ResidualBlock { channels });
        let first = ConvBlock::new(params, layout, &format!("{}.a", name), 2, channels, channels, 3, 1, norm, rng);
        let conv = Conv::new(params, layout, &format!("{}.b.conv", name), 2, channels, channels, 3, 1, 1, false, rng);
        let norm = Norm::new(params, layout, &format!("{}.b.norm", name), channels, norm);
        ResidualBlock { first, conv, norm }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId, mode: Mode) -> Result<NodeId> {
        let y = self.first.forward(tape, x, mode)?;
        let y = self.conv.forward(tape, y)?;
        let y = self.norm.forward(tape, y, mode)?;
        let y = tape.add(x, y)?;
        tape.relu(y)
    }
}
