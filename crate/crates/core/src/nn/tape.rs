use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{GradStore, ParamId, Params};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind {
    /// Per-channel statistics over batch and space. `train = false` uses the
    /// running buffers instead of the batch.
    Batch { running_mean: ParamId, running_var: ParamId, train: bool },
    /// Per-sample statistics over groups of channels and space.
    Group { groups: usize },
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    b: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv { x: NodeId, w: ParamId, bias: Option<ParamId>, geom: ConvGeom },
    Linear { x: NodeId, w: ParamId, bias: Option<ParamId> },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat(Vec<NodeId>),
    Norm { x: NodeId, gamma: ParamId, beta: ParamId, kind: NormKind, xhat: Vec<f64>, inv_std: Vec<f64> },
    Upsample { x: NodeId, factor: [usize; 3] },
    Reshape(NodeId),
    RepeatBatch(NodeId, usize),
    MaskedAbsMean { a: NodeId, b: NodeId, mask: Vec<f64>, squared: bool },
    Sum(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Records a forward computation so gradients can be pulled back through it.
/// Parameters are borrowed, never copied onto the tape.
pub struct Tape<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
    batch_stats: Vec<(ParamId, ParamId, Vec<f64>, Vec<f64>)>,
}

fn shape_err(msg: alloc::string::String) -> Error {
    Error::ShapeMismatch(msg)
}

/// `(batch, channels, spatial volume)` of a tensor with at least two axes.
fn bcs(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(format!("need (batch, channel, ...) axes, got {:?}", shape)));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Spatial dims padded to three axes (depth first).
fn spatial3(shape: &[usize]) -> [usize; 3] {
    match shape.len() {
        2 => [1, 1, 1],
        3 => [1, 1, shape[2]],
        4 => [1, shape[2], shape[3]],
        _ => [shape[2], shape[3], shape[4]],
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Params) -> Self {
        Tape { params, nodes: Vec::new(), batch_stats: Vec::new() }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFiniteFault { iteration: self.nodes.len() });
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor) -> Result<NodeId> {
        self.push(Op::Input, t)
    }

    /// Batch statistics computed by training-mode batch norms, as
    /// `(running_mean, running_var, mean, var)`.
    pub fn batch_stats(&self) -> &[(ParamId, ParamId, Vec<f64>, Vec<f64>)] {
        &self.batch_stats
    }

    /// Cross-correlation over the trailing two (weight rank 4) or three
    /// (weight rank 5) axes. Weight shape is `(cout, cin, k...)`.
    pub fn conv(&mut self, x: NodeId, w: ParamId, bias: Option<ParamId>, stride: [usize; 3], pad: [usize; 3]) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.params.value(w).shape().to_vec();
        if (xs.len() != 4 && xs.len() != 5) || ws.len() != xs.len() || ws[1] != xs[1] {
            return Err(shape_err(format!("conv input {:?} vs weight {:?}", xs, ws)));
        }
        if stride.contains(&0) {
            return Err(shape_err("conv stride must be positive".into()));
        }
        let input = spatial3(&xs);
        let kernel = spatial3(&ws);
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad[a];
            if padded < kernel[a] {
                return Err(shape_err(format!("kernel {:?} larger than padded input {:?}", kernel, input)));
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        let geom = ConvGeom { b: xs[0], cin: xs[1], cout: ws[0], input, output, kernel, stride, pad };
        if let Some(b) = bias {
            if self.params.value(b).len() != geom.cout {
                return Err(shape_err("conv bias length differs from output channels".into()));
            }
        }
        let out = conv_forward(&geom, self.value(x).data(), self.params.value(w).data(), bias.map(|b| self.params.value(b).data()));
        let mut shape = vec![geom.b, geom.cout];
        if xs.len() == 5 {
            shape.push(output[0]);
        }
        shape.extend_from_slice(&output[1..]);
        let value = Tensor::new(&shape, out)?;
        self.push(Op::Conv { x, w, bias, geom }, value)
    }

    /// `y = x W^T + b` with `x: (batch, in)` and `W: (out, in)`.
    pub fn linear(&mut self, x: NodeId, w: ParamId, bias: Option<ParamId>) -> Result<NodeId> {
        let xs = self.value(x).shape();
        let ws = self.params.value(w).shape();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(shape_err(format!("linear input {:?} vs weight {:?}", xs, ws)));
        }
        let (b, fin, fout) = (xs[0], xs[1], ws[0]);
        let xd = self.value(x).data();
        let wd = self.params.value(w).data();
        let mut out = vec![0.0; b * fout];
        for n in 0..b {
            let xr = &xd[n * fin..(n + 1) * fin];
            for o in 0..fout {
                let wr = &wd[o * fin..(o + 1) * fin];
                let mut acc = match bias {
                    Some(bi) => self.params.value(bi).data()[o],
                    None => 0.0,
                };
                for (a, c) in xr.iter().zip(wr) {
                    acc += a * c;
                }
                out[n * fout + o] = acc;
            }
        }
        let value = Tensor::new(&[b, fout], out)?;
        self.push(Op::Linear { x, w, bias }, value)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let value = Tensor::new(v.shape(), data)?;
        self.push(Op::Relu(x), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!("add {:?} + {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(Op::Add(a, b), value)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let mut value = self.value(x).clone();
        value.scale(s);
        self.push(Op::Scale(x, s), value)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = self.value(*xs.first().ok_or_else(|| shape_err("concat of nothing".into()))?).shape().to_vec();
        let (b, _, s) = bcs(&first)?;
        let mut channels = 0;
        for &x in xs {
            let sh = self.value(x).shape();
            if sh.len() != first.len() || sh[0] != first[0] || sh[2..] != first[2..] {
                return Err(shape_err(format!("concat {:?} with {:?}", first, sh)));
            }
            channels += sh[1];
        }
        let mut out = Vec::with_capacity(b * channels * s);
        for n in 0..b {
            for &x in xs {
                let v = self.value(x);
                let cs = v.shape()[1] * s;
                out.extend_from_slice(&v.data()[n * cs..(n + 1) * cs]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let value = Tensor::new(&shape, out)?;
        self.push(Op::Concat(xs.to_vec()), value)
    }

    /// Normalization followed by a per-channel affine map.
    pub fn norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId, kind: NormKind) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let (b, c, s) = bcs(&shape)?;
        if self.params.value(gamma).len() != c || self.params.value(beta).len() != c {
            return Err(shape_err(format!("norm affine params do not match {} channels", c)));
        }
        let xd = self.value(x).data();
        let mut xhat = vec![0.0; xd.len()];
        let inv_std: Vec<f64>;
        let mut pending = None;
        match kind {
            NormKind::Group { groups } => {
                if groups == 0 || c % groups != 0 {
                    return Err(shape_err(format!("{} channels not divisible into {} groups", c, groups)));
                }
                let gsize = c / groups * s;
                let mut inv = Vec::with_capacity(b * groups);
                for (chunk, out) in xd.chunks(gsize).zip(xhat.chunks_mut(gsize)) {
                    let mean = chunk.iter().sum::<f64>() / gsize as f64;
                    let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
                    let is = 1.0 / math::sqrt(var + NORM_EPS);
                    for (o, v) in out.iter_mut().zip(chunk) {
                        *o = (v - mean) * is;
                    }
                    inv.push(is);
                }
                inv_std = inv;
            }
            NormKind::Batch { running_mean, running_var, train } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                if train {
                    let cnt = (b * s) as f64;
                    for n in 0..b {
                        for ch in 0..c {
                            mean[ch] += xd[(n * c + ch) * s..(n * c + ch + 1) * s].iter().sum::<f64>();
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= cnt);
                    for n in 0..b {
                        for ch in 0..c {
                            let m = mean[ch];
                            var[ch] += xd[(n * c + ch) * s..(n * c + ch + 1) * s].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= cnt);
                    pending = Some((running_mean, running_var, mean.clone(), var.clone()));
                } else {
                    mean.copy_from_slice(self.params.value(running_mean).data());
                    var.copy_from_slice(self.params.value(running_var).data());
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + NORM_EPS)).collect();
                for n in 0..b {
                    for ch in 0..c {
                        let r = (n * c + ch) * s..(n * c + ch + 1) * s;
                        for (o, v) in xhat[r.clone()].iter_mut().zip(&xd[r]) {
                            *o = (v - mean[ch]) * inv[ch];
                        }
                    }
                }
                inv_std = inv;
            }
        }
        self.batch_stats.extend(pending);
        let g = self.params.value(gamma).data();
        let be = self.params.value(beta).data();
        let mut out = xhat.clone();
        for n in 0..b {
            for ch in 0..c {
                for o in &mut out[(n * c + ch) * s..(n * c + ch + 1) * s] {
                    *o = g[ch] * *o + be[ch];
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push(Op::Norm { x, gamma, beta, kind, xhat, inv_std }, value)
    }

    /// Nearest-neighbour upsampling by an integer factor per spatial axis
    /// (depth, height, width; depth is ignored for 4-axis tensors).
    pub fn upsample(&mut self, x: NodeId, factor: [usize; 3]) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 && shape.len() != 5 || factor.contains(&0) {
            return Err(shape_err(format!("upsample of {:?} by {:?}", shape, factor)));
        }
        let f = if shape.len() == 4 { [1, factor[1], factor[2]] } else { factor };
        let [d, h, w] = spatial3(&shape);
        let (od, oh, ow) = (d * f[0], h * f[1], w * f[2]);
        let planes = shape[0] * shape[1];
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(planes * od * oh * ow);
        for p in 0..planes {
            let base = p * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    let row = base + ((z / f[0]) * h + y / f[1]) * w;
                    out.extend((0..ow).map(|xx| xd[row + xx / f[2]]));
                }
            }
        }
        let mut oshape = vec![shape[0], shape[1]];
        if shape.len() == 5 {
            oshape.push(od);
        }
        oshape.extend_from_slice(&[oh, ow]);
        let value = Tensor::new(&oshape, out)?;
        self.push(Op::Upsample { x, factor: f }, value)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push(Op::Reshape(x), value)
    }

    /// `(b, c, d, h, w) -> (b, c * d, h, w)`.
    pub fn flatten_3d_to_2d(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).clone().flatten_3d_to_2d()?;
        self.push(Op::Reshape(x), value)
    }

    /// Tiles a batch-1 tensor `n` times along the batch axis.
    pub fn repeat_batch(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let v = self.value(x);
        if v.shape()[0] != 1 || n == 0 {
            return Err(shape_err(format!("repeat_batch needs batch 1, got {:?}", v.shape())));
        }
        let mut shape = v.shape().to_vec();
        shape[0] = n;
        let data = v.data().iter().copied().cycle().take(n * v.len()).collect();
        let value = Tensor::new(&shape, data)?;
        self.push(Op::RepeatBatch(x, n), value)
    }

    /// `sum(m * |a - b|) / sum(m)` (or with squared differences).
    pub fn masked_abs_mean(&mut self, a: NodeId, b: NodeId, mask: &[f64], squared: bool) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || mask.len() != va.len() {
            return Err(shape_err(format!("masked mean over {:?}, {:?} and {} mask values", va.shape(), vb.shape(), mask.len())));
        }
        let total: f64 = mask.iter().sum();
        if total <= 0.0 {
            return Err(Error::EmptyMask);
        }
        let mut acc = 0.0;
        for ((x, y), m) in va.data().iter().zip(vb.data()).zip(mask) {
            let d = x - y;
            acc += m * if squared { d * d } else { math::abs(d) };
        }
        self.push(Op::MaskedAbsMean { a, b, mask: mask.to_vec(), squared }, Tensor::scalar(acc / total))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Pulls the seed gradients back through the tape. Parameter gradients
    /// are added into `grads`; the returned vector holds the gradient of
    /// every node (None where nothing flowed).
    pub fn backward(&self, seeds: &[(NodeId, &Tensor)], grads: &mut GradStore) -> Result<Vec<Option<Tensor>>> {
        let mut g: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, t) in seeds {
            if t.shape() != self.value(*id).shape() {
                return Err(shape_err(format!("seed {:?} for node of shape {:?}", t.shape(), self.value(*id).shape())));
            }
            accumulate(&mut g[id.0], (*t).clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = g[i].clone() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Conv { x, w, bias, geom } => {
                    let xd = self.value(*x).data();
                    let wd = self.params.value(*w).data();
                    let mut gx = vec![0.0; xd.len()];
                    let mut gw = vec![0.0; wd.len()];
                    conv_backward(geom, xd, wd, gy.data(), &mut gx, &mut gw);
                    add_param_grad(grads, *w, &gw);
                    if let Some(b) = bias {
                        let mut gb = vec![0.0; geom.cout];
                        let osz: usize = geom.output.iter().product();
                        for n in 0..geom.b {
                            for (co, gbv) in gb.iter_mut().enumerate() {
                                *gbv += gy.data()[(n * geom.cout + co) * osz..(n * geom.cout + co + 1) * osz].iter().sum::<f64>();
                            }
                        }
                        add_param_grad(grads, *b, &gb);
                    }
                    accumulate(&mut g[x.0], Tensor::new(self.value(*x).shape(), gx)?);
                }
                Op::Linear { x, w, bias } => {
                    let xv = self.value(*x);
                    let (b, fin) = (xv.shape()[0], xv.shape()[1]);
                    let wd = self.params.value(*w).data();
                    let fout = wd.len() / fin;
                    let gyd = gy.data();
                    let mut gx = vec![0.0; b * fin];
                    let mut gw = vec![0.0; wd.len()];
                    for n in 0..b {
                        let xr = &xv.data()[n * fin..(n + 1) * fin];
                        for o in 0..fout {
                            let go = gyd[n * fout + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &wd[o * fin..(o + 1) * fin];
                            for k in 0..fin {
                                gx[n * fin + k] += go * wr[k];
                                gw[o * fin + k] += go * xr[k];
                            }
                        }
                    }
                    add_param_grad(grads, *w, &gw);
                    if let Some(bi) = bias {
                        let mut gb = vec![0.0; fout];
                        for n in 0..b {
                            for o in 0..fout {
                                gb[o] += gyd[n * fout + o];
                            }
                        }
                        add_param_grad(grads, *bi, &gb);
                    }
                    accumulate(&mut g[x.0], Tensor::new(xv.shape(), gx)?);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = gy.data().iter().zip(xv.data()).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect();
                    accumulate(&mut g[x.0], Tensor::new(xv.shape(), data)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g[a.0], gy.clone());
                    accumulate(&mut g[b.0], gy);
                }
                Op::Scale(x, s) => {
                    let mut t = gy;
                    t.scale(*s);
                    accumulate(&mut g[x.0], t);
                }
                Op::Concat(xs) => {
                    let shape = gy.shape().to_vec();
                    let (b, c, s) = bcs(&shape)?;
                    let mut off = 0;
                    for x in xs {
                        let xs_shape = self.value(*x).shape();
                        let cx = xs_shape[1];
                        let mut part = Vec::with_capacity(b * cx * s);
                        for n in 0..b {
                            let start = (n * c + off) * s;
                            part.extend_from_slice(&gy.data()[start..start + cx * s]);
                        }
                        accumulate(&mut g[x.0], Tensor::new(xs_shape, part)?);
                        off += cx;
                    }
                }
                Op::Norm { x, gamma, beta, kind, xhat, inv_std } => {
                    let shape = gy.shape().to_vec();
                    let (b, c, s) = bcs(&shape)?;
                    let gam = self.params.value(*gamma).data();
                    let gyd = gy.data();
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    // gradient w.r.t. the normalized value
                    let mut gxh = vec![0.0; gyd.len()];
                    for n in 0..b {
                        for ch in 0..c {
                            for j in (n * c + ch) * s..(n * c + ch + 1) * s {
                                gg[ch] += gyd[j] * xhat[j];
                                gb[ch] += gyd[j];
                                gxh[j] = gyd[j] * gam[ch];
                            }
                        }
                    }
                    add_param_grad(grads, *gamma, &gg);
                    add_param_grad(grads, *beta, &gb);
                    let mut gx = vec![0.0; gyd.len()];
                    match kind {
                        NormKind::Group { groups } => {
                            let gsize = c / groups * s;
                            for (k, is) in inv_std.iter().enumerate() {
                                let r = k * gsize..(k + 1) * gsize;
                                norm_backward(&gxh[r.clone()], &xhat[r.clone()], *is, &mut gx[r]);
                            }
                        }
                        NormKind::Batch { train: true, .. } => {
                            let cnt = (b * s) as f64;
                            for ch in 0..c {
                                let (mut m1, mut m2) = (0.0, 0.0);
                                for n in 0..b {
                                    for j in (n * c + ch) * s..(n * c + ch + 1) * s {
                                        m1 += gxh[j];
                                        m2 += gxh[j] * xhat[j];
                                    }
                                }
                                m1 /= cnt;
                                m2 /= cnt;
                                for n in 0..b {
                                    for j in (n * c + ch) * s..(n * c + ch + 1) * s {
                                        gx[j] = inv_std[ch] * (gxh[j] - m1 - xhat[j] * m2);
                                    }
                                }
                            }
                        }
                        NormKind::Batch { train: false, .. } => {
                            for n in 0..b {
                                for ch in 0..c {
                                    for j in (n * c + ch) * s..(n * c + ch + 1) * s {
                                        gx[j] = gxh[j] * inv_std[ch];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut g[x.0], Tensor::new(&shape, gx)?);
                }
                Op::Upsample { x, factor: f } => {
                    let xs = self.value(*x).shape();
                    let [d, h, w] = spatial3(xs);
                    let (od, oh, ow) = (d * f[0], h * f[1], w * f[2]);
                    let planes = xs[0] * xs[1];
                    let gyd = gy.data();
                    let mut gx = vec![0.0; planes * d * h * w];
                    for p in 0..planes {
                        let base = p * d * h * w;
                        let obase = p * od * oh * ow;
                        for z in 0..od {
                            for y in 0..oh {
                                let row = base + ((z / f[0]) * h + y / f[1]) * w;
                                let orow = obase + (z * oh + y) * ow;
                                for xx in 0..ow {
                                    gx[row + xx / f[2]] += gyd[orow + xx];
                                }
                            }
                        }
                    }
                    accumulate(&mut g[x.0], Tensor::new(xs, gx)?);
                }
                Op::Reshape(x) => {
                    let t = gy.reshaped(self.value(*x).shape())?;
                    accumulate(&mut g[x.0], t);
                }
                Op::RepeatBatch(x, n) => {
                    let xs = self.value(*x).shape();
                    let len = gy.len() / n;
                    let mut acc = vec![0.0; len];
                    for chunk in gy.data().chunks(len) {
                        for (a, b) in acc.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    accumulate(&mut g[x.0], Tensor::new(xs, acc)?);
                }
                Op::MaskedAbsMean { a, b, mask, squared } => {
                    let s = gy.data()[0] / mask.iter().sum::<f64>();
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .zip(mask)
                        .map(|((x, y), m)| {
                            let d = x - y;
                            let dd = if *squared {
                                2.0 * d
                            } else if d > 0.0 {
                                1.0
                            } else if d < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            s * m * dd
                        })
                        .collect();
                    let mut gb = Tensor::new(vb.shape(), ga.clone())?;
                    gb.scale(-1.0);
                    accumulate(&mut g[a.0], Tensor::new(va.shape(), ga)?);
                    accumulate(&mut g[b.0], gb);
                }
                Op::Sum(x) => {
                    accumulate(&mut g[x.0], Tensor::full(self.value(*x).shape(), gy.data()[0]));
                }
            }
        }
        Ok(g)
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(s) => s.add_assign(&t),
        None => *slot = Some(t),
    }
}

fn add_param_grad(grads: &mut GradStore, id: ParamId, g: &[f64]) {
    for (a, b) in grads.get_mut(id).data_mut().iter_mut().zip(g) {
        *a += b;
    }
}

/// Backward of `xhat = (x - mean) * inv_std` over one statistics group.
fn norm_backward(gxh: &[f64], xhat: &[f64], inv_std: f64, gx: &mut [f64]) {
    let n = gxh.len() as f64;
    let m1 = gxh.iter().sum::<f64>() / n;
    let m2 = gxh.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
    for ((o, gv), xh) in gx.iter_mut().zip(gxh).zip(xhat) {
        *o = inv_std * (gv - m1 - xh * m2);
    }
}

/// Range of output indices `o` along one axis whose source `o*s - p + k`
/// lands inside `[0, n)`.
fn valid_range(n: usize, out: usize, s: usize, p: usize, k: usize) -> (usize, usize) {
    // o*s + k >= p  and  o*s + k - p < n
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = if n + p > k { ((n + p - k - 1) / s + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let [d, h, wi] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let isz = d * h * wi;
    let osz = od * oh * ow;
    let ksz = kd * kh * kw;
    let mut out = vec![0.0; g.b * g.cout * osz];
    for n in 0..g.b {
        for co in 0..g.cout {
            let o = &mut out[(n * g.cout + co) * osz..(n * g.cout + co + 1) * osz];
            if let Some(b) = bias {
                o.fill(b[co]);
            }
            for ci in 0..g.cin {
                let xi = &x[(n * g.cin + ci) * isz..(n * g.cin + ci + 1) * isz];
                let wk = &w[(co * g.cin + ci) * ksz..(co * g.cin + ci + 1) * ksz];
                for a in 0..kd {
                    let (z0, z1) = valid_range(d, od, g.stride[0], g.pad[0], a);
                    for bb in 0..kh {
                        let (y0, y1) = valid_range(h, oh, g.stride[1], g.pad[1], bb);
                        for c in 0..kw {
                            let (x0, x1) = valid_range(wi, ow, g.stride[2], g.pad[2], c);
                            let wv = wk[(a * kh + bb) * kw + c];
                            for oz in z0..z1 {
                                let iz = oz * g.stride[0] + a - g.pad[0];
                                for oy in y0..y1 {
                                    let iy = oy * g.stride[1] + bb - g.pad[1];
                                    let orow = &mut o[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                    let irow = &xi[(iz * h + iy) * wi..(iz * h + iy + 1) * wi];
                                    if g.stride[2] == 1 {
                                        let off = c as isize - g.pad[2] as isize;
                                        for ox in x0..x1 {
                                            orow[ox] += wv * irow[(ox as isize + off) as usize];
                                        }
                                    } else {
                                        for ox in x0..x1 {
                                            orow[ox] += wv * irow[ox * g.stride[2] + c - g.pad[2]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(g: &ConvGeom, x: &[f64], w: &[f64], gy: &[f64], gx: &mut [f64], gw: &mut [f64]) {
    let [d, h, wi] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let isz = d * h * wi;
    let osz = od * oh * ow;
    let ksz = kd * kh * kw;
    for n in 0..g.b {
        for co in 0..g.cout {
            let go = &gy[(n * g.cout + co) * osz..(n * g.cout + co + 1) * osz];
            for ci in 0..g.cin {
                let xi = &x[(n * g.cin + ci) * isz..(n * g.cin + ci + 1) * isz];
                let gxi = &mut gx[(n * g.cin + ci) * isz..(n * g.cin + ci + 1) * isz];
                let kbase = (co * g.cin + ci) * ksz;
                for a in 0..kd {
                    let (z0, z1) = valid_range(d, od, g.stride[0], g.pad[0], a);
                    for bb in 0..kh {
                        let (y0, y1) = valid_range(h, oh, g.stride[1], g.pad[1], bb);
                        for c in 0..kw {
                            let (x0, x1) = valid_range(wi, ow, g.stride[2], g.pad[2], c);
                            let kidx = kbase + (a * kh + bb) * kw + c;
                            let wv = w[kidx];
                            let mut acc = 0.0;
                            for oz in z0..z1 {
                                let iz = oz * g.stride[0] + a - g.pad[0];
                                for oy in y0..y1 {
                                    let iy = oy * g.stride[1] + bb - g.pad[1];
                                    let grow = &go[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                    let ib = (iz * h + iy) * wi;
                                    for ox in x0..x1 {
                                        let ix = ib + ox * g.stride[2] + c - g.pad[2];
                                        acc += grow[ox] * xi[ix];
                                        gxi[ix] += grow[ox] * wv;
                                    }
                                }
                            }
                            gw[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
}
