//! Pose-initialization regressor.
//!
//! Two branches meet at a common spatial size: the volume goes through two
//! 3D conv blocks (each `conv s2 -> norm -> relu -> conv -> norm -> relu`)
//! and its depth axis is folded into channels; the standardized image goes
//! through stride-2 2D conv blocks. The concatenation is squeezed by a 1x1
//! conv block, passed through residual blocks and read out by six separate
//! linear heads, one per pose parameter.
//!
//! Training minimizes, averaged over the batch,
//! `alpha * grad_diff(fixed, P(pred)) + beta * ||target - pred|| + lambda * ||pred||^2`.
//! The image term is differentiated with respect to the predicted pose by
//! central differences and then backpropagated into the network.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::PoseDistribution;
use crate::image::Image;
use crate::nn::checkpoint::{self, Checkpoint, Manifest};
use crate::nn::layers::update_running_stats;
use crate::nn::{ConvBlock, Layout, Linear, Mode, NodeId, NormSpec, Params, ResidualBlock, Sgd, Tape, Tensor, TrainConfig};
use crate::pose::Pose;
use crate::projector::{fd_pose_grad, FdStep, Intrinsics, PreparedVolume};
use crate::similarity::{self, grad_diff};
use crate::volume::{PhantomSource, Volume};

/// What the `lambda` term penalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularizer {
    /// `||predicted pose||^2`.
    Pose,
    /// `||network weights||^2` (weight decay).
    Weights,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RtpiConfig {
    pub vol_dims: [usize; 3],
    pub img_dims: [usize; 2],
    pub vol_channels: [usize; 2],
    pub img_channels: [usize; 3],
    pub trunk_channels: usize,
    pub res_blocks: usize,
    pub norm: NormSpec,
    /// Head outputs are multiplied by these (deg, mm) before use.
    pub out_scale: [f64; 2],
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub squared_mse: bool,
    pub regularizer: Regularizer,
    pub fd: FdStep,
}

impl RtpiConfig {
    /// 32^3 volume, 64^2 image; both branches end at 8x8.
    pub fn toy() -> Self {
        RtpiConfig {
            vol_dims: [32, 32, 32],
            img_dims: [64, 64],
            vol_channels: [4, 8],
            img_channels: [8, 16, 16],
            trunk_channels: 16,
            res_blocks: 4,
            norm: NormSpec::Group(2),
            out_scale: [10.0, 10.0],
            alpha: 1.0,
            beta: 1.0,
            lambda: 0.01,
            squared_mse: false,
            regularizer: Regularizer::Pose,
            fd: FdStep::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.lambda >= 0.0) {
            return bad("alpha, beta, lambda must be >= 0".into());
        }
        let [d, h, w] = self.vol_dims;
        let [iw, ih] = self.img_dims;
        if d % 4 != 0 || h % 4 != 0 || w % 4 != 0 || iw % 8 != 0 || ih % 8 != 0 || h / 4 != ih / 8 || w / 4 != iw / 8 {
            return bad(format!("volume {:?} and image {:?} do not meet at a common feature size", self.vol_dims, self.img_dims));
        }
        if self.res_blocks == 0 || self.trunk_channels == 0 {
            return bad("need at least one residual block".into());
        }
        Ok(())
    }

    /// Spatial size `(h, w)` where the branches meet.
    pub fn feature_dims(&self) -> [usize; 2] {
        [self.img_dims[1] / 8, self.img_dims[0] / 8]
    }

    fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("net".into(), "rtpi".into()),
            ("vol_dims".into(), join(&self.vol_dims)),
            ("img_dims".into(), join(&self.img_dims)),
            ("vol_channels".into(), join(&self.vol_channels)),
            ("img_channels".into(), join(&self.img_channels)),
            ("trunk_channels".into(), self.trunk_channels.to_string()),
            ("res_blocks".into(), self.res_blocks.to_string()),
            ("norm".into(), self.norm.to_string()),
            ("out_scale".into(), format!("{} {}", self.out_scale[0], self.out_scale[1])),
        ];
        kv.push(("alpha".into(), self.alpha.to_string()));
        kv.push(("beta".into(), self.beta.to_string()));
        kv.push(("lambda".into(), self.lambda.to_string()));
        kv.push(("squared_mse".into(), self.squared_mse.to_string()));
        kv.push(("regularizer".into(), if self.regularizer == Regularizer::Pose { "pose" } else { "weights" }.into()));
        kv.push(("fd".into(), format!("{} {}", self.fd.rot_deg, self.fd.trans_mm)));
        kv
    }

    fn from_manifest(m: &Manifest) -> Result<Self> {
        let bad = |k: &str| Error::Checkpoint(format!("bad `{}`", k));
        let nums = |k: &str| -> Result<Vec<f64>> {
            m.get(k).ok_or_else(|| bad(k))?.split_whitespace().map(|v| v.parse().map_err(|_| bad(k))).collect()
        };
        let ints = |k: &str| -> Result<Vec<usize>> { Ok(nums(k)?.into_iter().map(|v| v as usize).collect()) };
        if m.get("net") != Some("rtpi") {
            return Err(Error::Checkpoint("not an rtpi checkpoint".into()));
        }
        let (vd, id, vc, ic, os, fd) = (ints("vol_dims")?, ints("img_dims")?, ints("vol_channels")?, ints("img_channels")?, nums("out_scale")?, nums("fd")?);
        if vd.len() != 3 || id.len() != 2 || vc.len() != 2 || ic.len() != 3 || os.len() != 2 || fd.len() != 2 {
            return Err(bad("dims"));
        }
        let cfg = RtpiConfig {
            vol_dims: [vd[0], vd[1], vd[2]],
            img_dims: [id[0], id[1]],
            vol_channels: [vc[0], vc[1]],
            img_channels: [ic[0], ic[1], ic[2]],
            trunk_channels: m.get_parsed("trunk_channels")?,
            res_blocks: m.get_parsed("res_blocks")?,
            norm: m.get("norm").and_then(NormSpec::parse).ok_or_else(|| bad("norm"))?,
            out_scale: [os[0], os[1]],
            alpha: m.get_parsed("alpha")?,
            beta: m.get_parsed("beta")?,
            lambda: m.get_parsed("lambda")?,
            squared_mse: m.get_parsed("squared_mse")?,
            regularizer: match m.get("regularizer") {
                Some("pose") => Regularizer::Pose,
                Some("weights") => Regularizer::Weights,
                _ => return Err(bad("regularizer")),
            },
            fd: FdStep { rot_deg: fd[0], trans_mm: fd[1] },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePrediction {
    pub pose: Pose,
    /// Head outputs before the output scaling.
    pub raw: [f64; 6],
}

#[derive(Debug, Clone)]
pub struct RtpiNet {
    pub cfg: RtpiConfig,
    pub params: Params,
    pub layout: Layout,
    vol_blocks: Vec<ConvBlock>,
    img_blocks: Vec<ConvBlock>,
    fuse: ConvBlock,
    res: Vec<ResidualBlock>,
    heads: Vec<Linear>,
}

impl RtpiNet {
    pub fn new(cfg: RtpiConfig, seed: u64) -> Result<RtpiNet> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let mut l = Layout::default();
        let [c0, c1] = cfg.vol_channels;
        let mut vol_blocks = Vec::new();
        for (i, (cin, cout)) in [(1, c0), (c0, c1)].into_iter().enumerate() {
            vol_blocks.push(ConvBlock::new(&mut p, &mut l, &format!("vol{}.down", i), 3, cin, cout, 3, 2, cfg.norm, &mut rng));
            vol_blocks.push(ConvBlock::new(&mut p, &mut l, &format!("vol{}.conv", i), 3, cout, cout, 3, 1, cfg.norm, &mut rng));
        }
        l.push("vol.flatten", crate::nn::LayerSpec::Flatten3dTo2d);
        let mut img_blocks = Vec::new();
        let mut cin = 1;
        for (i, &c) in cfg.img_channels.iter().enumerate() {
            img_blocks.push(ConvBlock::new(&mut p, &mut l, &format!("img{}", i), 2, cin, c, 3, 2, cfg.norm, &mut rng));
            cin = c;
        }
        l.push("concat", crate::nn::LayerSpec::Concat);
        let fused_in = c1 * cfg.vol_dims[0] / 4 + cfg.img_channels[2];
        let fuse = ConvBlock::new(&mut p, &mut l, "fuse", 2, fused_in, cfg.trunk_channels, 1, 1, cfg.norm, &mut rng);
        let res = (0..cfg.res_blocks)
            .map(|i| ResidualBlock::new(&mut p, &mut l, &format!("res{}", i), cfg.trunk_channels, cfg.norm, &mut rng))
            .collect();
        let [fh, fw] = cfg.feature_dims();
        let feat = cfg.trunk_channels * fh * fw;
        let heads = ["rx", "ry", "rz", "tx", "ty", "tz"].iter().map(|n| Linear::new(&mut p, &mut l, &format!("head.{}", n), feat, 1, &mut rng)).collect();
        Ok(RtpiNet { cfg, params: p, layout: l, vol_blocks, img_blocks, fuse, res, heads })
    }

    /// Output-scaled pose tensor `(batch, 6)` and the raw head tensor.
    pub fn forward_tape(&self, tape: &mut Tape, volume: &Volume, images: &[Image], mode: Mode) -> Result<(NodeId, NodeId)> {
        let [d, h, w] = self.cfg.vol_dims;
        let vd = volume.dims();
        if vd != [w, h, d] {
            return Err(Error::ShapeMismatch(format!("volume dims {:?}, network expects {:?}", vd, [w, h, d])));
        }
        let mut batch = Vec::with_capacity(images.len() * self.cfg.img_dims[0] * self.cfg.img_dims[1]);
        for img in images {
            if img.dims() != self.cfg.img_dims {
                return Err(Error::ShapeMismatch(format!("image dims {:?}, network expects {:?}", img.dims(), self.cfg.img_dims)));
            }
            batch.extend_from_slice(img.standardized().data());
        }
        let n = images.len();
        let mut v = tape.input(Tensor::new(&[1, 1, d, h, w], volume.data().to_vec())?)?;
        for b in &self.vol_blocks {
            v = b.forward(tape, v, mode)?;
        }
        v = tape.flatten_3d_to_2d(v)?;
        v = tape.repeat_batch(v, n)?;
        let mut x = tape.input(Tensor::new(&[n, 1, self.cfg.img_dims[1], self.cfg.img_dims[0]], batch)?)?;
        for b in &self.img_blocks {
            x = b.forward(tape, x, mode)?;
        }
        let mut y = tape.concat(&[v, x])?;
        y = self.fuse.forward(tape, y, mode)?;
        for r in &self.res {
            y = r.forward(tape, y, mode)?;
        }
        let feat = tape.value(y).len() / n;
        let y = tape.reshape(y, &[n, feat])?;
        let mut raw = Vec::with_capacity(6);
        let mut scaled = Vec::with_capacity(6);
        for (i, head) in self.heads.iter().enumerate() {
            let o = head.forward(tape, y)?;
            raw.push(o);
            scaled.push(tape.scale(o, self.cfg.out_scale[i / 3])?);
        }
        Ok((tape.concat(&scaled)?, tape.concat(&raw)?))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        checkpoint::encode(&self.cfg.to_kv(), &self.layout, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<RtpiNet> {
        let cfg = RtpiConfig::from_manifest(&checkpoint::parse_manifest(&ck.manifest)?)?;
        let mut net = RtpiNet::new(cfg, 0)?;
        checkpoint::load_into(ck, &mut net.params)?;
        Ok(net)
    }

    /// Parameter ids of head `i` (weight, bias).
    pub fn head_params(&self, i: usize) -> [crate::nn::ParamId; 2] {
        [self.heads[i].w, self.heads[i].b]
    }
}

fn pose_row(t: &Tensor, row: usize) -> [f64; 6] {
    let mut a = [0.0; 6];
    a.copy_from_slice(&t.data()[row * 6..row * 6 + 6]);
    a
}

pub fn rtpi_forward(net: &RtpiNet, volume: &Volume, fixed: &Image) -> Result<PosePrediction> {
    let mut tape = Tape::new(&net.params);
    let (pose, raw) = net.forward_tape(&mut tape, volume, core::slice::from_ref(fixed), Mode::Eval)?;
    Ok(PosePrediction { pose: Pose::from_array(pose_row(tape.value(pose), 0)), raw: pose_row(tape.value(raw), 0) })
}

fn pose_norm_sq(p: Pose) -> f64 {
    p.to_array().iter().map(|v| v * v).sum()
}

/// Single-sample loss (pose regularizer; the weight-decay variant has no
/// per-sample value).
pub fn rtpi_loss(pred: &PosePrediction, target: Pose, fixed: &Image, volume: &Volume, k: &Intrinsics, cfg: &RtpiConfig) -> Result<f64> {
    let mut loss = 0.0;
    if cfg.alpha != 0.0 {
        loss += cfg.alpha * grad_diff(fixed, &crate::projector::project(volume, pred.pose, k))?;
    }
    loss += cfg.beta * similarity::param_distance(target, pred.pose, cfg.squared_mse);
    if cfg.regularizer == Regularizer::Pose {
        loss += cfg.lambda * pose_norm_sq(pred.pose);
    }
    Ok(loss)
}

/// Loss and its gradient with respect to the predicted pose for one sample.
fn loss_and_pose_grad(pred: Pose, target: Pose, fixed: &Image, pv: &PreparedVolume, k: &Intrinsics, cfg: &RtpiConfig) -> Result<(f64, [f64; 6])> {
    let p = pred.to_array();
    let t = target.to_array();
    let mut g = [0.0; 6];
    let mut loss = 0.0;
    if cfg.alpha != 0.0 {
        loss += cfg.alpha * grad_diff(fixed, &pv.project(pred, k))?;
        let gs = fd_pose_grad(|q| grad_diff(fixed, &pv.project(q, k)), pred, cfg.fd)?.to_array();
        for i in 0..6 {
            g[i] += cfg.alpha * gs[i];
        }
    }
    let dist = similarity::param_distance(target, pred, cfg.squared_mse);
    loss += cfg.beta * dist;
    for i in 0..6 {
        let d = p[i] - t[i];
        g[i] += cfg.beta
            * if cfg.squared_mse {
                2.0 * d
            } else if dist > 0.0 {
                d / dist
            } else {
                0.0
            };
    }
    if cfg.regularizer == Regularizer::Pose {
        loss += cfg.lambda * pose_norm_sq(pred);
        for i in 0..6 {
            g[i] += 2.0 * cfg.lambda * p[i];
        }
    }
    Ok((loss, g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RtpiTrainConfig {
    pub train: TrainConfig,
    pub poses: PoseDistribution,
    pub k: Intrinsics,
    /// Global gradient-norm clip; `None` disables.
    pub grad_clip: Option<f64>,
    /// Round parameters to f32 after every step (32-bit training).
    pub round_f32: bool,
}

impl RtpiTrainConfig {
    /// Acceptance-scale run: 2,000 iterations of batch 8, cyclic LR
    /// 1e-3..1e-2 every 100 steps, momentum 0.9.
    pub fn toy(seed: u64) -> Self {
        RtpiTrainConfig {
            train: TrainConfig { batch_size: 8, iterations: 2000, lr_min: 1e-3, lr_max: 1e-2, cycle_half_steps: 100, momentum: 0.9, seed },
            poses: PoseDistribution::isotropic(10.0, 10.0),
            k: Intrinsics::toy(),
            grad_clip: Some(5.0),
            round_f32: true,
        }
    }
}

pub(crate) fn fault_at(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFiniteFault { .. } => Error::NonFiniteFault { iteration },
        e => e,
    }
}

pub(crate) fn clip_grads(grads: &mut crate::nn::GradStore, clip: Option<f64>) {
    if let Some(c) = clip {
        let n = grads.norm();
        if n > c {
            grads.scale(c / n);
        }
    }
}

/// Whether the image has usable gradient structure for `grad_diff`.
pub(crate) fn has_structure(img: &Image) -> bool {
    grad_diff(img, img).is_ok()
}

/// Trains in place; returns the per-iteration batch-mean loss. `observe` is
/// called after every iteration with `(iteration, loss)`.
pub fn train_rtpi(net: &mut RtpiNet, source: &dyn PhantomSource, cfg: &RtpiTrainConfig, observe: &mut dyn FnMut(usize, f64)) -> Result<Vec<f64>> {
    cfg.train.validate()?;
    cfg.poses.validate()?;
    cfg.k.validate()?;
    if cfg.k.det_px != net.cfg.img_dims {
        return Err(Error::InvalidConfig(format!("detector {:?} differs from network input {:?}", cfg.k.det_px, net.cfg.img_dims)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let sched = cfg.train.schedule();
    let mut opt = Sgd::new(&net.params, cfg.train.momentum);
    let b = cfg.train.batch_size;
    let mut curve = Vec::with_capacity(cfg.train.iterations);
    for it in 0..cfg.train.iterations {
        let (volume, _) = source.phantom(it as u64)?;
        let pv = PreparedVolume::new(&volume);
        let mut targets = Vec::with_capacity(b);
        let mut images = Vec::with_capacity(b);
        while targets.len() < b {
            let (_init, target) = crate::eval::sample_pose_pair(&cfg.poses, &mut rng);
            let img = pv.project(target, &cfg.k);
            if has_structure(&img) {
                targets.push(target);
                images.push(img);
            }
        }
        let mut grads = net.params.zero_grads();
        let (loss, stats) = {
            let mut tape = Tape::new(&net.params);
            let (out, _) = net.forward_tape(&mut tape, &volume, &images, Mode::Train).map_err(fault_at(it))?;
            let preds = tape.value(out).clone();
            let mut seed = vec![0.0; b * 6];
            let mut loss = 0.0;
            for s in 0..b {
                let pred = Pose::from_array(pose_row(&preds, s));
                let (l, g) = loss_and_pose_grad(pred, targets[s], &images[s], &pv, &cfg.k, &net.cfg)?;
                loss += l / b as f64;
                for i in 0..6 {
                    seed[s * 6 + i] = g[i] / b as f64;
                }
            }
            tape.backward(&[(out, &Tensor::new(&[b, 6], seed)?)], &mut grads).map_err(fault_at(it))?;
            (loss, tape.batch_stats().to_vec())
        };
        update_running_stats(&mut net.params, &stats, BN_MOMENTUM);
        let loss = loss + add_weight_decay(&net.params, &mut grads, net.cfg);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteFault { iteration: it });
        }
        clip_grads(&mut grads, cfg.grad_clip);
        opt.step(&mut net.params, &grads, sched.lr(it));
        if cfg.round_f32 {
            net.params.round_to_f32();
        }
        if !net.params.is_finite() {
            return Err(Error::NonFiniteFault { iteration: it });
        }
        curve.push(loss);
        observe(it, loss);
    }
    Ok(curve)
}

/// Running-statistics blend factor for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

/// `lambda * ||w||^2` over trainable weights when the weight regularizer is
/// selected; adds its gradient and returns its value.
fn add_weight_decay(params: &Params, grads: &mut crate::nn::GradStore, cfg: RtpiConfig) -> f64 {
    if cfg.regularizer != Regularizer::Weights {
        return 0.0;
    }
    let mut total = 0.0;
    for id in params.ids().filter(|id| params.is_trainable(*id)) {
        let v = params.value(id);
        total += v.dot(v);
        grads.get_mut(id).add_scaled(v, 2.0 * cfg.lambda);
    }
    cfg.lambda * total
}
