//! Iterative fine registration on embedded features.
//!
//! Two encoders with identical structure and separate weights map the moving
//! DRR and the fixed image to feature maps `e_m`, `e_f` of size `H x W x C`.
//! The error is the mask-weighted mean absolute difference
//! `L_N = sum M' |e_m - e_f| / sum M'`, where `M'` is the projected spine
//! mask pooled to `H x W` and repeated over channels. Its pose gradient
//! `(V_r, V_t)` comes from central differences.
//!
//! Training matches directions: with `V* = geodesic_gradient(theta, target)`,
//! `loss = || V_r*/|V_r*| - V_r/|V_r| || + || V_t*/|V_t*| - V_t/|V_t| ||`.
//! Each stencil evaluation of `L_N` is an ordinary first-order graph in the
//! encoder weights, so the loss is backpropagated through all twelve of them.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::PoseDistribution;
use crate::image::{Image, MaskImage};
use crate::math;
use crate::nn::checkpoint::{self, Checkpoint, Manifest};
use crate::nn::layers::update_running_stats;
use crate::nn::{Conv, ConvBlock, GradStore, LayerSpec, Layout, Mode, NodeId, Norm, NormSpec, ParamId, Params, Sgd, Tape, Tensor, TrainConfig};
use crate::pose::{geodesic_gradient, geodesic_norm, GeodesicWeights, GradVec, Pose};
use crate::projector::{FdStep, Intrinsics, PreparedVolume};
use crate::rtpi::{clip_grads, fault_at, BN_MOMENTUM};
use crate::volume::{PhantomSource, Volume, VoxelMask};

/// Feature map stored channel-major: `data[(c * H + y) * W + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// `(H, W, C)`.
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!("{} values for feature dims {:?}", data.len(), dims)));
        }
        Ok(FeatureMap { dims, data })
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::ShapeMismatch(format!("encoder output {:?}", s)));
        }
        FeatureMap::new([s[2], s[3], s[1]], t.data().to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Features are the raw image (`C = 1`).
    Identity,
    /// Stem and downsampling only.
    Plain,
    /// Stem, downsampling, assistant and leader branches with composite connections.
    Composite,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Identity => "identity",
            EncoderKind::Plain => "plain",
            EncoderKind::Composite => "composite",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(EncoderKind::Identity),
            "plain" => Some(EncoderKind::Plain),
            "composite" => Some(EncoderKind::Composite),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Input image `(w, h)`; both must be divisible by 8.
    pub img_dims: [usize; 2],
    pub stem_channels: usize,
    /// Output channels `C`.
    pub channels: usize,
    pub norm: NormSpec,
}

impl EncoderConfig {
    pub fn toy(kind: EncoderKind) -> Self {
        EncoderConfig { kind, img_dims: [64, 64], stem_channels: 4, channels: 8, norm: NormSpec::Group(2) }
    }

    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.img_dims;
        if self.kind != EncoderKind::Identity && (w % 8 != 0 || h % 8 != 0 || self.channels < 2 || self.stem_channels == 0) {
            return Err(Error::InvalidConfig(format!("encoder needs dims divisible by 8 and >= 2 channels, got {:?}", self)));
        }
        Ok(())
    }

    /// Declared output dims `(H, W, C)`.
    pub fn output_dims(&self) -> [usize; 3] {
        let [w, h] = self.img_dims;
        match self.kind {
            EncoderKind::Identity => [h, w, 1],
            _ => [h / 4, w / 4, self.channels],
        }
    }
}

/// Plain residual bottleneck: `relu(x + n3(c3(relu(n2(c2(relu(n1(c1 x))))))))`
/// with 1x1, 3x3, 1x1 convs and half-width middle.
#[derive(Debug, Clone, Copy, PartialEq)]
struct CfBlock {
    reduce: ConvBlock,
    mid: ConvBlock,
    expand: Conv,
    norm: Norm,
}

impl CfBlock {
    fn new(p: &mut Params, l: &mut Layout, name: &str, c: usize, norm: NormSpec, rng: &mut ChaCha8Rng) -> Self {
        let m = (c / 2).max(1);
        l.push(name, LayerSpec::ResidualBlock { channels: c });
        CfBlock {
            reduce: ConvBlock::new(p, l, &format!("{}.reduce", name), 2, c, m, 1, 1, norm, rng),
            mid: ConvBlock::new(p, l, &format!("{}.mid", name), 2, m, m, 3, 1, norm, rng),
            expand: Conv::new(p, l, &format!("{}.expand.conv", name), 2, m, c, 1, 1, 0, false, rng),
            norm: Norm::new(p, l, &format!("{}.expand.norm", name), c, norm),
        }
    }

    fn forward(&self, t: &mut Tape, x: NodeId, mode: Mode) -> Result<NodeId> {
        let y = self.reduce.forward(t, x, mode)?;
        let y = self.mid.forward(t, y, mode)?;
        let y = self.expand.forward(t, y)?;
        let y = self.norm.forward(t, y, mode)?;
        let y = t.add(x, y)?;
        t.relu(y)
    }
}

/// Composite connection: 1x1 conv, norm, nearest upsampling.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Ccu {
    conv: Conv,
    norm: Norm,
    factor: usize,
}

impl Ccu {
    fn new(p: &mut Params, l: &mut Layout, name: &str, c: usize, factor: usize, norm: NormSpec, rng: &mut ChaCha8Rng) -> Self {
        let conv = Conv::new(p, l, &format!("{}.conv", name), 2, c, c, 1, 1, 0, false, rng);
        let norm = Norm::new(p, l, &format!("{}.norm", name), c, norm);
        l.push(&format!("{}.up", name), LayerSpec::UpsampleNearest { factor });
        Ccu { conv, norm, factor }
    }

    fn forward(&self, t: &mut Tape, x: NodeId, mode: Mode) -> Result<NodeId> {
        let y = self.conv.forward(t, x)?;
        let y = self.norm.forward(t, y, mode)?;
        if self.factor == 1 {
            Ok(y)
        } else {
            t.upsample(y, [1, self.factor, self.factor])
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Trunk {
    stem: Vec<ConvBlock>,
    down: Vec<ConvBlock>,
    down_cf: CfBlock,
}

#[derive(Debug, Clone, PartialEq)]
struct Branches {
    a1: CfBlock,
    a_down: ConvBlock,
    a2: CfBlock,
    ccu_low: Ccu,
    l1: CfBlock,
    ccu_high: Ccu,
    merge: ConvBlock,
    l2: CfBlock,
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Identity,
    Plain { trunk: Trunk, head: Conv },
    Composite { trunk: Trunk, br: Branches, head: Conv },
}

fn zero_head(p: &mut Params, l: &mut Layout, prefix: &str, c: usize, rng: &mut ChaCha8Rng) -> Conv {
    let head = Conv::new(p, l, &format!("{}.head", prefix), 2, c, c, 1, 1, 0, true, rng);
    p.value_mut(head.w).fill(0.0);
    if let Some(b) = head.b {
        p.value_mut(b).fill(0.0);
    }
    head
}

/// One encoder; its parameters live in the owning [`FineNets`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    body: Body,
}

impl Encoder {
    fn new(cfg: EncoderConfig, p: &mut Params, l: &mut Layout, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let s = cfg.stem_channels;
        let n = cfg.norm;
        let trunk = |p: &mut Params, l: &mut Layout, rng: &mut ChaCha8Rng| Trunk {
            stem: (0..3)
                .map(|i| ConvBlock::new(p, l, &format!("{}.stem{}", prefix, i), 2, if i == 0 { 1 } else { s }, s, 3, 1, n, rng))
                .collect(),
            down: (0..2)
                .map(|i| ConvBlock::new(p, l, &format!("{}.down{}", prefix, i), 2, if i == 0 { s } else { c }, c, 3, 2, n, rng))
                .collect(),
            down_cf: CfBlock::new(p, l, &format!("{}.down.cf", prefix), c, n, rng),
        };
        let body = match cfg.kind {
            EncoderKind::Identity => Body::Identity,
            EncoderKind::Plain => {
                let t = trunk(p, l, rng);
                Body::Plain { trunk: t, head: zero_head(p, l, prefix, c, rng) }
            }
            EncoderKind::Composite => {
                let t = trunk(p, l, rng);
                let br = Branches {
                    a1: CfBlock::new(p, l, &format!("{}.assist.cf0", prefix), c, n, rng),
                    a_down: ConvBlock::new(p, l, &format!("{}.assist.down", prefix), 2, c, c, 3, 2, n, rng),
                    a2: CfBlock::new(p, l, &format!("{}.assist.cf1", prefix), c, n, rng),
                    ccu_low: Ccu::new(p, l, &format!("{}.ccu0", prefix), c, 2, n, rng),
                    l1: CfBlock::new(p, l, &format!("{}.lead.cf0", prefix), c, n, rng),
                    ccu_high: Ccu::new(p, l, &format!("{}.ccu1", prefix), c, 1, n, rng),
                    merge: ConvBlock::new(p, l, &format!("{}.lead.merge", prefix), 2, 2 * c, c, 1, 1, n, rng),
                    l2: CfBlock::new(p, l, &format!("{}.lead.cf1", prefix), c, n, rng),
                };
                l.push(&format!("{}.concat", prefix), LayerSpec::Concat);
                Body::Composite { trunk: t, br, head: zero_head(p, l, prefix, c, rng) }
            }
        };
        Encoder { cfg, body }
    }

    fn input(&self, t: &mut Tape, image: &Image) -> Result<NodeId> {
        if image.dims() != self.cfg.img_dims {
            return Err(Error::ShapeMismatch(format!("image {:?}, encoder expects {:?}", image.dims(), self.cfg.img_dims)));
        }
        let [w, h] = self.cfg.img_dims;
        let data = match self.body {
            Body::Identity => image.data().to_vec(),
            _ => image.standardized().into_data(),
        };
        t.input(Tensor::new(&[1, 1, h, w], data)?)
    }

    fn run_trunk(tr: &Trunk, t: &mut Tape, mut x: NodeId, mode: Mode) -> Result<NodeId> {
        for b in tr.stem.iter().chain(&tr.down) {
            x = b.forward(t, x, mode)?;
        }
        tr.down_cf.forward(t, x, mode)
    }

    /// Block mean (factor 4) of the standardized input, repeated over the
    /// output channels.
    fn pooled_input(&self, image: &Image) -> Result<Tensor> {
        let [h, w, c] = self.cfg.output_dims();
        let z = image.standardized();
        let mut plane = vec![0.0; h * w];
        for y in 0..4 * h {
            for x in 0..4 * w {
                plane[(y / 4) * w + x / 4] += z.get(x, y) / 16.0;
            }
        }
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            data.extend_from_slice(&plane);
        }
        Tensor::new(&[1, c, h, w], data)
    }

    /// Records the encoder on `t`; returns the `(1, C, H, W)` feature node.
    ///
    /// Learned encoders add a zero-initialized 1x1 head to the pooled input,
    /// so an untrained pair compares block-averaged intensities.
    pub fn forward_tape(&self, t: &mut Tape, image: &Image, mode: Mode) -> Result<NodeId> {
        let x = self.input(t, image)?;
        let out = match &self.body {
            Body::Identity => return Ok(x),
            Body::Plain { trunk, head } => {
                let y = Self::run_trunk(trunk, t, x, mode)?;
                head.forward(t, y)?
            }
            Body::Composite { trunk, br, head } => {
                let x = Self::run_trunk(trunk, t, x, mode)?;
                let a1 = br.a1.forward(t, x, mode)?;
                let a2 = br.a_down.forward(t, a1, mode)?;
                let a2 = br.a2.forward(t, a2, mode)?;
                let low = br.ccu_low.forward(t, a2, mode)?;
                let l = t.add(x, low)?;
                let l1 = br.l1.forward(t, l, mode)?;
                let high = br.ccu_high.forward(t, a1, mode)?;
                let m = t.concat(&[l1, high])?;
                let m = br.merge.forward(t, m, mode)?;
                let y = br.l2.forward(t, m, mode)?;
                head.forward(t, y)?
            }
        };
        let skip = t.input(self.pooled_input(image)?)?;
        t.add(out, skip)
    }

    /// Parameters of the composite connections (empty for other kinds).
    pub fn composite_connection_params(&self) -> Vec<ParamId> {
        match &self.body {
            Body::Composite { br, .. } => {
                let mut v = Vec::new();
                for c in [&br.ccu_low, &br.ccu_high] {
                    v.push(c.conv.w);
                    v.extend([c.norm.gamma, c.norm.beta]);
                }
                v
            }
            _ => Vec::new(),
        }
    }
}

/// Moving- and fixed-image encoders sharing one parameter set (names
/// prefixed `m.` and `f.`).
#[derive(Debug, Clone)]
pub struct FineNets {
    pub cfg: EncoderConfig,
    pub params: Params,
    pub layout: Layout,
    pub moving: Encoder,
    pub fixed: Encoder,
}

impl FineNets {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<FineNets> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut layout = Layout::default();
        let moving = Encoder::new(cfg, &mut params, &mut layout, "m", &mut rng);
        let fixed = Encoder::new(cfg, &mut params, &mut layout, "f", &mut rng);
        let mut nets = FineNets { cfg, params, layout, moving, fixed };
        // both branches start from the same weights, then train apart
        nets.tie_weights();
        Ok(nets)
    }

    /// Copies the moving encoder's weights into the fixed encoder.
    pub fn tie_weights(&mut self) {
        let ids: Vec<ParamId> = self.params.ids().collect();
        let half = ids.len() / 2;
        for k in 0..half {
            let v = self.params.value(ids[k]).clone();
            *self.params.value_mut(ids[half + k]) = v;
        }
    }

    pub fn embed_moving(&self, image: &Image) -> Result<FeatureMap> {
        embed(&self.params, &self.moving, image)
    }

    pub fn embed_fixed(&self, image: &Image) -> Result<FeatureMap> {
        embed(&self.params, &self.fixed, image)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let kv = vec![
            ("net".to_string(), "finereg".to_string()),
            ("kind".to_string(), self.cfg.kind.name().to_string()),
            ("img_dims".to_string(), format!("{} {}", self.cfg.img_dims[0], self.cfg.img_dims[1])),
            ("stem_channels".to_string(), self.cfg.stem_channels.to_string()),
            ("channels".to_string(), self.cfg.channels.to_string()),
            ("norm".to_string(), self.cfg.norm.to_string()),
        ];
        checkpoint::encode(&kv, &self.layout, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<FineNets> {
        let m: Manifest = checkpoint::parse_manifest(&ck.manifest)?;
        let bad = |k: &str| Error::Checkpoint(format!("bad `{}`", k));
        if m.get("net") != Some("finereg") {
            return Err(Error::Checkpoint("not a finereg checkpoint".into()));
        }
        let dims: Vec<usize> = m.get("img_dims").ok_or_else(|| bad("img_dims"))?.split_whitespace().filter_map(|v| v.parse().ok()).collect();
        if dims.len() != 2 {
            return Err(bad("img_dims"));
        }
        let cfg = EncoderConfig {
            kind: m.get("kind").and_then(EncoderKind::parse).ok_or_else(|| bad("kind"))?,
            img_dims: [dims[0], dims[1]],
            stem_channels: m.get_parsed("stem_channels")?,
            channels: m.get_parsed("channels")?,
            norm: m.get("norm").and_then(NormSpec::parse).ok_or_else(|| bad("norm"))?,
        };
        let mut nets = FineNets::new(cfg, 0)?;
        checkpoint::load_into(ck, &mut nets.params)?;
        Ok(nets)
    }
}

/// Deterministic feature map of one image.
pub fn embed(params: &Params, encoder: &Encoder, image: &Image) -> Result<FeatureMap> {
    let mut t = Tape::new(params);
    let y = encoder.forward_tape(&mut t, image, Mode::Eval)?;
    FeatureMap::from_tensor(t.value(y))
}

/// Mask pooled to the feature grid and repeated over `channels`.
pub fn feature_mask(mask: &MaskImage, dims: [usize; 3]) -> Result<Vec<f64>> {
    let [h, w, c] = dims;
    let pooled = if mask.dims() == [w, h] { mask.clone() } else { mask.downsample_any([w, h])? };
    let plane: Vec<f64> = pooled.data().iter().map(|v| *v as f64).collect();
    let mut out = Vec::with_capacity(h * w * c);
    for _ in 0..c {
        out.extend_from_slice(&plane);
    }
    Ok(out)
}

/// Weighted mean of `|e_m - e_f|` (or of its square) over elements where the
/// replicated mask is set.
pub fn error_fn_weighted(e_m: &FeatureMap, e_f: &FeatureMap, weights: &[f64], squared: bool) -> Result<f64> {
    if e_m.dims != e_f.dims || weights.len() != e_m.data.len() {
        return Err(Error::ShapeMismatch(format!("features {:?} / {:?} with {} mask values", e_m.dims, e_f.dims, weights.len())));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptyMask);
    }
    let mut acc = 0.0;
    for ((a, b), m) in e_m.data.iter().zip(&e_f.data).zip(weights) {
        let d = a - b;
        acc += m * if squared { d * d } else { math::abs(d) };
    }
    Ok(acc / total)
}

/// `L_N` with the projected mask `m` (any size that pools onto the feature grid).
pub fn error_fn(e_m: &FeatureMap, e_f: &FeatureMap, m: &MaskImage) -> Result<f64> {
    error_fn_weighted(e_m, e_f, &feature_mask(m, e_m.dims)?, false)
}

/// Unit vector of `v`; `ZeroGradient` below 1e-12.
fn unit(v: [f64; 3]) -> Result<([f64; 3], f64)> {
    let n = math::norm(v);
    if !(n >= 1e-12) {
        return Err(Error::ZeroGradient);
    }
    Ok((math::scale(v, 1.0 / n), n))
}

/// Direction-matching loss in `[0, 4]`.
pub fn training_loss(v: &GradVec, v_star: &GradVec) -> Result<f64> {
    Ok(training_loss_and_grad(v, v_star)?.0)
}

/// Loss and its gradient with respect to `v`.
pub fn training_loss_and_grad(v: &GradVec, v_star: &GradVec) -> Result<(f64, GradVec)> {
    let mut loss = 0.0;
    let mut grad = GradVec::ZERO;
    for (part, (a, b)) in [(v.v_r, v_star.v_r), (v.v_t, v_star.v_t)].into_iter().enumerate() {
        let (n, norm) = unit(a)?;
        let (u, _) = unit(b)?;
        let e = math::sub(u, n);
        let el = math::norm(e);
        loss += el;
        if el > 0.0 {
            // d|u - n|/da = -(I - n n^T) e / (|e| |a|)
            let ne = math::dot(n, e);
            let mut g = [0.0; 3];
            for i in 0..3 {
                g[i] = -(e[i] - n[i] * ne) / (el * norm);
            }
            if part == 0 {
                grad.v_r = g;
            } else {
                grad.v_t = g;
            }
        }
    }
    Ok((loss, grad))
}

/// Which mask weights the stencil evaluations of `L_N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPolicy {
    /// Project the mask once at the stencil center.
    HeldAtCenter,
    /// Project the mask at every stencil pose.
    PerEvaluation,
}

/// Everything needed to evaluate `L_N` at arbitrary poses for one fixed image.
pub struct FineProblem<'a> {
    pub nets: &'a FineNets,
    pub volume: PreparedVolume,
    pub mask: PreparedVolume,
    pub k: Intrinsics,
    pub e_f: FeatureMap,
    pub squared: bool,
}

impl<'a> FineProblem<'a> {
    /// Embeds `fixed` once.
    pub fn new(nets: &'a FineNets, volume: &Volume, mask: &VoxelMask, fixed: &Image, k: &Intrinsics) -> Result<Self> {
        volume.check_same_grid(mask)?;
        Ok(FineProblem {
            nets,
            volume: PreparedVolume::new(volume),
            mask: PreparedVolume::from_mask(mask),
            k: *k,
            e_f: nets.embed_fixed(fixed)?,
            squared: false,
        })
    }

    pub fn mask_weights(&self, pose: Pose) -> Result<Vec<f64>> {
        feature_mask(&self.mask.project_binary(pose, &self.k, 0.0), self.e_f.dims)
    }

    pub fn error_with(&self, pose: Pose, weights: &[f64]) -> Result<f64> {
        let e_m = self.nets.embed_moving(&self.volume.project(pose, &self.k))?;
        error_fn_weighted(&e_m, &self.e_f, weights, self.squared)
    }

    /// `L_N(pose)` with the mask projected at `pose`.
    pub fn error(&self, pose: Pose) -> Result<f64> {
        self.error_with(pose, &self.mask_weights(pose)?)
    }

    /// Central-difference gradient; `skip_rotation` leaves `V_r` at zero
    /// without evaluating it.
    pub fn pose_grad(&self, pose: Pose, h: FdStep, policy: MaskPolicy, skip_rotation: bool) -> Result<GradVec> {
        let center = match policy {
            MaskPolicy::HeldAtCenter => Some(self.mask_weights(pose)?),
            MaskPolicy::PerEvaluation => None,
        };
        let f = |q: Pose| match &center {
            Some(w) => self.error_with(q, w),
            None => self.error(q),
        };
        let mut g = [0.0; 6];
        for (i, gi) in g.iter_mut().enumerate() {
            if skip_rotation && i < 3 {
                continue;
            }
            let hi = h.for_param(i);
            *gi = (f(pose.perturbed(i, hi))? - f(pose.perturbed(i, -hi))?) / (2.0 * hi);
        }
        Ok(GradVec::from_array(g))
    }
}

/// `(V_r, V_t)` of `L_N` at `pose` (mask projected at every stencil pose).
pub fn pose_grad(nets: &FineNets, volume: &Volume, mask: &VoxelMask, pose: Pose, fixed: &Image, k: &Intrinsics, h: FdStep) -> Result<GradVec> {
    FineProblem::new(nets, volume, mask, fixed, k)?.pose_grad(pose, h, MaskPolicy::PerEvaluation, false)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InferenceSchedule {
    pub max_iters: usize,
    pub rot_freeze_iter: usize,
    pub step_rot_deg: f64,
    pub step_trans_mm: f64,
    /// Step multiplier after an accepted step; rejected steps halve.
    pub decay: f64,
    pub convergence_eps: f64,
    pub fd: FdStep,
    #[cfg_attr(feature = "serde", serde(skip, default = "default_policy"))]
    pub mask_policy: MaskPolicy,
}

#[cfg(feature = "serde")]
fn default_policy() -> MaskPolicy {
    MaskPolicy::HeldAtCenter
}

impl Default for InferenceSchedule {
    fn default() -> Self {
        InferenceSchedule {
            max_iters: 100,
            rot_freeze_iter: 30,
            step_rot_deg: 0.5,
            step_trans_mm: 0.5,
            decay: 0.95,
            convergence_eps: 1e-3,
            fd: FdStep::default(),
            mask_policy: MaskPolicy::HeldAtCenter,
        }
    }
}

impl InferenceSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rot_freeze_iter >= 1
            && (self.max_iters == 0 || self.rot_freeze_iter <= self.max_iters)
            && self.step_rot_deg > 0.0
            && self.step_trans_mm > 0.0
            && self.decay > 0.0
            && self.decay <= 1.0
            && self.convergence_eps > 0.0
            && self.fd.rot_deg > 0.0
            && self.fd.trans_mm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid inference schedule {:?}", self)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub iter: usize,
    pub pose: Pose,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineResult {
    pub pose: Pose,
    pub iterations: usize,
    /// Pose and `L_N` at the start and after every iteration.
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Accept-only-improving descent shared by the fine stage and the
/// optimization baselines. `grad(pose, iter)` returns the descent gradient
/// (zero rotation part once frozen); `loss(pose)` evaluates the objective.
pub(crate) fn descend(
    theta0: Pose,
    max_iters: usize,
    steps: (f64, f64),
    decay: f64,
    eps: f64,
    freeze_at: Option<usize>,
    mut loss: impl FnMut(Pose) -> Result<f64>,
    mut grad: impl FnMut(Pose, bool) -> Result<GradVec>,
) -> Result<(Pose, usize, Vec<TrajectoryPoint>)> {
    let mut pose = theta0;
    let mut current = loss(pose)?;
    let mut traj = vec![TrajectoryPoint { iter: 0, pose, loss: current }];
    let (mut s_rot, mut s_trans) = steps;
    let mut iters = 0;
    for it in 0..max_iters {
        iters = it + 1;
        let frozen = freeze_at.is_some_and(|f| it >= f);
        let g = grad(pose, frozen)?;
        let (nr, nt) = (math::norm(g.v_r), math::norm(g.v_t));
        let mut dir = GradVec::ZERO;
        if nr > 0.0 && !frozen {
            dir.v_r = math::scale(g.v_r, -1.0 / nr);
        }
        if nt > 0.0 {
            dir.v_t = math::scale(g.v_t, -1.0 / nt);
        }
        let candidate = pose.step(&dir, s_rot, s_trans);
        let cand_loss = if dir == GradVec::ZERO { f64::INFINITY } else { loss(candidate).unwrap_or(f64::INFINITY) };
        let mut converged = false;
        if cand_loss < current {
            let moved = geodesic_norm(pose, candidate, GeodesicWeights::default());
            pose = candidate;
            current = cand_loss;
            s_rot *= decay;
            s_trans *= decay;
            converged = moved < eps;
        } else {
            s_rot *= 0.5;
            s_trans *= 0.5;
        }
        traj.push(TrajectoryPoint { iter: it + 1, pose, loss: current });
        let rot_done = frozen || s_rot < eps;
        if converged || (rot_done && s_trans < eps) {
            break;
        }
    }
    Ok((pose, iters, traj))
}

/// Gradient descent on `L_N` from `theta0`, rotation frozen after
/// `rot_freeze_iter` iterations; only improving steps are taken.
pub fn register_iterative(
    nets: &FineNets,
    volume: &Volume,
    mask: &VoxelMask,
    fixed: &Image,
    theta0: Pose,
    sched: &InferenceSchedule,
    k: &Intrinsics,
) -> Result<FineResult> {
    sched.validate()?;
    let prob = FineProblem::new(nets, volume, mask, fixed, k)?;
    let (pose, iterations, trajectory) = descend(
        theta0,
        sched.max_iters,
        (sched.step_rot_deg, sched.step_trans_mm),
        sched.decay,
        sched.convergence_eps,
        Some(sched.rot_freeze_iter),
        |p| prob.error(p),
        |p, frozen| prob.pose_grad(p, sched.fd, sched.mask_policy, frozen),
    )?;
    Ok(FineResult { pose, iterations, trajectory })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTrainConfig {
    pub train: TrainConfig,
    /// Target poses.
    pub targets: PoseDistribution,
    /// Start poses are `target + offset` when set; otherwise an independent
    /// draw from `targets`.
    pub offsets: Option<PoseDistribution>,
    pub k: Intrinsics,
    pub fd: FdStep,
    pub grad_clip: Option<f64>,
    pub round_f32: bool,
}

impl FineTrainConfig {
    /// Batch 4, cyclic LR 1e-4..1e-3 every 100 steps, momentum 0.9.
    pub fn toy(seed: u64, iterations: usize) -> Self {
        FineTrainConfig {
            train: TrainConfig { batch_size: 4, iterations, lr_min: 1e-4, lr_max: 1e-3, cycle_half_steps: 100, momentum: 0.9, seed },
            targets: PoseDistribution::isotropic(10.0, 10.0),
            offsets: Some(PoseDistribution::isotropic(5.0, 5.0)),
            k: Intrinsics::toy(),
            fd: FdStep { rot_deg: 0.5, trans_mm: 0.5 },
            grad_clip: Some(1.0),
            round_f32: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTrainOutcome {
    pub loss_curve: Vec<f64>,
    /// Samples redrawn because a gradient part vanished.
    pub skipped: usize,
}

/// Loss of one sample and its parameter gradient (accumulated into `grads`).
fn train_sample(
    nets: &FineNets,
    pv: &PreparedVolume,
    weights: &[f64],
    fixed: &Image,
    theta: Pose,
    target: Pose,
    cfg: &FineTrainConfig,
    scale: f64,
    grads: &mut GradStore,
    stats: &mut Vec<(ParamId, ParamId, Vec<f64>, Vec<f64>)>,
) -> Result<f64> {
    let p = &nets.params;
    let mut tf = Tape::new(p);
    let ef = nets.fixed.forward_tape(&mut tf, fixed, Mode::Train)?;
    let ef_val = tf.value(ef).clone();
    let mut tapes = Vec::with_capacity(12);
    let mut values = [0.0; 12];
    for i in 0..6 {
        for (j, sign) in [1.0, -1.0].into_iter().enumerate() {
            let pose = theta.perturbed(i, sign * cfg.fd.for_param(i));
            let mut t = Tape::new(p);
            let em = nets.moving.forward_tape(&mut t, &pv.project(pose, &cfg.k), Mode::Train)?;
            let leaf = t.input(ef_val.clone())?;
            let l = t.masked_abs_mean(em, leaf, weights, false)?;
            values[2 * i + j] = t.value(l).data()[0];
            tapes.push((t, l, leaf));
        }
    }
    let mut v = [0.0; 6];
    for i in 0..6 {
        v[i] = (values[2 * i] - values[2 * i + 1]) / (2.0 * cfg.fd.for_param(i));
    }
    let v_star = geodesic_gradient(theta, target);
    let (loss, dv) = training_loss_and_grad(&GradVec::from_array(v), &v_star)?;
    let dv = dv.to_array();
    let mut g_ef = Tensor::zeros(ef_val.shape());
    for (n, (t, l, leaf)) in tapes.iter().enumerate() {
        let i = n / 2;
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        let seed = Tensor::scalar(scale * sign * dv[i] / (2.0 * cfg.fd.for_param(i)));
        let g = t.backward(&[(*l, &seed)], grads)?;
        if let Some(gl) = &g[leaf.index()] {
            g_ef.add_assign(gl);
        }
        stats.extend_from_slice(t.batch_stats());
    }
    tf.backward(&[(ef, &g_ef)], grads)?;
    stats.extend_from_slice(tf.batch_stats());
    Ok(loss)
}

/// Trains both encoders in place. Samples whose stencil gradient (or target
/// direction) has a vanishing part are redrawn and counted.
pub fn train_finereg(nets: &mut FineNets, source: &dyn PhantomSource, cfg: &FineTrainConfig, observe: &mut dyn FnMut(usize, f64)) -> Result<FineTrainOutcome> {
    cfg.train.validate()?;
    cfg.targets.validate()?;
    if let Some(o) = &cfg.offsets {
        o.validate()?;
    }
    if nets.cfg.kind == EncoderKind::Identity {
        return Err(Error::InvalidConfig("identity encoder has nothing to train".into()));
    }
    if cfg.k.det_px != nets.cfg.img_dims {
        return Err(Error::InvalidConfig(format!("detector {:?} differs from encoder input {:?}", cfg.k.det_px, nets.cfg.img_dims)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let sched = cfg.train.schedule();
    let mut opt = Sgd::new(&nets.params, cfg.train.momentum);
    let mut curve = Vec::with_capacity(cfg.train.iterations);
    let mut skipped = 0;
    let kb = cfg.train.batch_size;
    let dims = nets.cfg.output_dims();
    for it in 0..cfg.train.iterations {
        let (volume, mask) = source.phantom(it as u64)?;
        let pv = PreparedVolume::new(&volume);
        let pm = PreparedVolume::from_mask(&mask);
        let mut grads = nets.params.zero_grads();
        let mut stats = Vec::new();
        let mut loss = 0.0;
        let mut done = 0;
        let mut attempts = 0;
        while done < kb {
            attempts += 1;
            if attempts > 50 * kb {
                return Err(Error::ZeroGradient);
            }
            let (theta, target) = match &cfg.offsets {
                Some(off) => {
                    let target = cfg.targets.sample(&mut rng);
                    let d = off.sample(&mut rng).to_array();
                    let t = target.to_array();
                    (Pose::from_array(core::array::from_fn(|i| t[i] + d[i])), target)
                }
                None => crate::eval::sample_pose_pair(&cfg.targets, &mut rng),
            };
            let fixed = pv.project(target, &cfg.k);
            let weights = feature_mask(&pm.project_binary(theta, &cfg.k, 0.0), dims)?;
            if weights.iter().sum::<f64>() == 0.0 || !crate::rtpi::has_structure(&fixed) {
                skipped += 1;
                continue;
            }
            let mut g = nets.params.zero_grads();
            let mut st = Vec::new();
            match train_sample(nets, &pv, &weights, &fixed, theta, target, cfg, 1.0 / kb as f64, &mut g, &mut st) {
                Ok(l) => {
                    loss += l / kb as f64;
                    grads.add_assign(&g);
                    stats.extend(st);
                    done += 1;
                }
                Err(Error::ZeroGradient) | Err(Error::EmptyMask) => skipped += 1,
                Err(e) => return Err(fault_at(it)(e)),
            }
        }
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteFault { iteration: it });
        }
        update_running_stats(&mut nets.params, &stats, BN_MOMENTUM);
        clip_grads(&mut grads, cfg.grad_clip);
        opt.step(&mut nets.params, &grads, sched.lr(it));
        if cfg.round_f32 {
            nets.params.round_to_f32();
        }
        curve.push(loss);
        observe(it, loss);
    }
    Ok(FineTrainOutcome { loss_curve: curve, skipped })
}

/// Describes the encoder for logs.
pub fn describe(cfg: &EncoderConfig) -> String {
    let [h, w, c] = cfg.output_dims();
    format!("{} encoder, {}x{} input -> {}x{}x{}", cfg.kind.name(), cfg.img_dims[0], cfg.img_dims[1], h, w, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fm(data: &[f64]) -> FeatureMap {
        FeatureMap::new([1, data.len(), 1], data.to_vec()).unwrap()
    }

    fn mask(data: &[u8]) -> MaskImage {
        MaskImage::new([data.len(), 1], data.to_vec()).unwrap()
    }

    #[test]
    fn error_fn_examples() {
        let a = fm(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(error_fn(&a, &a, &mask(&[1, 1, 1, 1, 0])).unwrap(), 0.0);
        let b = fm(&[3.0, 2.0, 3.0, 4.0, 9.0]);
        assert_eq!(error_fn(&a, &b, &mask(&[1, 1, 1, 1, 0])).unwrap(), 0.5);
        assert_eq!(error_fn(&a, &b, &mask(&[0; 5])), Err(Error::EmptyMask));
    }

    #[test]
    fn training_loss_examples() {
        let v = GradVec { v_r: [1.0, 2.0, 3.0], v_t: [-1.0, 0.5, 2.0] };
        assert_eq!(training_loss(&v, &v).unwrap(), 0.0);
        let anti = GradVec { v_r: [-1.0, -2.0, -3.0], ..v };
        assert_eq!(training_loss(&anti, &v).unwrap(), 2.0);
        let a = GradVec { v_r: [1.0, 0.0, 0.0], v_t: [0.0, 1.0, 0.0] };
        let b = GradVec { v_r: [0.0, 1.0, 0.0], v_t: [0.0, 0.0, 1.0] };
        assert_eq!(training_loss(&a, &b).unwrap(), 2.0 * core::f64::consts::SQRT_2);
        let z = GradVec { v_r: [0.0; 3], ..v };
        assert_eq!(training_loss(&z, &v), Err(Error::ZeroGradient));
        assert_eq!(training_loss(&v, &z), Err(Error::ZeroGradient));
    }

    #[test]
    fn training_loss_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let v = GradVec::from_array(core::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let s = GradVec::from_array(core::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let (_, g) = training_loss_and_grad(&v, &s).unwrap();
            let a = v.to_array();
            for i in 0..6 {
                let h = 1e-6;
                let mut p = a;
                p[i] += h;
                let mut m = a;
                m[i] -= h;
                let fd = (training_loss(&GradVec::from_array(p), &s).unwrap() - training_loss(&GradVec::from_array(m), &s).unwrap()) / (2.0 * h);
                assert!((fd - g.to_array()[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let img = Image::from_fn([32, 32], |x, y| ((x * 7 + y * 3) % 11) as f64);
        for kind in [EncoderKind::Identity, EncoderKind::Plain, EncoderKind::Composite] {
            let cfg = EncoderConfig { img_dims: [32, 32], ..EncoderConfig::toy(kind) };
            let nets = FineNets::new(cfg, 1).unwrap();
            let a = nets.embed_moving(&img).unwrap();
            assert_eq!(a.dims, cfg.output_dims());
            assert_eq!(a, nets.embed_moving(&img).unwrap());
            assert_eq!(nets.embed_fixed(&img).unwrap().dims, cfg.output_dims());
            assert!(matches!(nets.embed_moving(&Image::zeros([16, 16])), Err(Error::ShapeMismatch(_))));
        }
        let cfg = EncoderConfig { img_dims: [32, 24], ..EncoderConfig::toy(EncoderKind::Composite) };
        let nets = FineNets::new(cfg, 1).unwrap();
        assert_eq!(nets.embed_moving(&Image::from_fn([32, 24], |x, y| (x * y) as f64)).unwrap().dims, [6, 8, 8]);
    }

    /// Gives the zero-initialized heads random weights so the bodies matter.
    pub(super) fn perturb_heads(nets: &mut FineNets, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ParamId> = nets.params.ids().filter(|id| nets.params.name(*id).contains(".head")).collect();
        assert!(!ids.is_empty());
        for id in ids {
            for v in nets.params.value_mut(id).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn untrained_encoders_output_the_pooled_input() {
        for kind in [EncoderKind::Plain, EncoderKind::Composite] {
            let nets = FineNets::new(EncoderConfig { img_dims: [32, 32], ..EncoderConfig::toy(kind) }, 4).unwrap();
            let img = Image::from_fn([32, 32], |x, y| (x * x + 3 * y) as f64);
            let e = nets.embed_moving(&img).unwrap();
            assert_eq!(e, nets.embed_fixed(&img).unwrap());
            let z = img.standardized();
            let [h, w, c] = e.dims;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let mut m = 0.0;
                        for dy in 0..4 {
                            for dx in 0..4 {
                                m += z.get(4 * x + dx, 4 * y + dy) / 16.0;
                            }
                        }
                        assert!((e.data[(ch * h + y) * w + x] - m).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn composite_connections_matter() {
        let cfg = EncoderConfig { img_dims: [32, 32], ..EncoderConfig::toy(EncoderKind::Composite) };
        let mut nets = FineNets::new(cfg, 2).unwrap();
        perturb_heads(&mut nets, 1);
        let img = Image::from_fn([32, 32], |x, y| math::sin(x as f64 * 0.3) + math::cos(y as f64 * 0.2));
        let before = nets.embed_moving(&img).unwrap();
        for id in nets.moving.composite_connection_params() {
            nets.params.value_mut(id).fill(0.0);
        }
        assert_ne!(before, nets.embed_moving(&img).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut nets = FineNets::new(EncoderConfig { img_dims: [32, 32], ..EncoderConfig::toy(EncoderKind::Composite) }, 3).unwrap();
        nets.params.round_to_f32();
        let back = FineNets::from_checkpoint(&nets.checkpoint()).unwrap();
        assert_eq!(back.params, nets.params);
        assert_eq!(back.cfg, nets.cfg);
    }
}
