//! Line-oriented `key=value` settings with typed lookups.
//!
//! Keys not read by the command are reported, so typos fail loudly.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use xreg_core::eval::PoseDistribution;
use xreg_core::finereg::{EncoderConfig, EncoderKind, FineTrainConfig, InferenceSchedule, MaskPolicy};
use xreg_core::nn::NormSpec;
use xreg_core::pipeline::OptConfig;
use xreg_core::rtpi::{Regularizer, RtpiConfig, RtpiTrainConfig};
use xreg_core::similarity::MetricKind;
use xreg_core::{FdStep, Intrinsics, PhantomSpec};

use crate::error::{io_err, Error, Result};
use crate::formats::parse_kv;

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl Settings {
    pub fn from_text(text: &str) -> Result<Settings> {
        Ok(Settings { values: parse_kv(text).map_err(Error::Config)?, used: RefCell::default() })
    }

    pub fn load(path: &Path) -> Result<Settings> {
        Settings::from_text(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Applies `key=value` overrides on top of the file values.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{}` is not key=value", o)))?;
            self.values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(())
    }

    pub fn set_default(&mut self, key: &str, value: impl ToString) {
        self.values.entry(key.to_string()).or_insert_with(|| value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config(format!("cannot parse `{}` = `{}`", key, v))),
        }
    }

    fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("1" | "true" | "on" | "yes") => Ok(true),
            Some("0" | "false" | "off" | "no") => Ok(false),
            Some(v) => Err(Error::Config(format!("`{}` = `{}` is not a boolean", key, v))),
        }
    }

    fn get_list<T: FromStr, const N: usize>(&self, key: &str, default: [T; N]) -> Result<[T; N]> {
        let Some(v) = self.raw(key) else { return Ok(default) };
        let bad = || Error::Config(format!("`{}` needs {} space-separated values", key, N));
        let parts: Vec<T> = v.split_whitespace().map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        parts.try_into().map_err(|_| bad())
    }

    /// Errors on keys nobody asked for.
    pub fn check_unused(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self.values.keys().filter(|k| !used.contains(*k)).map(String::as_str).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }

    /// Canonical `key=value` text of every setting, sorted.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{}={}\n", k, v)).collect()
    }

    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.canonical().as_bytes());
        d.iter().map(|b| format!("{:02x}", b)).collect()
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}

fn metric(s: &Settings, key: &str, default: MetricKind) -> Result<MetricKind> {
    match s.raw(key) {
        None => Ok(default),
        Some(v) => MetricKind::parse(v).ok_or_else(|| Error::Config(format!("unknown metric `{}`", v))),
    }
}

fn norm(s: &Settings, key: &str, default: NormSpec) -> Result<NormSpec> {
    match s.raw(key) {
        None => Ok(default),
        Some(v) => NormSpec::parse(v).ok_or_else(|| Error::Config(format!("unknown norm `{}`", v))),
    }
}

pub fn phantom_spec(s: &Settings) -> Result<PhantomSpec> {
    let d = PhantomSpec::default();
    Ok(PhantomSpec {
        dims: s.get_list("phantom.dims", d.dims)?,
        spacing_mm: s.get("phantom.spacing_mm", d.spacing_mm)?,
        n_vertebrae: s.get("phantom.n_vertebrae", d.n_vertebrae)?,
        body_radius_mm: s.get("phantom.body_radius_mm", d.body_radius_mm)?,
        body_height_mm: s.get("phantom.body_height_mm", d.body_height_mm)?,
        gap_mm: s.get("phantom.gap_mm", d.gap_mm)?,
        process_size_mm: s.get("phantom.process_size_mm", d.process_size_mm)?,
        bone_intensity: s.get("phantom.bone_intensity", d.bone_intensity)?,
        tissue_intensity: s.get("phantom.tissue_intensity", d.tissue_intensity)?,
        noise_sigma: s.get("phantom.noise_sigma", d.noise_sigma)?,
        seed: s.get("phantom.seed", d.seed)?,
    })
}

pub fn intrinsics(s: &Settings) -> Result<Intrinsics> {
    let d = Intrinsics::toy();
    let k = Intrinsics {
        sdd_mm: s.get("k.sdd_mm", d.sdd_mm)?,
        siso_mm: s.get("k.siso_mm", d.siso_mm)?,
        det_px: s.get_list("k.det_px", d.det_px)?,
        px_spacing_mm: s.get("k.px_spacing_mm", d.px_spacing_mm)?,
        step_mm: s.get("k.step_mm", d.step_mm)?,
    };
    k.validate()?;
    Ok(k)
}

fn fd(s: &Settings, prefix: &str, d: FdStep) -> Result<FdStep> {
    Ok(FdStep { rot_deg: s.get(&format!("{}.fd_rot_deg", prefix), d.rot_deg)?, trans_mm: s.get(&format!("{}.fd_trans_mm", prefix), d.trans_mm)? })
}

pub fn schedule(s: &Settings) -> Result<InferenceSchedule> {
    let d = InferenceSchedule::default();
    let sched = InferenceSchedule {
        max_iters: s.get("fine.max_iters", d.max_iters)?,
        rot_freeze_iter: s.get("fine.rot_freeze_iter", d.rot_freeze_iter)?,
        step_rot_deg: s.get("fine.step_rot_deg", d.step_rot_deg)?,
        step_trans_mm: s.get("fine.step_trans_mm", d.step_trans_mm)?,
        decay: s.get("fine.decay", d.decay)?,
        convergence_eps: s.get("fine.convergence_eps", d.convergence_eps)?,
        fd: fd(s, "fine", d.fd)?,
        mask_policy: if s.get_bool("fine.mask_per_evaluation", false)? { MaskPolicy::PerEvaluation } else { MaskPolicy::HeldAtCenter },
    };
    sched.validate()?;
    Ok(sched)
}

pub fn opt_config(s: &Settings) -> Result<OptConfig> {
    let d = OptConfig::default();
    let cfg = OptConfig {
        metric: metric(s, "opt.metric", d.metric)?,
        step_rot_deg: s.get("opt.step_rot_deg", d.step_rot_deg)?,
        step_trans_mm: s.get("opt.step_trans_mm", d.step_trans_mm)?,
        decay: s.get("opt.decay", d.decay)?,
        max_iters: s.get("opt.max_iters", d.max_iters)?,
        convergence_eps: s.get("opt.convergence_eps", d.convergence_eps)?,
        fd: fd(s, "opt", d.fd)?,
        multi_start: s.get("opt.multi_start", d.multi_start)?,
        jitter_rot_deg: s.get("opt.jitter_rot_deg", d.jitter_rot_deg)?,
        jitter_trans_mm: s.get("opt.jitter_trans_mm", d.jitter_trans_mm)?,
        max_restarts: s.get("opt.max_restarts", d.max_restarts)?,
        seed: s.get("opt.seed", d.seed)?,
    };
    if cfg.max_iters > 0 {
        cfg.validate()?;
    }
    Ok(cfg)
}

/// Pose distribution under `prefix`: `.rot_sigma_deg` and `.trans_sigma_mm`
/// (one value for all axes or three).
pub fn pose_distribution(s: &Settings, prefix: &str, d: PoseDistribution) -> Result<PoseDistribution> {
    let three = |key: &str, d: [f64; 3]| -> Result<[f64; 3]> {
        match s.raw(key) {
            None => Ok(d),
            Some(v) => {
                let parts: Vec<f64> = v.split_whitespace().map(|x| x.parse().map_err(|_| Error::Config(format!("bad `{}`", key)))).collect::<Result<_>>()?;
                match parts[..] {
                    [a] => Ok([a; 3]),
                    [a, b, c] => Ok([a, b, c]),
                    _ => Err(Error::Config(format!("`{}` needs 1 or 3 values", key))),
                }
            }
        }
    };
    let dist = PoseDistribution {
        rot_sigma_deg: three(&format!("{}.rot_sigma_deg", prefix), d.rot_sigma_deg)?,
        trans_sigma_mm: three(&format!("{}.trans_sigma_mm", prefix), d.trans_sigma_mm)?,
    };
    dist.validate()?;
    Ok(dist)
}

pub fn rtpi_config(s: &Settings) -> Result<RtpiConfig> {
    let d = RtpiConfig::toy();
    let cfg = RtpiConfig {
        vol_dims: s.get_list("rtpi.vol_dims", d.vol_dims)?,
        img_dims: s.get_list("rtpi.img_dims", d.img_dims)?,
        vol_channels: s.get_list("rtpi.vol_channels", d.vol_channels)?,
        img_channels: s.get_list("rtpi.img_channels", d.img_channels)?,
        trunk_channels: s.get("rtpi.trunk_channels", d.trunk_channels)?,
        res_blocks: s.get("rtpi.res_blocks", d.res_blocks)?,
        norm: norm(s, "rtpi.norm", d.norm)?,
        out_scale: s.get_list("rtpi.out_scale", d.out_scale)?,
        alpha: s.get("rtpi.alpha", d.alpha)?,
        beta: s.get("rtpi.beta", d.beta)?,
        lambda: s.get("rtpi.lambda", d.lambda)?,
        squared_mse: s.get_bool("rtpi.squared_mse", d.squared_mse)?,
        regularizer: if s.get_bool("rtpi.weight_decay", d.regularizer == Regularizer::Weights)? { Regularizer::Weights } else { Regularizer::Pose },
        fd: fd(s, "rtpi", d.fd)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn rtpi_train_config(s: &Settings) -> Result<RtpiTrainConfig> {
    let d = RtpiTrainConfig::toy(s.get("train.seed", 0)?);
    let clip: f64 = s.get("train.grad_clip", d.grad_clip.unwrap_or(0.0))?;
    let cfg = RtpiTrainConfig {
        train: train_config(s, d.train)?,
        poses: pose_distribution(s, "train.poses", d.poses)?,
        k: intrinsics(s)?,
        grad_clip: (clip > 0.0).then_some(clip),
        round_f32: s.get_bool("train.round_f32", d.round_f32)?,
    };
    Ok(cfg)
}

fn train_config(s: &Settings, d: xreg_core::nn::TrainConfig) -> Result<xreg_core::nn::TrainConfig> {
    let t = xreg_core::nn::TrainConfig {
        batch_size: s.get("train.batch_size", d.batch_size)?,
        iterations: s.get("train.iterations", d.iterations)?,
        lr_min: s.get("train.lr_min", d.lr_min)?,
        lr_max: s.get("train.lr_max", d.lr_max)?,
        cycle_half_steps: s.get("train.cycle_half_steps", d.cycle_half_steps)?,
        momentum: s.get("train.momentum", d.momentum)?,
        seed: d.seed,
    };
    t.validate()?;
    Ok(t)
}

pub fn encoder_config(s: &Settings) -> Result<EncoderConfig> {
    let kind = match s.raw("encoder.kind") {
        None => EncoderKind::Composite,
        Some(v) => EncoderKind::parse(v).ok_or_else(|| Error::Config(format!("unknown encoder kind `{}`", v)))?,
    };
    let d = EncoderConfig::toy(kind);
    let cfg = EncoderConfig {
        kind,
        img_dims: s.get_list("encoder.img_dims", d.img_dims)?,
        stem_channels: s.get("encoder.stem_channels", d.stem_channels)?,
        channels: s.get("encoder.channels", d.channels)?,
        norm: norm(s, "encoder.norm", d.norm)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn fine_train_config(s: &Settings) -> Result<FineTrainConfig> {
    let d = FineTrainConfig::toy(s.get("train.seed", 0)?, 300);
    let clip: f64 = s.get("train.grad_clip", d.grad_clip.unwrap_or(0.0))?;
    let offsets = if s.get_bool("train.independent_poses", d.offsets.is_none())? {
        None
    } else {
        Some(pose_distribution(s, "train.offsets", d.offsets.unwrap_or(PoseDistribution::isotropic(5.0, 5.0)))?)
    };
    Ok(FineTrainConfig {
        train: train_config(s, d.train)?,
        targets: pose_distribution(s, "train.poses", d.targets)?,
        offsets,
        k: intrinsics(s)?,
        fd: fd(s, "train", d.fd)?,
        grad_clip: (clip > 0.0).then_some(clip),
        round_f32: s.get_bool("train.round_f32", d.round_f32)?,
    })
}

pub fn workers(s: &Settings) -> Result<usize> {
    let default = std::thread::available_parallelism().map_or(1, |n| n.get());
    Ok(s.get("workers", default)?.max(1))
}

pub fn timing(s: &Settings) -> Result<bool> {
    s.get_bool("timing", true)
}
