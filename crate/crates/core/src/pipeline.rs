//! Registration strategies: FD-gradient optimization on a classical metric,
//! the two-stage learned pipeline, and the learned pipeline followed by
//! optimization. Every strategy minimizes an internal loss (similarities are
//! negated) and only takes improving steps.
//!
//! `wall_time_s` is left at 0 here; callers with a clock fill it in.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::finereg::{descend, register_iterative, FineNets, InferenceSchedule, TrajectoryPoint};
use crate::image::Image;
use crate::pose::Pose;
use crate::projector::{FdStep, Intrinsics, PreparedVolume};
use crate::rtpi::{rtpi_forward, RtpiNet};
use crate::similarity::MetricKind;
use crate::volume::{Volume, VoxelMask};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptConfig {
    pub metric: MetricKind,
    pub step_rot_deg: f64,
    pub step_trans_mm: f64,
    /// Step multiplier after an accepted step; rejected steps halve.
    pub decay: f64,
    pub max_iters: usize,
    pub convergence_eps: f64,
    pub fd: FdStep,
    /// Number of starts; start 0 is `theta0`, later ones are jittered.
    pub multi_start: usize,
    pub jitter_rot_deg: f64,
    pub jitter_trans_mm: f64,
    /// Extra jittered attempts when a start hits a degenerate metric.
    pub max_restarts: usize,
    pub seed: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            metric: MetricKind::GradCorr,
            step_rot_deg: 0.5,
            step_trans_mm: 0.5,
            decay: 0.95,
            max_iters: 100,
            convergence_eps: 1e-3,
            fd: FdStep::default(),
            multi_start: 1,
            jitter_rot_deg: 2.0,
            jitter_trans_mm: 2.0,
            max_restarts: 3,
            seed: 0,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.step_rot_deg > 0.0
            && self.step_trans_mm > 0.0
            && self.decay > 0.0
            && self.decay <= 1.0
            && self.max_iters >= 1
            && self.convergence_eps > 0.0
            && self.fd.rot_deg > 0.0
            && self.fd.trans_mm > 0.0
            && self.multi_start >= 1
            && self.jitter_rot_deg >= 0.0
            && self.jitter_trans_mm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(alloc::format!("invalid optimizer config {:?}", self)))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RegistrationResult {
    pub init_pose: Pose,
    pub final_pose: Pose,
    /// Iterations of the last stage.
    pub iterations: usize,
    pub wall_time_s: f64,
    /// `(iter, loss)` of the last stage, starting at its initial pose.
    pub metric_trace: Vec<(usize, f64)>,
    /// Starts abandoned because the metric was degenerate.
    pub restarts: usize,
    /// Pose after each stage, in order.
    pub stages: Vec<(String, Pose)>,
}

fn trace(traj: &[TrajectoryPoint]) -> Vec<(usize, f64)> {
    traj.iter().map(|p| (p.iter, p.loss)).collect()
}

fn jitter(theta: Pose, cfg: &OptConfig, rng: &mut ChaCha8Rng) -> Pose {
    let a = theta.to_array();
    Pose::from_array(core::array::from_fn(|i| {
        let s = if i < 3 { cfg.jitter_rot_deg } else { cfg.jitter_trans_mm };
        a[i] + if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 }
    }))
}

/// Accept-only-improving descent of `loss` with optional rotation freezing,
/// using central differences for the gradient.
pub fn descend_fd(
    theta0: Pose,
    loss: &dyn Fn(Pose) -> Result<f64>,
    steps: (f64, f64),
    decay: f64,
    max_iters: usize,
    eps: f64,
    fd: FdStep,
    freeze_at: Option<usize>,
) -> Result<(Pose, usize, Vec<TrajectoryPoint>)> {
    descend(theta0, max_iters, steps, decay, eps, freeze_at, loss, |p, frozen| {
        let mut g = [0.0; 6];
        for (i, gi) in g.iter_mut().enumerate() {
            if frozen && i < 3 {
                continue;
            }
            let h = fd.for_param(i);
            *gi = (loss(p.perturbed(i, h))? - loss(p.perturbed(i, -h))?) / (2.0 * h);
        }
        Ok(crate::pose::GradVec::from_array(g))
    })
}

/// FD gradient descent on `cfg.metric`, best of `multi_start` starts.
pub fn register_opt(volume: &Volume, fixed: &Image, theta0: Pose, cfg: &OptConfig, k: &Intrinsics) -> Result<RegistrationResult> {
    register_opt_prepared(&PreparedVolume::new(volume), fixed, theta0, cfg, k)
}

pub fn register_opt_prepared(pv: &PreparedVolume, fixed: &Image, theta0: Pose, cfg: &OptConfig, k: &Intrinsics) -> Result<RegistrationResult> {
    cfg.validate()?;
    let metric = cfg.metric;
    let loss = |p: Pose| metric.loss(fixed, &pv.project(p, k));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, Pose, usize, Vec<TrajectoryPoint>)> = None;
    let mut restarts = 0;
    let mut last_err = None;
    for s in 0..cfg.multi_start {
        let mut start = if s == 0 { theta0 } else { jitter(theta0, cfg, &mut rng) };
        let mut attempts = 0;
        loop {
            match descend_fd(start, &loss, (cfg.step_rot_deg, cfg.step_trans_mm), cfg.decay, cfg.max_iters, cfg.convergence_eps, cfg.fd, None) {
                Ok((pose, iters, traj)) => {
                    let l = traj.last().map_or(f64::INFINITY, |t| t.loss);
                    if best.as_ref().is_none_or(|b| l < b.0) {
                        best = Some((l, pose, iters, traj));
                    }
                    break;
                }
                Err(e @ Error::DegenerateInput(_)) if attempts < cfg.max_restarts => {
                    last_err = Some(e);
                    restarts += 1;
                    attempts += 1;
                    start = jitter(theta0, cfg, &mut rng);
                }
                Err(e) => {
                    last_err = Some(e);
                    break;
                }
            }
        }
    }
    let (_, pose, iterations, traj) = match best {
        Some(b) => b,
        None => return Err(last_err.unwrap_or(Error::DegenerateInput("no start succeeded"))),
    };
    Ok(RegistrationResult {
        init_pose: theta0,
        final_pose: pose,
        iterations,
        wall_time_s: 0.0,
        metric_trace: trace(&traj),
        restarts,
        stages: vec![("opt".to_string(), pose)],
    })
}

/// Fine stage on an image-space metric instead of the embedded error, with
/// the same schedule and rotation freeze.
pub fn register_image_space(volume: &Volume, fixed: &Image, theta0: Pose, metric: MetricKind, sched: &InferenceSchedule, k: &Intrinsics) -> Result<RegistrationResult> {
    sched.validate()?;
    let pv = PreparedVolume::new(volume);
    let loss = |p: Pose| metric.loss(fixed, &pv.project(p, k));
    let (pose, iterations, traj) = descend_fd(
        theta0,
        &loss,
        (sched.step_rot_deg, sched.step_trans_mm),
        sched.decay,
        sched.max_iters,
        sched.convergence_eps,
        sched.fd,
        Some(sched.rot_freeze_iter),
    )?;
    Ok(RegistrationResult {
        init_pose: theta0,
        final_pose: pose,
        iterations,
        wall_time_s: 0.0,
        metric_trace: trace(&traj),
        restarts: 0,
        stages: vec![("fine".to_string(), pose)],
    })
}

/// Fine registration from a given start (no initialization network).
pub fn register_fine_from(
    nets: &FineNets,
    volume: &Volume,
    mask: &VoxelMask,
    fixed: &Image,
    theta0: Pose,
    sched: &InferenceSchedule,
    k: &Intrinsics,
) -> Result<RegistrationResult> {
    let r = register_iterative(nets, volume, mask, fixed, theta0, sched, k)?;
    Ok(RegistrationResult {
        init_pose: theta0,
        final_pose: r.pose,
        iterations: r.iterations,
        wall_time_s: 0.0,
        metric_trace: trace(&r.trajectory),
        restarts: 0,
        stages: vec![("fine".to_string(), r.pose)],
    })
}

/// Initialization network, then fine registration from its output.
pub fn register_sopi(
    rtpi: &RtpiNet,
    nets: &FineNets,
    volume: &Volume,
    mask: &VoxelMask,
    fixed: &Image,
    sched: &InferenceSchedule,
    k: &Intrinsics,
) -> Result<RegistrationResult> {
    let init = rtpi_forward(rtpi, volume, fixed)?.pose;
    let mut r = register_fine_from(nets, volume, mask, fixed, init, sched, k)?;
    r.stages.insert(0, ("rtpi".to_string(), init));
    Ok(r)
}

/// [`register_sopi`] followed by [`register_opt`] from its result.
/// `opt.max_iters == 0` returns the two-stage result unchanged.
#[allow(clippy::too_many_arguments)]
pub fn register_sopi_plus_opt(
    rtpi: &RtpiNet,
    nets: &FineNets,
    volume: &Volume,
    mask: &VoxelMask,
    fixed: &Image,
    sched: &InferenceSchedule,
    opt: &OptConfig,
    k: &Intrinsics,
) -> Result<RegistrationResult> {
    let sopi = register_sopi(rtpi, nets, volume, mask, fixed, sched, k)?;
    if opt.max_iters == 0 {
        return Ok(sopi);
    }
    let o = register_opt(volume, fixed, sopi.final_pose, opt, k)?;
    let mut stages = sopi.stages;
    stages.push(("opt".to_string(), o.final_pose));
    Ok(RegistrationResult { init_pose: sopi.init_pose, stages, ..o })
}
