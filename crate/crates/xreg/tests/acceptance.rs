//! Acceptance run: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL ...` line to stderr (not captured by the harness).
//! Tests take a global lock so that wall-clock budgets are measured alone.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use common::*;
use rand::Rng;
use xreg::cli::main_with_args;
use xreg::exec::Threaded;
use xreg::study::{read_rows, run_study, Method, StudyContext};
use xreg_core::eval::{sample_pose_pair, PoseDistribution};
use xreg_core::finereg::{
    error_fn, pose_grad, register_iterative, train_finereg, training_loss, EncoderConfig, EncoderKind, FeatureMap, FineNets,
    FineTrainConfig, InferenceSchedule,
};
use xreg_core::math::{mat3_det, mat3_mul, Mat3};
use xreg_core::nn::gradcheck::grad_check;
use xreg_core::nn::{Conv, ConvBlock, Layout, Linear, Mode, Norm, NormSpec, Params, ResidualBlock, Tensor};
use xreg_core::pose::{
    euler_to_matrix, geodesic_distance, geodesic_gradient, geodesic_norm, matrix_to_pose, orthonormality_error, GeodesicWeights,
};
use xreg_core::projector::{project, project_with, FdStep};
use xreg_core::rtpi::{rtpi_forward, train_rtpi, RtpiConfig, RtpiNet, RtpiTrainConfig};
use xreg_core::similarity::{grad_corr, grad_diff, local_ncc, ncc, ngi};
use xreg_core::volume::{centered_origin, PhantomSource};
use xreg_core::{Error, GradVec, Intrinsics, MaskImage, Mat4, PhantomSpec, Pose, Volume};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: &str, pass: bool, detail: String) {
    let line = format!("criterion {}: {} {}\n", n, if pass { "PASS" } else { "FAIL" }, detail);
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn finish(n: &str, checks: &[(&str, bool)], detail: String) {
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(n, failed.is_empty(), if failed.is_empty() { detail } else { format!("{} failed: {}", detail, failed.join(", ")) });
    assert!(failed.is_empty(), "criterion {} failed: {}", n, failed.join(", "));
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---- shared trained networks ----

const RTPI_SEED: u64 = 3;
const FINE_SEED: u64 = 5;

struct Trained<T> {
    net: T,
    curve: Vec<f64>,
    secs: f64,
}

fn rtpi_trained() -> &'static Trained<RtpiNet> {
    static NET: OnceLock<Trained<RtpiNet>> = OnceLock::new();
    NET.get_or_init(|| {
        let t = Instant::now();
        let mut net = RtpiNet::new(RtpiConfig::toy(), RTPI_SEED).unwrap();
        let curve = train_rtpi(&mut net, &PhantomSpec::default(), &RtpiTrainConfig::toy(RTPI_SEED), &mut |_, _| {}).unwrap();
        Trained { net, curve, secs: t.elapsed().as_secs_f64() }
    })
}

fn fine_trained() -> &'static Trained<FineNets> {
    static NETS: OnceLock<Trained<FineNets>> = OnceLock::new();
    NETS.get_or_init(|| {
        let t = Instant::now();
        let mut nets = FineNets::new(EncoderConfig::toy(EncoderKind::Composite), FINE_SEED).unwrap();
        let o = train_finereg(&mut nets, &PhantomSpec::default(), &FineTrainConfig::toy(FINE_SEED, 300), &mut |_, _| {}).unwrap();
        Trained { net: nets, curve: o.loss_curve, secs: t.elapsed().as_secs_f64() }
    })
}

// ---- 1 ----

#[test]
fn c01_pose_math_suite() {
    let _g = serial();
    let t = Instant::now();
    let mut r = rng(101);
    let (mut orth, mut det, mut round) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let p = Pose::new(
            r.random_range(-180.0..180.0),
            r.random_range(-85.0..=85.0),
            r.random_range(-180.0..180.0),
            r.random_range(-500.0..500.0),
            r.random_range(-500.0..500.0),
            r.random_range(-500.0..500.0),
        );
        let m = euler_to_matrix(p);
        let rot = m.rotation();
        orth = orth.max(orthonormality_error(&rot));
        det = det.max((mat3_det(&rot) - 1.0).abs());
        let q = matrix_to_pose(&m).unwrap();
        for i in 0..3 {
            let d = xreg_core::pose::wrap_deg(p.to_array()[i] - q.to_array()[i]).to_radians().abs();
            round = round.max(d);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    finish(
        "1",
        &[("orthonormality", orth < 1e-9), ("determinant", det < 1e-9), ("round trip", round < 1e-9), ("runtime", secs < 5.0)],
        format!("max orth {:.1e} det {:.1e} round trip {:.1e} rad in {:.2} s", orth, det, round, secs),
    );
}

// ---- 2 ----

fn half_sq(a: Pose, b: Pose) -> f64 {
    let (r, t) = geodesic_distance(a, b);
    0.5 * (r * r + t * t)
}

fn small_rotation(axis: [f64; 3], deg: f64) -> Mat3 {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|a| a / n);
    let (s, c) = deg.to_radians().sin_cos();
    let v = 1.0 - c;
    [
        [c + x * x * v, x * y * v - z * s, x * z * v + y * s],
        [y * x * v + z * s, c + y * y * v, y * z * v - x * s],
        [z * x * v - y * s, z * y * v + x * s, c + z * z * v],
    ]
}

/// `base` moved by exactly `rot_deg` about a random axis and `trans_mm` in a
/// random direction.
fn offset_pose(base: Pose, rot_deg: f64, trans_mm: f64, r: &mut impl Rng) -> Pose {
    let axis: [f64; 3] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
    let dir: [f64; 3] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
    let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let rot = mat3_mul(&small_rotation(axis, rot_deg), &base.rotation_matrix());
    let t = base.translation();
    let t = [0, 1, 2].map(|i| t[i] + trans_mm * dir[i] / n);
    matrix_to_pose(&Mat4::from_parts(&rot, t)).unwrap()
}

#[test]
fn c02_geodesic_gradient_oracle() {
    let _g = serial();
    let t = Instant::now();
    let mut r = rng(202);
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut n = 0;
    while n < 1000 {
        let target = random_pose(30.0, 50.0, &mut r);
        let off = r.random_range(0.5..45.0);
        let theta = offset_pose(target, off, r.random_range(0.0..50.0), &mut r);
        if theta.ry.abs() > 80.0 {
            continue;
        }
        n += 1;
        let g = geodesic_gradient(theta, target).to_array();
        let fd: [f64; 6] = std::array::from_fn(|i| (half_sq(theta.perturbed(i, h), target) - half_sq(theta.perturbed(i, -h), target)) / (2.0 * h));
        let num: f64 = (0..6).map(|i| (g[i] - fd[i]).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }
    let mut zero = true;
    for _ in 0..100 {
        let p = random_pose(40.0, 50.0, &mut r);
        zero &= geodesic_gradient(p, p).to_array().iter().all(|v| *v == 0.0);
    }
    let secs = t.elapsed().as_secs_f64();
    finish(
        "2",
        &[("relative error", worst < 1e-5), ("zero at target", zero), ("runtime", secs < 5.0)],
        format!("max relative error {:.2e} over 1000 pairs, exact zero at target: {} in {:.2} s", worst, zero, secs),
    );
}

// ---- 3 ----

#[test]
fn c03_projector_reference() {
    let _g = serial();
    let t = Instant::now();
    let mut r = rng(11);
    let k = Intrinsics { det_px: [32, 32], px_spacing_mm: 4.0, ..Intrinsics::toy() };
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let v = random_volume([16, 16, 16], 4.0, &mut r);
        let pose = random_pose(20.0, 10.0, &mut r);
        let fast = project(&v, pose, &k);
        let slow = reference_project(&v, pose, &k, k.step_mm / 8.0);
        worst = worst.max(rel_l2(fast.data(), slow.data()));
    }
    let dims = [16, 16, 16];
    let cube = Volume::new(dims, [4.0; 3], centered_origin(dims, [4.0; 3]), vec![1.0; 4096]).unwrap();
    let k1 = Intrinsics { det_px: [1, 1], ..Intrinsics::toy() };
    let central = project(&cube, Pose::IDENTITY, &k1).data()[0];
    let secs = t.elapsed().as_secs_f64();
    finish(
        "3",
        &[("reference", worst < 1e-2), ("cube", (central - 64.0).abs() <= 0.64), ("runtime", secs < 60.0)],
        format!("max rel L2 {:.2e}, cube central ray {:.3} (64 mm) in {:.1} s", worst, central, secs),
    );
}

// ---- 4 ----

#[test]
fn c04_parallel_determinism() {
    let _g = serial();
    let k = Intrinsics::toy();
    let mut r = rng(4);
    let mut same = true;
    for i in 0..5 {
        let (v, _) = PhantomSpec { seed: 40 + i, ..PhantomSpec::default() }.phantom(i).unwrap();
        let pose = random_pose(10.0, 10.0, &mut r);
        let base = project_with(&v, pose, &k, &Threaded::new(1));
        for w in [2, 8] {
            same &= project_with(&v, pose, &k, &Threaded::new(w)) == base;
        }
    }
    finish("4", &[("bit identical", same)], "5 cases at 1, 2 and 8 workers".into());
}

// ---- 5 ----

#[test]
fn c05_metric_oracles() {
    let _g = serial();
    let mut r = rng(21);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let a = random_image([32, 32], &mut r);
        let b = random_image([32, 32], &mut r);
        for (x, y) in [
            (ncc(&a, &b).unwrap(), naive_ncc(&a, &b)),
            (local_ncc(&a, &b, 8).unwrap(), naive_local_ncc(&a, &b, 8)),
            (grad_corr(&a, &b).unwrap(), naive_grad_corr(&a, &b)),
            (ngi(&a, &b).unwrap(), naive_ngi(&a, &b)),
            (grad_diff(&a, &b).unwrap(), naive_grad_diff(&a, &b)),
        ] {
            worst = worst.max((x - y).abs());
        }
    }
    let mut optima = true;
    for _ in 0..20 {
        let a = random_image([32, 32], &mut r);
        optima &= ncc(&a, &a).unwrap() == 1.0
            && local_ncc(&a, &a, 8).unwrap() == 1.0
            && grad_corr(&a, &a).unwrap() == 1.0
            && ngi(&a, &a).unwrap() == 1.0
            && grad_diff(&a, &a).unwrap() == 0.0;
    }
    finish("5", &[("naive match", worst < 1e-10), ("identity optima", optima)], format!("max deviation {:.1e}", worst));
}

// ---- 6 ----

fn randomize(p: &mut Params, r: &mut impl Rng) {
    for id in p.ids().collect::<Vec<_>>() {
        let n = p.value(id).len();
        let v: Vec<f64> = (0..n).map(|_| r.random_range(0.5..1.5) * if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        p.value_mut(id).data_mut().copy_from_slice(&v);
    }
}

fn tensor(shape: &[usize], r: &mut impl Rng) -> Tensor {
    Tensor::new(shape, (0..shape.iter().product()).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn c06_nn_gradient_checks() {
    let _g = serial();
    let t = Instant::now();
    let mut r = rng(6);
    let mut results: Vec<(String, f64)> = Vec::new();
    let mut lay = Layout::default();

    for (name, dims, shape, stride) in [("conv2d", 2, vec![2, 3, 7, 6], 1), ("conv2d/2", 2, vec![1, 2, 8, 7], 2), ("conv3d", 3, vec![1, 2, 5, 4, 6], 1), ("conv3d/2", 3, vec![2, 1, 4, 4, 4], 2)] {
        let mut p = Params::new();
        let c = Conv::new(&mut p, &mut lay, "c", dims, shape[1], 3, 3, stride, 1, true, &mut r);
        randomize(&mut p, &mut r);
        let x = tensor(&shape, &mut r);
        results.push((name.into(), grad_check(&p, &[x], |t, i| c.forward(t, i[0]), 1e-5, 64).unwrap().max_rel_err));
    }
    {
        let mut p = Params::new();
        let l = Linear::new(&mut p, &mut lay, "l", 6, 4, &mut r);
        randomize(&mut p, &mut r);
        let x = tensor(&[3, 6], &mut r);
        results.push(("linear".into(), grad_check(&p, &[x], |t, i| l.forward(t, i[0]), 1e-5, 64).unwrap().max_rel_err));
    }
    {
        let (a, b) = (tensor(&[2, 3, 4], &mut r), tensor(&[2, 3, 4], &mut r));
        let p = Params::new();
        let ops: [(&str, fn(&mut xreg_core::nn::Tape, &[xreg_core::nn::NodeId]) -> xreg_core::Result<xreg_core::nn::NodeId>); 5] = [
            ("relu", |t, i| t.relu(i[0])),
            ("add", |t, i| t.add(i[0], i[1])),
            ("scale", |t, i| t.scale(i[0], -2.5)),
            ("concat", |t, i| t.concat(&[i[0], i[1]])),
            ("sum", |t, i| t.sum(i[0])),
        ];
        for (name, f) in ops {
            results.push((name.into(), grad_check(&p, &[a.clone(), b.clone()], f, 1e-5, 64).unwrap().max_rel_err));
        }
    }
    {
        let p = Params::new();
        let x = tensor(&[1, 2, 3, 4, 4], &mut r);
        results.push(("flatten".into(), grad_check(&p, &[x.clone()], |t, i| t.flatten_3d_to_2d(i[0]), 1e-5, 64).unwrap().max_rel_err));
        results.push(("reshape".into(), grad_check(&p, &[x.clone()], |t, i| t.reshape(i[0], &[2, 48]), 1e-5, 64).unwrap().max_rel_err));
        results.push(("upsample".into(), grad_check(&p, &[x.clone()], |t, i| t.upsample(i[0], [2, 1, 2]), 1e-5, 64).unwrap().max_rel_err));
        results.push(("repeat_batch".into(), grad_check(&p, &[x], |t, i| t.repeat_batch(i[0], 3), 1e-5, 64).unwrap().max_rel_err));
    }
    for (name, spec, mode) in [
        ("batchnorm/train", NormSpec::Batch, Mode::Train),
        ("batchnorm/eval", NormSpec::Batch, Mode::Eval),
        ("groupnorm", NormSpec::Group(2), Mode::Train),
        ("instancenorm", NormSpec::Group(4), Mode::Train),
    ] {
        let mut p = Params::new();
        let n = Norm::new(&mut p, &mut lay, "n", 4, spec);
        for id in p.ids().collect::<Vec<_>>() {
            let len = p.value(id).len();
            let v: Vec<f64> = (0..len).map(|_| r.random_range(0.5..1.5)).collect();
            p.value_mut(id).data_mut().copy_from_slice(&v);
        }
        let x = tensor(&[2, 4, 3, 5], &mut r);
        results.push((name.into(), grad_check(&p, &[x], |t, i| n.forward(t, i[0], mode), 1e-5, 64).unwrap().max_rel_err));
    }
    {
        let (a, b) = (tensor(&[1, 2, 4, 4], &mut r), tensor(&[1, 2, 4, 4], &mut r));
        let mask: Vec<f64> = (0..32).map(|k| (k % 3 != 0) as u8 as f64).collect();
        for squared in [false, true] {
            let e = grad_check(&Params::new(), &[a.clone(), b.clone()], |t, i| t.masked_abs_mean(i[0], i[1], &mask, squared), 1e-6, 64).unwrap();
            results.push((format!("masked_mean/{}", squared), e.max_rel_err));
        }
    }
    {
        let mut p = Params::new();
        let cb = ConvBlock::new(&mut p, &mut lay, "cb", 2, 2, 3, 3, 1, NormSpec::Group(1), &mut r);
        let rb = ResidualBlock::new(&mut p, &mut lay, "rb", 3, NormSpec::Group(1), &mut r);
        randomize(&mut p, &mut r);
        let x = tensor(&[1, 2, 5, 5], &mut r);
        results.push((
            "convblock+residual".into(),
            grad_check(&p, &[x], |t, i| {
                let y = cb.forward(t, i[0], Mode::Train)?;
                rb.forward(t, y, Mode::Train)
            }, 1e-5, 48)
            .unwrap()
            .max_rel_err,
        ));
    }
    // two random three-layer graphs
    for g in 0..2 {
        let mut p = Params::new();
        let kinds: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
        let convs: Vec<Conv> = (0..3).map(|i| Conv::new(&mut p, &mut lay, &format!("g{}c{}", g, i), 2, 3, 3, 3, 1, 1, true, &mut r)).collect();
        let norms: Vec<Norm> = (0..3).map(|i| Norm::new(&mut p, &mut lay, &format!("g{}n{}", g, i), 3, NormSpec::Group(1))).collect();
        randomize(&mut p, &mut r);
        let x = tensor(&[1, 3, 5, 6], &mut r);
        let e = grad_check(
            &p,
            &[x],
            |t, i| {
                let mut y = i[0];
                for (l, kind) in kinds.iter().enumerate() {
                    y = match kind {
                        0 => convs[l].forward(t, y)?,
                        1 => {
                            let z = convs[l].forward(t, y)?;
                            t.relu(z)?
                        }
                        2 => norms[l].forward(t, y, Mode::Train)?,
                        _ => {
                            let z = convs[l].forward(t, y)?;
                            t.add(y, z)?
                        }
                    };
                }
                Ok(y)
            },
            1e-5,
            64,
        )
        .unwrap();
        results.push((format!("graph{} {:?}", g, kinds), e.max_rel_err));
    }
    let secs = t.elapsed().as_secs_f64();
    let worst = results.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let bad: Vec<_> = results.iter().filter(|(_, e)| !(*e < 1e-4)).map(|(n, e)| format!("{} {:.1e}", n, e)).collect();
    finish(
        "6",
        &[("all layers below 1e-4", bad.is_empty()), ("runtime", secs < 120.0)],
        format!("{} checks, worst {} at {:.1e}{} in {:.1} s", results.len(), worst.0, worst.1, if bad.is_empty() { String::new() } else { format!(" [{}]", bad.join("; ")) }, secs),
    );
}

// ---- 7 ----

#[test]
fn c07_rtpi_toy_training() {
    let _g = serial();
    let trained = rtpi_trained();
    let t = Instant::now();
    // (a) a second run with the same seed reproduces the start of the curve and its weights
    let mut short = RtpiNet::new(RtpiConfig::toy(), RTPI_SEED).unwrap();
    let mut tc = RtpiTrainConfig::toy(RTPI_SEED);
    tc.train.iterations = 100;
    let c1 = train_rtpi(&mut short, &PhantomSpec::default(), &tc, &mut |_, _| {}).unwrap();
    let mut again = RtpiNet::new(RtpiConfig::toy(), RTPI_SEED).unwrap();
    let c2 = train_rtpi(&mut again, &PhantomSpec::default(), &tc, &mut |_, _| {}).unwrap();
    let deterministic = c1 == c2 && c1[..] == trained.curve[..100] && short.params == again.params;
    // (b)
    let c = &trained.curve;
    let ratio = mean(&c[c.len() - 100..]) / mean(&c[..100]);
    // (c) held-out phantoms and poses
    let held_out = PhantomSpec { seed: 0x4e1d_0001, ..PhantomSpec::default() };
    let dist = PoseDistribution::isotropic(10.0, 10.0);
    let k = Intrinsics::toy();
    let mut r = rng(0x4e1d);
    let (mut init_err, mut pred_err) = (Vec::new(), Vec::new());
    for i in 0..50 {
        let (v, _) = held_out.phantom(i).unwrap();
        let (init, truth) = sample_pose_pair(&dist, &mut r);
        let pred = rtpi_forward(&trained.net, &v, &project(&v, truth, &k)).unwrap().pose;
        init_err.push(geodesic_distance(init, truth).0);
        pred_err.push(geodesic_distance(pred, truth).0);
    }
    let (mi, mp) = (mean(&init_err), mean(&pred_err));
    let secs = trained.secs + t.elapsed().as_secs_f64();
    finish(
        "7",
        &[("(a) determinism", deterministic), ("(b) loss ratio", ratio <= 0.3), ("(c) held-out rotation", mp <= 0.6 * mi), ("runtime", secs < 1800.0)],
        format!(
            "(a) {} (b) last/first 100-iter loss {:.3} (c) rotation {:.2} vs initial {:.2} deg, ratio {:.3}; {:.0} s",
            deterministic, ratio, mp, mi, mp / mi, secs
        ),
    );
}

// ---- 8 ----

#[test]
fn c08_fine_registration_capture() {
    let _g = serial();
    let trained = fine_trained();
    let t = Instant::now();
    let k = Intrinsics::toy();
    let identity = FineNets::new(EncoderConfig::toy(EncoderKind::Identity), 0).unwrap();
    let sched = InferenceSchedule::default();
    let source = PhantomSpec { seed: 0x8008, ..PhantomSpec::default() };
    let mut r = rng(0x8008);
    let w = GeodesicWeights::default();
    let (mut reduced, mut id_rot, mut comp_rot) = (0, Vec::new(), Vec::new());
    for i in 0..50 {
        let (v, m) = source.phantom(i).unwrap();
        let truth = PoseDistribution::isotropic(10.0, 10.0).sample(&mut r);
        let init = offset_pose(truth, 2.0, 2.0, &mut r);
        let fixed = project(&v, truth, &k);
        let a = register_iterative(&identity, &v, &m, &fixed, init, &sched, &k).unwrap();
        if geodesic_norm(a.pose, truth, w) < geodesic_norm(init, truth, w) {
            reduced += 1;
        }
        id_rot.push(geodesic_distance(a.pose, truth).0);
        let b = register_iterative(&trained.net, &v, &m, &fixed, init, &sched, &k).unwrap();
        comp_rot.push(geodesic_distance(b.pose, truth).0);
    }
    let (mi, mc) = (mean(&id_rot), mean(&comp_rot));
    let secs = trained.secs + t.elapsed().as_secs_f64();
    finish(
        "8",
        &[("identity capture", reduced >= 45), ("composite <= identity", mc <= mi), ("runtime", secs < 1200.0)],
        format!(
            "identity encoder reduced the error on {}/50; mean final rotation composite {:.3} vs identity {:.3} deg; training loss {:.3} -> {:.3}; {:.0} s",
            reduced,
            mc,
            mi,
            mean(&trained.curve[..50.min(trained.curve.len())]),
            mean(&trained.curve[trained.curve.len().saturating_sub(50)..]),
            secs
        ),
    );
}

// ---- 9 ----

#[test]
fn c09_pipeline_ordering() {
    let _g = serial();
    let rtpi = rtpi_trained();
    let fine = fine_trained();
    let t = Instant::now();
    let mut ctx = StudyContext::new(PhantomSpec { seed: 0x9009, ..PhantomSpec::default() }, Intrinsics::toy());
    ctx.rtpi = Some(rtpi.net.clone());
    ctx.fine = Some(fine.net.clone());
    ctx.timing = false;
    let opt_gc = Method::parse("opt-gc").unwrap();
    let methods = [Method::IDENTITY, Method::SOPI, Method::SOPI_OPT, opt_gc];
    let rep = run_study(&ctx, &methods, 50, &PoseDistribution::isotropic(10.0, 10.0), 9).unwrap();
    let s = |m: &Method| rep.summary(&m.to_string()).unwrap().clone();
    let (init, sopi, sopi_opt, raw_opt) = (s(&Method::IDENTITY), s(&Method::SOPI), s(&Method::SOPI_OPT), s(&opt_gc));
    let all_valid = [&init, &sopi, &sopi_opt, &raw_opt].iter().all(|m| m.n_valid == 50);
    let secs = t.elapsed().as_secs_f64();
    let line = |m: &xreg::study::MethodSummary| format!("{} {:.2} deg/{:.2} mm it {:.1}", m.method, m.rot_err_mean, m.trans_err_mean, m.iterations_mean);
    finish(
        "9",
        &[
            ("all cases ran", all_valid),
            ("SOPI+opt <= SOPI (rot)", sopi_opt.rot_err_mean <= sopi.rot_err_mean),
            ("SOPI+opt <= SOPI (trans)", sopi_opt.trans_err_mean <= sopi.trans_err_mean),
            ("SOPI <= Initial (rot)", sopi.rot_err_mean <= init.rot_err_mean),
            ("SOPI <= Initial (trans)", sopi.trans_err_mean <= init.trans_err_mean),
            ("Opt-GC from SOPI beats raw (rot)", sopi_opt.rot_err_mean < raw_opt.rot_err_mean),
            ("Opt-GC from SOPI beats raw (trans)", sopi_opt.trans_err_mean < raw_opt.trans_err_mean),
            ("Opt-GC from SOPI converges faster", sopi_opt.iterations_mean < raw_opt.iterations_mean),
            ("runtime", secs < 2700.0),
        ],
        format!("{}; {}; {}; {}; {:.0} s", line(&init), line(&sopi), line(&sopi_opt), line(&raw_opt), secs),
    );
}

// ---- 10 ----

#[test]
fn c10_error_and_loss_contracts() {
    let _g = serial();
    let mut checks = Vec::new();
    let fm = |d: Vec<f64>| FeatureMap::new([2, 2, 1], d).unwrap();
    let ones = MaskImage::new([2, 2], vec![1; 4]).unwrap();
    checks.push(("e_m = e_f", error_fn(&fm(vec![1.0, 2.0, 3.0, 4.0]), &fm(vec![1.0, 2.0, 3.0, 4.0]), &ones).unwrap() == 0.0));
    checks.push(("weighted mean", error_fn(&fm(vec![1.0, 2.0, 3.0, 4.0]), &fm(vec![1.0, 4.0, 3.0, 4.0]), &ones).unwrap() == 0.5));
    let empty = MaskImage::new([2, 2], vec![0; 4]).unwrap();
    checks.push(("EmptyMask", matches!(error_fn(&fm(vec![0.0; 4]), &fm(vec![1.0; 4]), &empty), Err(Error::EmptyMask))));

    let v = GradVec { v_r: [1.0, 2.0, -3.0], v_t: [0.5, 0.0, 4.0] };
    checks.push(("v = v*", training_loss(&v, &v).unwrap() == 0.0));
    let anti = GradVec { v_r: [-1.0, -2.0, 3.0], v_t: v.v_t };
    checks.push(("antipodal", training_loss(&anti, &v).unwrap() == 2.0));
    let a = GradVec { v_r: [1.0, 0.0, 0.0], v_t: [0.0, 0.0, 1.0] };
    let b = GradVec { v_r: [0.0, 1.0, 0.0], v_t: [1.0, 0.0, 0.0] };
    checks.push(("orthogonal", training_loss(&a, &b).unwrap() == 2.0 * std::f64::consts::SQRT_2));
    let z = GradVec { v_r: [0.0; 3], v_t: [1.0, 0.0, 0.0] };
    checks.push(("ZeroGradient", matches!(training_loss(&z, &v), Err(Error::ZeroGradient)) && matches!(training_loss(&v, &z), Err(Error::ZeroGradient))));

    // tied encoders at the truth
    let (vol, mask) = PhantomSpec::default().phantom(0).unwrap();
    let k = Intrinsics::toy();
    let nets = FineNets::new(EncoderConfig::toy(EncoderKind::Composite), 1).unwrap();
    let truth = Pose::new(2.0, -3.0, 1.0, 4.0, 2.0, -1.0);
    // the central difference of an L1 minimum is O(h), so the floor needs a small step
    let g = pose_grad(&nets, &vol, &mask, truth, &project(&vol, truth, &k), &k, FdStep { rot_deg: 1e-5, trans_mm: 1e-5 }).unwrap();
    checks.push(("zero gradient at the truth", g.norm() <= 1e-6));

    let mut r = rng(1010);
    let mut worst = 0.0f64;
    let part = |r: &mut rand_chacha::ChaCha8Rng| -> [f64; 3] {
        loop {
            let p: [f64; 3] = std::array::from_fn(|_| r.random_range(-10.0..10.0));
            if p.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
                return p;
            }
        }
    };
    for _ in 0..1000 {
        let a = GradVec { v_r: part(&mut r), v_t: part(&mut r) };
        let b = GradVec { v_r: part(&mut r), v_t: part(&mut r) };
        let base = training_loss(&a, &b).unwrap();
        let [s1, s2, s3, s4] = std::array::from_fn(|_| 10f64.powf(r.random_range(-3.0..3.0)));
        let a2 = GradVec { v_r: a.v_r.map(|x| x * s1), v_t: a.v_t.map(|x| x * s2) };
        let b2 = GradVec { v_r: b.v_r.map(|x| x * s3), v_t: b.v_t.map(|x| x * s4) };
        worst = worst.max((training_loss(&a2, &b2).unwrap() - base).abs());
    }
    checks.push(("rescaling invariance", worst < 1e-12));
    finish("10", &checks, format!("{} contracts, gradient at the truth {:.1e}, max rescaling deviation {:.1e}", checks.len(), g.norm(), worst));
}

// ---- 11 ----

fn simulate(dir: &Path) -> i32 {
    let args = [
        "xreg", "simulate", "--out", dir.to_str().unwrap(), "--methods", "identity,opt-gc", "--set", "study.cases=6", "--set", "study.seed=11",
        "--set", "timing=off", "--set", "opt.max_iters=30", "--set", "workers=2",
    ];
    main_with_args(args)
}

#[test]
fn c11_harness_bookkeeping() {
    let _g = serial();
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    let ran = simulate(&a) == 0 && simulate(&b) == 0;
    let identical = ran && ["report.csv", "summary.json", "manifest.json"].iter().all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    let mut exact = ran;
    let mut nonzero_failures = false;
    if ran {
        let rows = read_rows(&a.join("report.csv")).unwrap();
        let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
        for m in summary["summaries"].as_array().unwrap() {
            let name = m["method"].as_str().unwrap();
            let mine: Vec<_> = rows.iter().filter(|r| r.method == name).collect();
            let n = mine.len() as f64;
            let fails = mine.iter().filter(|r| !r.success).count() as f64;
            nonzero_failures |= fails > 0.0;
            let stats = |v: Vec<f64>| {
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
                (mean, var.sqrt())
            };
            let (rm, rs) = stats(mine.iter().map(|r| r.rot_err_deg).collect());
            let (tm, ts) = stats(mine.iter().map(|r| r.trans_err_mm).collect());
            let f = |k: &str| m[k].as_f64().unwrap();
            exact &= f("rot_err_mean") == rm && f("rot_err_std") == rs && f("trans_err_mean") == tm && f("trans_err_std") == ts;
            exact &= f("failure_rate") == 100.0 * fails / n;
        }
    }
    finish(
        "11",
        &[("simulate ran", ran), ("bit-identical reruns", identical), ("aggregates recomputed exactly", exact), ("failures present", nonzero_failures)],
        "two seeded simulate runs compared byte for byte; mean, std and failure rate recomputed from report.csv".into(),
    );
}
