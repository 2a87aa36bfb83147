//! Simulation studies: seeded cases, strategies run from a shared start,
//! per-case rows and per-method aggregates.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xreg_core::eval::{dist_err, evaluate_case, sample_pose_pair, PoseDistribution};
use xreg_core::finereg::{EncoderConfig, EncoderKind, FineNets, InferenceSchedule};
use xreg_core::pipeline::{register_fine_from, register_image_space, register_opt, OptConfig, RegistrationResult};
use xreg_core::projector::project;
use xreg_core::rtpi::{rtpi_forward, RtpiNet};
use xreg_core::similarity::{grad_corr, MetricKind};
use xreg_core::volume::PhantomSource;
use xreg_core::{Image, Intrinsics, PhantomSpec, Pose, Volume, VoxelMask};

use crate::error::{Error, Result};
use crate::exec::par_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// The sampled initial pose.
    Raw,
    /// The initialization network's prediction.
    Rtpi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fine {
    /// Embedded-feature error with the given encoder.
    Embedded(EncoderKind),
    /// The same descent on an image-space metric.
    Image(MetricKind),
}

/// `init -> fine? -> opt?`, written `rtpi+fine+opt-gc` and so on.
/// `sopi` is shorthand for `rtpi+fine`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Method {
    pub init: Init,
    pub fine: Option<Fine>,
    pub opt: Option<MetricKind>,
}

impl Method {
    pub const IDENTITY: Method = Method { init: Init::Raw, fine: None, opt: None };
    pub const SOPI: Method = Method { init: Init::Rtpi, fine: Some(Fine::Embedded(EncoderKind::Composite)), opt: None };
    pub const SOPI_OPT: Method = Method { opt: Some(MetricKind::GradCorr), ..Method::SOPI };

    pub fn opt(metric: MetricKind, init: Init) -> Method {
        Method { init, fine: None, opt: Some(metric) }
    }

    pub fn parse(s: &str) -> Option<Method> {
        let mut m = Method::IDENTITY;
        let mut first = true;
        for tok in s.split('+') {
            match tok {
                "identity" | "raw" if first => {}
                "rtpi" if first => m.init = Init::Rtpi,
                "sopi" if first => m = Method::SOPI,
                "fine" if m.fine.is_none() && m.opt.is_none() => m.fine = Some(Fine::Embedded(EncoderKind::Composite)),
                "opt" if m.opt.is_none() => m.opt = Some(MetricKind::GradCorr),
                _ => {
                    if let Some(rest) = tok.strip_prefix("fine-").filter(|_| m.fine.is_none() && m.opt.is_none()) {
                        m.fine = Some(match EncoderKind::parse(rest) {
                            Some(k) => Fine::Embedded(k),
                            None => Fine::Image(MetricKind::parse(rest)?),
                        });
                    } else if let Some(rest) = tok.strip_prefix("opt-").filter(|_| m.opt.is_none()) {
                        m.opt = Some(MetricKind::parse(rest)?);
                    } else {
                        return None;
                    }
                }
            }
            first = false;
        }
        Some(m)
    }

    pub fn needs_rtpi(&self) -> bool {
        self.init == Init::Rtpi
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        if *self == Method::SOPI || (self.init == Init::Rtpi && self.fine == Method::SOPI.fine) {
            parts.push("sopi".into());
        } else {
            if self.init == Init::Rtpi {
                parts.push("rtpi".into());
            }
            match self.fine {
                Some(Fine::Embedded(EncoderKind::Composite)) => parts.push("fine".into()),
                Some(Fine::Embedded(k)) => parts.push(format!("fine-{}", k.name())),
                Some(Fine::Image(m)) => parts.push(format!("fine-{}", m.name())),
                None => {}
            }
        }
        if let Some(m) = self.opt {
            parts.push(format!("opt-{}", m.name()));
        }
        if parts.is_empty() {
            parts.push("identity".into());
        }
        f.write_str(&parts.join("+"))
    }
}

/// Toggles of one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub use_rtpi: bool,
    pub use_composite_encoder: bool,
    pub use_embedded_loss: bool,
}

impl AblationSpec {
    pub const FULL: AblationSpec = AblationSpec { use_rtpi: true, use_composite_encoder: true, use_embedded_loss: true };

    /// The full configuration and each single-toggle ablation.
    pub fn table() -> Vec<AblationSpec> {
        vec![
            AblationSpec::FULL,
            AblationSpec { use_rtpi: false, ..AblationSpec::FULL },
            AblationSpec { use_composite_encoder: false, ..AblationSpec::FULL },
            AblationSpec { use_embedded_loss: false, ..AblationSpec::FULL },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_rtpi || self.use_composite_encoder || self.use_embedded_loss {
            Ok(())
        } else {
            Err(Error::Config("an ablation row needs at least one toggle on".into()))
        }
    }

    pub fn method(&self) -> Method {
        let fine = if !self.use_embedded_loss {
            Fine::Image(MetricKind::GradDiff)
        } else if self.use_composite_encoder {
            Fine::Embedded(EncoderKind::Composite)
        } else {
            Fine::Embedded(EncoderKind::Plain)
        };
        Method { init: if self.use_rtpi { Init::Rtpi } else { Init::Raw }, fine: Some(fine), opt: None }
    }

    pub fn label(&self) -> String {
        let t = |b: bool| if b { "1" } else { "0" };
        format!("rtpi={} ce={} el={}", t(self.use_rtpi), t(self.use_composite_encoder), t(self.use_embedded_loss))
    }
}

/// Everything a study needs besides the case list.
pub struct StudyContext {
    pub phantom: PhantomSpec,
    pub k: Intrinsics,
    pub rtpi: Option<RtpiNet>,
    /// Composite-encoder networks.
    pub fine: Option<FineNets>,
    /// Plain-encoder networks for the encoder ablation.
    pub fine_plain: Option<FineNets>,
    pub sched: InferenceSchedule,
    pub opt: OptConfig,
    pub workers: usize,
    /// Record wall-clock time; off makes reports bit-reproducible.
    pub timing: bool,
}

impl StudyContext {
    pub fn new(phantom: PhantomSpec, k: Intrinsics) -> Self {
        StudyContext {
            phantom,
            k,
            rtpi: None,
            fine: None,
            fine_plain: None,
            sched: InferenceSchedule::default(),
            opt: OptConfig::default(),
            workers: 1,
            timing: true,
        }
    }

    fn nets(&self, kind: EncoderKind) -> Result<std::borrow::Cow<'_, FineNets>> {
        use std::borrow::Cow;
        let missing = |what: &str| Error::Config(format!("method needs {} networks", what));
        match kind {
            EncoderKind::Identity => {
                Ok(Cow::Owned(FineNets::new(EncoderConfig { img_dims: self.k.det_px, ..EncoderConfig::toy(EncoderKind::Identity) }, 0)?))
            }
            EncoderKind::Composite => self.fine.as_ref().map(Cow::Borrowed).ok_or_else(|| missing("composite fine-registration")),
            EncoderKind::Plain => self.fine_plain.as_ref().map(Cow::Borrowed).ok_or_else(|| missing("plain fine-registration")),
        }
    }

    /// Fails early when a method needs networks that are not loaded.
    pub fn check_method(&self, m: &Method) -> Result<()> {
        if m.needs_rtpi() && self.rtpi.is_none() {
            return Err(Error::Config(format!("method `{}` needs an initialization network", m)));
        }
        if let Some(Fine::Embedded(k)) = m.fine {
            self.nets(k)?;
        }
        Ok(())
    }
}

/// One generated case.
#[derive(Debug, Clone)]
pub struct Case {
    pub index: usize,
    pub truth: Pose,
    pub init: Pose,
    pub hash: String,
    pub volume: Volume,
    pub mask: VoxelMask,
    pub fixed: Image,
}

fn hash_case(index: usize, truth: Pose, init: Pose, volume: &Volume) -> String {
    let mut h = Sha256::new();
    h.update((index as u64).to_le_bytes());
    for v in truth.to_array().iter().chain(&init.to_array()) {
        h.update(v.to_le_bytes());
    }
    for v in volume.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{:02x}", b)).collect()
}

/// Case `index` of a study: its own phantom and RNG stream, both derived
/// from `(seed, index)` only.
pub fn make_case(ctx: &StudyContext, dist: &PoseDistribution, seed: u64, index: usize) -> Result<Case> {
    let spec = PhantomSpec { seed: ctx.phantom.seed ^ seed.wrapping_mul(0xA24B_AED4_963E_E407), ..ctx.phantom.clone() };
    let (volume, mask) = spec.phantom(index as u64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (init, truth) = sample_pose_pair(dist, &mut rng);
    let fixed = project(&volume, truth, &ctx.k);
    let hash = hash_case(index, truth, init, &volume);
    Ok(Case { index, truth, init, hash, volume, mask, fixed })
}

/// Runs one method on one case.
pub fn run_method(ctx: &StudyContext, m: &Method, case: &Case) -> Result<RegistrationResult> {
    let start = match m.init {
        Init::Raw => case.init,
        Init::Rtpi => rtpi_forward(ctx.rtpi.as_ref().ok_or_else(|| Error::Config("no initialization network".into()))?, &case.volume, &case.fixed)?.pose,
    };
    let mut stages = vec![(if m.init == Init::Rtpi { "rtpi" } else { "init" }.to_string(), start)];
    let mut result = RegistrationResult {
        init_pose: start,
        final_pose: start,
        iterations: 0,
        wall_time_s: 0.0,
        metric_trace: vec![(0, 0.0)],
        restarts: 0,
        stages: Vec::new(),
    };
    if let Some(f) = m.fine {
        let r = match f {
            Fine::Embedded(kind) => register_fine_from(&*ctx.nets(kind)?, &case.volume, &case.mask, &case.fixed, start, &ctx.sched, &ctx.k)?,
            Fine::Image(metric) => register_image_space(&case.volume, &case.fixed, start, metric, &ctx.sched, &ctx.k)?,
        };
        stages.push(("fine".into(), r.final_pose));
        result = RegistrationResult { init_pose: start, ..r };
    }
    if let Some(metric) = m.opt {
        let cfg = OptConfig { metric, ..ctx.opt };
        if cfg.max_iters > 0 {
            let r = register_opt(&case.volume, &case.fixed, result.final_pose, &cfg, &ctx.k)?;
            stages.push(("opt".into(), r.final_pose));
            result = RegistrationResult { init_pose: start, ..r };
        }
    }
    result.stages = stages;
    Ok(result)
}

/// One row of the per-case report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub method: String,
    pub case: usize,
    pub rot_err_deg: f64,
    pub trans_err_mm: f64,
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub dist_err_mm: f64,
    pub img_sim: f64,
    pub success: bool,
    pub time_s: f64,
    pub iterations: usize,
    pub init_rot_err_deg: f64,
    pub init_trans_err_mm: f64,
    pub case_hash: String,
    pub status: String,
}

fn row_for(method: &str, case: &Case, outcome: Result<RegistrationResult>, time_s: f64, k: &Intrinsics) -> CaseRow {
    let base = |status: String| CaseRow {
        method: method.to_string(),
        case: case.index,
        rot_err_deg: f64::NAN,
        trans_err_mm: f64::NAN,
        rx: f64::NAN,
        ry: f64::NAN,
        rz: f64::NAN,
        tx: f64::NAN,
        ty: f64::NAN,
        tz: f64::NAN,
        dist_err_mm: f64::NAN,
        img_sim: f64::NAN,
        success: false,
        time_s,
        iterations: 0,
        init_rot_err_deg: f64::NAN,
        init_trans_err_mm: f64::NAN,
        case_hash: case.hash.clone(),
        status,
    };
    match outcome {
        Err(e) => base(format!("error: {}", e).replace(',', ";")),
        Ok(r) => {
            let m = evaluate_case(case.truth, r.final_pose);
            let i = evaluate_case(case.truth, r.init_pose);
            let [rx, ry, rz, tx, ty, tz] = m.axis_err;
            CaseRow {
                rot_err_deg: m.rot_err_deg,
                trans_err_mm: m.trans_err_mm,
                rx,
                ry,
                rz,
                tx,
                ty,
                tz,
                dist_err_mm: dist_err(case.truth, r.final_pose, &case.volume, k).unwrap_or(f64::NAN),
                img_sim: grad_corr(&case.fixed, &project(&case.volume, r.final_pose, k)).unwrap_or(f64::NAN),
                success: m.success,
                iterations: r.iterations,
                init_rot_err_deg: i.rot_err_deg,
                init_trans_err_mm: i.trans_err_mm,
                ..base("ok".into())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub n_cases: usize,
    /// Rows with finite errors (the error statistics use these).
    pub n_valid: usize,
    pub rot_err_mean: f64,
    pub rot_err_std: f64,
    pub trans_err_mean: f64,
    pub trans_err_std: f64,
    /// Percentage of all rows that are not successes.
    pub failure_rate: f64,
    pub time_mean_s: f64,
    pub iterations_mean: f64,
    pub dist_err_mean: f64,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(method: &str, rows: &[CaseRow]) -> MethodSummary {
    let rows: Vec<&CaseRow> = rows.iter().filter(|r| r.method == method).collect();
    let valid: Vec<&&CaseRow> = rows.iter().filter(|r| r.rot_err_deg.is_finite() && r.trans_err_mm.is_finite()).collect();
    let rot: Vec<f64> = valid.iter().map(|r| r.rot_err_deg).collect();
    let trans: Vec<f64> = valid.iter().map(|r| r.trans_err_mm).collect();
    let (rot_err_mean, rot_err_std) = mean_std(&rot);
    let (trans_err_mean, trans_err_std) = mean_std(&trans);
    let failures = rows.iter().filter(|r| !r.success).count();
    let n = rows.len();
    let dist: Vec<f64> = valid.iter().map(|r| r.dist_err_mm).filter(|d| d.is_finite()).collect();
    MethodSummary {
        method: method.to_string(),
        n_cases: n,
        n_valid: valid.len(),
        rot_err_mean,
        rot_err_std,
        trans_err_mean,
        trans_err_std,
        failure_rate: if n == 0 { f64::NAN } else { 100.0 * failures as f64 / n as f64 },
        time_mean_s: mean_std(&rows.iter().map(|r| r.time_s).collect::<Vec<_>>()).0,
        iterations_mean: mean_std(&valid.iter().map(|r| r.iterations as f64).collect::<Vec<_>>()).0,
        dist_err_mean: mean_std(&dist).0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub label: String,
    pub seed: u64,
    pub n_cases: usize,
    pub methods: Vec<String>,
    pub summaries: Vec<MethodSummary>,
    pub case_hashes: Vec<String>,
    #[serde(skip)]
    pub rows: Vec<CaseRow>,
}

impl StudyReport {
    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn rows_for<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a CaseRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(&self.rows, path)
    }
}

pub fn write_rows(rows: &[CaseRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(crate::error::io_err(path))?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<CaseRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<CaseRow>, _>>()?)
}

/// Runs every method on `n_cases` seeded cases. Cases are spread over
/// `ctx.workers` threads; each case's methods run in order on one thread.
/// Per-case errors become rows with status `error: ...`.
pub fn run_study(ctx: &StudyContext, methods: &[Method], n_cases: usize, dist: &PoseDistribution, seed: u64) -> Result<StudyReport> {
    run_labeled(ctx, "study", &methods.iter().map(|m| (m.to_string(), *m)).collect::<Vec<_>>(), n_cases, dist, seed)
}

fn run_labeled(ctx: &StudyContext, label: &str, methods: &[(String, Method)], n_cases: usize, dist: &PoseDistribution, seed: u64) -> Result<StudyReport> {
    if n_cases == 0 {
        return Err(Error::Config("a study needs at least one case".into()));
    }
    dist.validate()?;
    for (_, m) in methods {
        ctx.check_method(m)?;
    }
    let per_case = par_map(n_cases, ctx.workers, |i| -> Result<(String, Vec<CaseRow>)> {
        let case = make_case(ctx, dist, seed, i)?;
        let rows = methods
            .iter()
            .map(|(name, m)| {
                let t = Instant::now();
                let out = run_method(ctx, m, &case);
                let dt = if ctx.timing { t.elapsed().as_secs_f64() } else { 0.0 };
                row_for(name, &case, out, dt, &ctx.k)
            })
            .collect();
        Ok((case.hash.clone(), rows))
    });
    let mut rows = Vec::with_capacity(n_cases * methods.len());
    let mut hashes = Vec::with_capacity(n_cases);
    for r in per_case {
        let (h, rs) = r?;
        hashes.push(h);
        rows.extend(rs);
    }
    rows.sort_by(|a, b| {
        let ia = methods.iter().position(|(n, _)| *n == a.method);
        let ib = methods.iter().position(|(n, _)| *n == b.method);
        ia.cmp(&ib).then(a.case.cmp(&b.case))
    });
    let names: Vec<String> = methods.iter().map(|(n, _)| n.clone()).collect();
    let summaries = names.iter().map(|n| summarize(n, &rows)).collect();
    Ok(StudyReport { label: label.to_string(), seed, n_cases, methods: names, summaries, case_hashes: hashes, rows })
}

/// One report per ablation row, all on the same cases. Rows are labeled
/// `rtpi=. ce=. el=.` in the method column.
pub fn run_ablation(ctx: &StudyContext, specs: &[AblationSpec], n_cases: usize, dist: &PoseDistribution, seed: u64) -> Result<Vec<(AblationSpec, StudyReport)>> {
    specs
        .iter()
        .map(|s| {
            s.validate()?;
            let r = run_labeled(ctx, &s.label(), &[(s.label(), s.method())], n_cases, dist, seed)?;
            Ok((*s, r))
        })
        .collect()
}
