//! Command-line front end. Every subcommand takes `--config FILE` and any
//! number of `--set key=value` overrides; unknown keys are errors.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use xreg_core::eval::{evaluate_case, PoseDistribution};
use xreg_core::finereg::{train_finereg, FineNets};
use xreg_core::image::overlay;
use xreg_core::projector::{project_mask, project_with};
use xreg_core::rtpi::{train_rtpi, RtpiNet};
use xreg_core::volume::make_phantom;
use xreg_core::{Image, Pose};

use crate::config::{self, Settings};
use crate::error::{Error, Result};
use crate::exec::Threaded;
use crate::formats;
use crate::study::{self, AblationSpec, Method, StudyContext};

#[derive(Debug, Parser)]
#[command(name = "xreg", version, about = "Volume to single-projection rigid registration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// key=value settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural phantom volume and its mask.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Project a volume at a pose.
    Render {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        /// Also write the projected mask.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Register a volume to a fixed image.
    Register {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// `.ih` header or 16-bit PGM.
        #[arg(long)]
        fixed: PathBuf,
        /// Initial pose (identity when omitted).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Ground truth, only used to report errors.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        nets: NetPaths,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the pose-initialization network on phantoms.
    TrainRtpi {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the fine-registration encoders on phantoms.
    TrainFine {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Seeded simulation study over several methods.
    Simulate {
        /// Comma-separated method list (overrides `study.methods`).
        #[arg(long)]
        methods: Option<String>,
        #[command(flatten)]
        nets: NetPaths,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Full pipeline and single-toggle ablations on shared cases.
    Ablate {
        #[command(flatten)]
        nets: NetPaths,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args, Clone, Default)]
pub struct NetPaths {
    /// Initialization network checkpoint.
    #[arg(long)]
    pub rtpi: Option<PathBuf>,
    /// Composite-encoder checkpoint.
    #[arg(long)]
    pub fine: Option<PathBuf>,
    /// Plain-encoder checkpoint.
    #[arg(long)]
    pub fine_plain: Option<PathBuf>,
}

/// Parses and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Core(xreg_core::Error::InvalidConfig(_)) => 2,
        _ => 1,
    }
}

fn settings(common: &Common) -> Result<Settings> {
    let mut s = match &common.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    s.apply_overrides(common.set.iter().map(String::as_str))?;
    Ok(s)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))
}

fn write_manifest(dir: &Path, command: &str, s: &Settings, seed: Option<u64>, extra: serde_json::Value) -> Result<()> {
    let m = json!({
        "command": command,
        "config_hash": s.hash(),
        "settings": s.values(),
        "seed": seed,
        "versions": { "xreg": env!("CARGO_PKG_VERSION"), "xreg-core": xreg_core::VERSION },
        "outputs": extra,
    });
    formats::save_json(&m, &dir.join("manifest.json"))
}

fn load_image_any(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => formats::read_pgm(path),
        _ => formats::load_image(path),
    }
}

fn load_nets(ctx: &mut StudyContext, nets: &NetPaths) -> Result<()> {
    if let Some(p) = &nets.rtpi {
        ctx.rtpi = Some(RtpiNet::from_checkpoint(&formats::load_checkpoint(p)?)?);
    }
    if let Some(p) = &nets.fine {
        ctx.fine = Some(FineNets::from_checkpoint(&formats::load_checkpoint(p)?)?);
    }
    if let Some(p) = &nets.fine_plain {
        ctx.fine_plain = Some(FineNets::from_checkpoint(&formats::load_checkpoint(p)?)?);
    }
    Ok(())
}

fn context(s: &Settings, nets: &NetPaths) -> Result<StudyContext> {
    let mut ctx = StudyContext::new(config::phantom_spec(s)?, config::intrinsics(s)?);
    ctx.sched = config::schedule(s)?;
    ctx.opt = config::opt_config(s)?;
    ctx.workers = config::workers(s)?;
    ctx.timing = config::timing(s)?;
    load_nets(&mut ctx, nets)?;
    Ok(ctx)
}

fn parse_method(name: &str) -> Result<Method> {
    Method::parse(name.trim()).ok_or_else(|| Error::Config(format!("unknown method `{}`", name)))
}

fn pose_json(p: Pose) -> serde_json::Value {
    serde_json::to_value(p).unwrap_or_default()
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom { out, common } => {
            let s = settings(&common)?;
            let spec = config::phantom_spec(&s)?;
            s.check_unused()?;
            create_dir(&out)?;
            let (v, m) = make_phantom(&spec)?;
            formats::save_volume(&v, &out.join("volume.vh"))?;
            formats::save_mask(&m, &out.join("mask.vh"))?;
            write_manifest(&out, "phantom", &s, Some(spec.seed), json!(["volume.vh", "volume.vraw", "mask.vh", "mask.vraw"]))
        }
        Command::Render { volume, pose, mask, out, common } => {
            let s = settings(&common)?;
            let k = config::intrinsics(&s)?;
            let workers = config::workers(&s)?;
            s.check_unused()?;
            let v = formats::load_volume(&volume)?;
            let p = formats::load_pose(&pose)?;
            create_dir(&out)?;
            let img = project_with(&v, p, &k, &Threaded::new(workers));
            formats::write_pgm16(&img, &out.join("drr.pgm"))?;
            formats::save_image(&img, &out.join("drr.ih"))?;
            let mut files = vec!["drr.pgm", "drr.ih", "drr.iraw"];
            if let Some(mp) = mask {
                let mi = project_mask(&formats::load_mask(&mp)?, p, &k);
                let as_img = Image::new(mi.dims(), mi.data().iter().map(|&b| b as f64).collect())?;
                formats::write_pgm16(&as_img, &out.join("mask.pgm"))?;
                files.push("mask.pgm");
            }
            write_manifest(&out, "render", &s, None, json!({ "files": files, "pose": pose_json(p) }))
        }
        Command::Register { volume, mask, fixed, init, truth, method, nets, out, common } => {
            let s = settings(&common)?;
            let method_name = match method {
                Some(m) => m,
                None => s.get("register.method", "opt-gc".to_string())?,
            };
            let m = parse_method(&method_name)?;
            let ctx = context(&s, &nets)?;
            s.check_unused()?;
            ctx.check_method(&m)?;
            let v = formats::load_volume(&volume)?;
            let vm = match &mask {
                Some(p) => formats::load_mask(p)?,
                None if m.fine.is_some() => return Err(Error::Config(format!("method `{}` needs --mask", m))),
                None => xreg_core::volume::threshold_mask(&v, f64::INFINITY),
            };
            let f = load_image_any(&fixed)?;
            if f.dims() != ctx.k.det_px {
                return Err(Error::Config(format!("fixed image is {:?}, detector is {:?}", f.dims(), ctx.k.det_px)));
            }
            let theta0 = match &init {
                Some(p) => formats::load_pose(p)?,
                None => Pose::IDENTITY,
            };
            let case = study::Case { index: 0, truth: theta0, init: theta0, hash: String::new(), volume: v, mask: vm, fixed: f };
            let t = std::time::Instant::now();
            let mut r = study::run_method(&ctx, &m, &case)?;
            r.wall_time_s = if ctx.timing { t.elapsed().as_secs_f64() } else { 0.0 };
            create_dir(&out)?;
            formats::save_json(&r, &out.join("result.json"))?;
            formats::save_json(&r.final_pose, &out.join("pose.json"))?;
            formats::write_trace(&r.metric_trace, &out.join("trace.csv"))?;
            let moving = project_with(&case.volume, r.final_pose, &ctx.k, &Threaded::new(ctx.workers));
            formats::write_ppm(&overlay(&case.fixed, &moving)?, &out.join("overlay.ppm"))?;
            let errors = match &truth {
                Some(p) => Some(evaluate_case(formats::load_pose(p)?, r.final_pose)),
                None => None,
            };
            if let Some(e) = &errors {
                formats::save_json(e, &out.join("errors.json"))?;
            }
            println!("{} -> {}", m, serde_json::to_string(&r.final_pose)?);
            write_manifest(&out, "register", &s, None, json!({ "method": m.to_string(), "errors": errors }))
        }
        Command::TrainRtpi { out, common } => {
            let s = settings(&common)?;
            let cfg = config::rtpi_config(&s)?;
            let tc = config::rtpi_train_config(&s)?;
            let phantom = config::phantom_spec(&s)?;
            s.check_unused()?;
            create_dir(&out)?;
            let mut net = RtpiNet::new(cfg, tc.train.seed)?;
            let curve = train_rtpi(&mut net, &phantom, &tc, &mut progress(tc.train.iterations))?;
            formats::write_curve(&curve, &out.join("curve.csv"))?;
            formats::save_checkpoint(&net.checkpoint(), &out.join("rtpi.ckpt"))?;
            write_manifest(&out, "train-rtpi", &s, Some(tc.train.seed), json!(["rtpi.ckpt", "rtpi.ckpt.bin", "curve.csv"]))
        }
        Command::TrainFine { out, common } => {
            let s = settings(&common)?;
            let cfg = config::encoder_config(&s)?;
            let tc = config::fine_train_config(&s)?;
            let phantom = config::phantom_spec(&s)?;
            s.check_unused()?;
            create_dir(&out)?;
            let mut nets = FineNets::new(cfg, tc.train.seed)?;
            let o = train_finereg(&mut nets, &phantom, &tc, &mut progress(tc.train.iterations))?;
            formats::write_curve(&o.loss_curve, &out.join("curve.csv"))?;
            formats::save_checkpoint(&nets.checkpoint(), &out.join("fine.ckpt"))?;
            write_manifest(&out, "train-fine", &s, Some(tc.train.seed), json!({ "files": ["fine.ckpt", "fine.ckpt.bin", "curve.csv"], "skipped": o.skipped }))
        }
        Command::Simulate { methods, nets, out, common } => {
            let s = settings(&common)?;
            let list = match methods {
                Some(m) => m,
                None => s.get("study.methods", "identity,opt-gc".to_string())?,
            };
            let methods: Vec<Method> = list.split(',').map(parse_method).collect::<Result<_>>()?;
            let (n, seed, dist) = study_params(&s)?;
            let ctx = context(&s, &nets)?;
            s.check_unused()?;
            let report = study::run_study(&ctx, &methods, n, &dist, seed)?;
            create_dir(&out)?;
            report.write_csv(&out.join("report.csv"))?;
            formats::save_json(&report, &out.join("summary.json"))?;
            print_summaries(&report);
            write_manifest(&out, "simulate", &s, Some(seed), json!(["report.csv", "summary.json"]))
        }
        Command::Ablate { nets, out, common } => {
            let s = settings(&common)?;
            let (n, seed, dist) = study_params(&s)?;
            let ctx = context(&s, &nets)?;
            s.check_unused()?;
            let reports = study::run_ablation(&ctx, &AblationSpec::table(), n, &dist, seed)?;
            create_dir(&out)?;
            let rows: Vec<_> = reports.iter().flat_map(|(_, r)| r.rows.iter().cloned()).collect();
            study::write_rows(&rows, &out.join("report.csv"))?;
            let summary: Vec<_> = reports.iter().map(|(spec, r)| json!({ "spec": spec, "summary": r.summaries[0], "case_hashes": r.case_hashes })).collect();
            formats::save_json(&summary, &out.join("summary.json"))?;
            for (_, r) in &reports {
                print_summaries(r);
            }
            write_manifest(&out, "ablate", &s, Some(seed), json!(["report.csv", "summary.json"]))
        }
    }
}

fn study_params(s: &Settings) -> Result<(usize, u64, PoseDistribution)> {
    Ok((s.get("study.cases", 50)?, s.get("study.seed", 0)?, config::pose_distribution(s, "study.poses", PoseDistribution::isotropic(10.0, 10.0))?))
}

fn print_summaries(r: &study::StudyReport) {
    for m in &r.summaries {
        println!(
            "{:<24} rot {:.3} +- {:.3} deg  trans {:.3} +- {:.3} mm  fail {:.1}%  n={}",
            m.method, m.rot_err_mean, m.rot_err_std, m.trans_err_mean, m.trans_err_std, m.failure_rate, m.n_cases
        );
    }
}

fn progress(total: usize) -> impl FnMut(usize, f64) {
    let every = (total / 20).max(1);
    let mut acc = 0.0;
    move |i, loss| {
        acc += loss;
        if (i + 1) % every == 0 {
            eprintln!("iter {:>6}  loss {:.5}", i + 1, acc / every as f64);
            acc = 0.0;
        }
    }
}
