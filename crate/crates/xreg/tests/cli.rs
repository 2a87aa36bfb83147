use std::fs;
use std::path::Path;

use xreg::cli::main_with_args;
use xreg::study::{mean_std, read_rows};
use xreg_core::eval::evaluate_case;
use xreg_core::Pose;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("xreg").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_pose(path: &Path, p: [f64; 6]) {
    fs::write(
        path,
        format!(r#"{{"rx_deg":{},"ry_deg":{},"rz_deg":{},"tx_mm":{},"ty_mm":{},"tz_mm":{}}}"#, p[0], p[1], p[2], p[3], p[4], p[5]),
    )
    .unwrap();
}

#[test]
fn usage_and_config_errors_exit_with_2() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("o");
    assert_eq!(run(&["no-such-command"]), 2);
    assert_eq!(run(&["phantom"]), 2);
    assert_eq!(run(&["phantom", "--out", s(&out), "--set", "phantom.nonsense=1"]), 2);
    assert_eq!(run(&["phantom", "--out", s(&out), "--set", "phantom.dims=32 32"]), 2);
    assert_eq!(run(&["phantom", "--out", s(&out), "--set", "novalue"]), 2);
    assert_eq!(run(&["simulate", "--out", s(&out), "--methods", "bogus"]), 2);
    assert_eq!(run(&["simulate", "--out", s(&out), "--set", "fine.max_iters=2"]), 2);
    assert!(!out.exists());
}

#[test]
fn runtime_failures_exit_with_1() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("o");
    let pose = d.path().join("p.json");
    write_pose(&pose, [0.0; 6]);
    assert_eq!(run(&["render", "--volume", s(&d.path().join("missing.vh")), "--pose", s(&pose), "--out", s(&out)]), 1);
    fs::write(d.path().join("bad.vh"), "dims=4 4\n").unwrap();
    assert_eq!(run(&["render", "--volume", s(&d.path().join("bad.vh")), "--pose", s(&pose), "--out", s(&out)]), 1);
}

#[test]
fn phantom_render_register_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let ph = d.path().join("ph");
    assert_eq!(run(&["phantom", "--out", s(&ph), "--set", "phantom.seed=4"]), 0);
    for f in ["volume.vh", "volume.vraw", "mask.vh", "mask.vraw", "manifest.json"] {
        assert!(ph.join(f).exists(), "{}", f);
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(ph.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["settings"]["phantom.seed"], "4");
    assert!(manifest["config_hash"].as_str().unwrap().len() >= 16);

    let truth = d.path().join("truth.json");
    let init = d.path().join("init.json");
    write_pose(&truth, [3.0, -2.0, 4.0, 2.0, -3.0, 3.0]);
    write_pose(&init, [4.5, -1.0, 2.5, 4.0, -1.5, 1.0]);
    let r = d.path().join("r");
    let vol = ph.join("volume.vh");
    let mask = ph.join("mask.vh");
    assert_eq!(run(&["render", "--volume", s(&vol), "--pose", s(&truth), "--mask", s(&mask), "--out", s(&r), "--set", "workers=3"]), 0);
    for f in ["drr.pgm", "drr.ih", "drr.iraw", "mask.pgm", "manifest.json"] {
        assert!(r.join(f).exists(), "{}", f);
    }
    let pgm = fs::read(r.join("drr.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n65535\n"));

    // the fixed image may be given as PGM or as the float header
    for fixed in ["drr.ih", "drr.pgm"] {
        let reg = d.path().join(format!("reg-{}", fixed));
        let code = run(&[
            "register", "--volume", s(&vol), "--mask", s(&mask), "--fixed", s(&r.join(fixed)), "--init", s(&init), "--truth", s(&truth),
            "--method", "opt-gc", "--out", s(&reg), "--set", "opt.max_iters=40", "--set", "timing=off",
        ]);
        assert_eq!(code, 0);
        for f in ["result.json", "pose.json", "trace.csv", "overlay.ppm", "errors.json", "manifest.json"] {
            assert!(reg.join(f).exists(), "{}", f);
        }
        let e: serde_json::Value = serde_json::from_str(&fs::read_to_string(reg.join("errors.json")).unwrap()).unwrap();
        let start = evaluate_case(Pose::new(3.0, -2.0, 4.0, 2.0, -3.0, 3.0), Pose::new(4.5, -1.0, 2.5, 4.0, -1.5, 1.0));
        let after = e["rot_err_deg"].as_f64().unwrap() + e["trans_err_mm"].as_f64().unwrap();
        assert!(after < start.rot_err_deg + start.trans_err_mm, "{}", e);
        assert!(fs::read_to_string(reg.join("trace.csv")).unwrap().lines().count() > 1);
    }

    // detector mismatch is a configuration error
    let bad = d.path().join("bad");
    assert_eq!(run(&["register", "--volume", s(&vol), "--fixed", s(&r.join("drr.ih")), "--out", s(&bad), "--set", "k.det_px=32 32"]), 2);
    // fine methods need the mask
    assert_eq!(run(&["register", "--volume", s(&vol), "--fixed", s(&r.join("drr.ih")), "--method", "fine-identity", "--out", s(&bad)]), 2);
}

fn simulate(dir: &Path) -> i32 {
    run(&[
        "simulate", "--out", s(dir), "--methods", "identity,fine-identity,opt-gc", "--set", "study.cases=3", "--set", "study.seed=9", "--set", "timing=off",
        "--set", "fine.max_iters=6", "--set", "fine.rot_freeze_iter=3", "--set", "opt.max_iters=6", "--set", "workers=2",
    ])
}

#[test]
fn simulate_is_deterministic_and_aggregates_match_the_rows() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    assert_eq!(simulate(&a), 0);
    assert_eq!(simulate(&b), 0);
    for f in ["report.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{}", f);
    }
    let rows = read_rows(&a.join("report.csv")).unwrap();
    assert_eq!(rows.len(), 9);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    for m in summary["summaries"].as_array().unwrap() {
        let name = m["method"].as_str().unwrap();
        let mine: Vec<_> = rows.iter().filter(|r| r.method == name).collect();
        assert_eq!(mine.len(), 3);
        let (rm, rs) = mean_std(&mine.iter().map(|r| r.rot_err_deg).collect::<Vec<_>>());
        let (tm, ts) = mean_std(&mine.iter().map(|r| r.trans_err_mm).collect::<Vec<_>>());
        let close = |x: f64, y: &serde_json::Value| (x - y.as_f64().unwrap()).abs() <= 1e-9 * (1.0 + x.abs());
        assert!(close(rm, &m["rot_err_mean"]) && close(rs, &m["rot_err_std"]));
        assert!(close(tm, &m["trans_err_mean"]) && close(ts, &m["trans_err_std"]));
        let fails = mine.iter().filter(|r| !r.success).count() as f64;
        assert!(close(100.0 * fails / 3.0, &m["failure_rate"]));
        assert!(mine.iter().all(|r| r.time_s == 0.0));
    }
    // both methods saw the same cases
    let hashes: Vec<_> = rows.iter().map(|r| r.case_hash.clone()).collect();
    assert_eq!(hashes[..3], hashes[3..6]);
    assert_eq!(hashes[..3], hashes[6..]);
}
