use xreg::exec::{par_map, Threaded};
use xreg_core::projector::{project, project_with};
use xreg_core::volume::{make_phantom, PhantomSpec};
use xreg_core::{Intrinsics, Pose};

#[test]
fn threaded_projection_is_bit_identical_to_serial() {
    let (v, _) = make_phantom(&PhantomSpec::default()).unwrap();
    let k = Intrinsics::toy();
    for pose in [Pose::IDENTITY, Pose::new(7.0, -12.0, 25.0, 4.0, -9.0, 11.0)] {
        let serial = project(&v, pose, &k);
        for workers in [1, 2, 3, 8, 200] {
            let t = project_with(&v, pose, &k, &Threaded::new(workers));
            assert_eq!(t, serial, "{} workers", workers);
        }
    }
}

#[test]
fn odd_detector_shapes_split_cleanly() {
    let (v, _) = make_phantom(&PhantomSpec::default()).unwrap();
    let k = Intrinsics { det_px: [17, 5], px_spacing_mm: 8.0, ..Intrinsics::toy() };
    let pose = Pose::new(1.0, 2.0, 3.0, 0.0, 0.0, 0.0);
    assert_eq!(project_with(&v, pose, &k, &Threaded::new(4)), project(&v, pose, &k));
}

#[test]
fn par_map_keeps_index_order() {
    for workers in [1, 2, 5, 64] {
        let out = par_map(37, workers, |i| i * i);
        assert_eq!(out, (0..37).map(|i| i * i).collect::<Vec<_>>());
    }
    assert!(par_map(0, 4, |i| i).is_empty());
}
