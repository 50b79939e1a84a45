use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use flowlab::exact_field::ExactField;
use flowlab::neural_velocity::{train, Checkpoint, NetConfig, TrainConfig};
use flowlab_ffi::*;

fn last_error() -> String {
    let p = flowlab_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn moons(n: usize, seed: u64) -> *mut FlowlabDataset {
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { flowlab_dataset_two_moons(n, 0.05, seed, &mut ds) },
        FlowlabStatus::Ok
    );
    assert!(!ds.is_null());
    ds
}

#[test]
fn dataset_round_trip_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = cpath(&dir.path().join("m.fmds"));
    unsafe {
        let ds = moons(50, 3);
        assert_eq!(flowlab_dataset_len(ds), 50);
        assert_eq!(flowlab_dataset_dim(ds), 2);
        assert_eq!(flowlab_dataset_save(ds, file.as_ptr()), FlowlabStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(flowlab_dataset_load(file.as_ptr(), &mut back), FlowlabStatus::Ok);
        let mut a = vec![0.0; 100];
        let mut b = vec![0.0; 100];
        assert_eq!(flowlab_dataset_points(ds, a.as_mut_ptr(), a.len()), FlowlabStatus::Ok);
        assert_eq!(flowlab_dataset_points(back, b.as_mut_ptr(), b.len()), FlowlabStatus::Ok);
        assert_eq!(a, b);
        flowlab_dataset_free(ds);
        flowlab_dataset_free(back);
    }
}

#[test]
fn exact_velocity_of_a_single_point_is_the_conditional_direction() {
    let c = [1.0, -2.0, 0.5];
    let x = [0.3, 0.1, -0.4];
    let t = 0.6;
    let mut out = [0.0; 3];
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(
            flowlab_dataset_from_points(c.as_ptr(), 1, 3, &mut ds),
            FlowlabStatus::Ok
        );
        assert_eq!(
            flowlab_exact_velocity(ds, x.as_ptr(), 3, t, 1e-3, out.as_mut_ptr()),
            FlowlabStatus::Ok
        );
        flowlab_dataset_free(ds);
    }
    for k in 0..3 {
        assert!((out[k] - (c[k] - x[k]) / (1.0 - t)).abs() < 1e-12);
    }
}

#[test]
fn exact_velocity_matches_the_library() {
    unsafe {
        let ds = moons(40, 1);
        let x = [0.2, -0.1];
        let mut out = [0.0; 2];
        assert_eq!(
            flowlab_exact_velocity(ds, x.as_ptr(), 2, 0.7, 1e-3, out.as_mut_ptr()),
            FlowlabStatus::Ok
        );
        let ts = flowlab::datasets::gen_two_moons(40, 0.05, 1).unwrap();
        let expect = ExactField::new(&ts, 1e-3).unwrap().velocity(&x, 0.7).unwrap();
        assert_eq!(out.to_vec(), expect);
        flowlab_dataset_free(ds);
    }
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let ds = moons(10, 0);
        let x = [0.0, 0.0];
        let mut out = [0.0; 2];
        assert_eq!(
            flowlab_exact_velocity(ds, x.as_ptr(), 2, 1.0, 1e-3, out.as_mut_ptr()),
            FlowlabStatus::Singularity
        );
        assert!(last_error().contains("singularity"));
        flowlab_clear_error();
        assert!(flowlab_last_error().is_null());

        let x3 = [0.0; 3];
        let mut out3 = [0.0; 3];
        assert_eq!(
            flowlab_exact_velocity(ds, x3.as_ptr(), 3, 0.5, 1e-3, out3.as_mut_ptr()),
            FlowlabStatus::InvalidArgument
        );
        assert!(last_error().contains("expected 2"));
        assert_eq!(
            flowlab_exact_velocity(ptr::null(), x.as_ptr(), 2, 0.5, 1e-3, out.as_mut_ptr()),
            FlowlabStatus::NullPointer
        );
        let mut none = ptr::null_mut();
        assert_eq!(
            flowlab_dataset_two_moons(0, 0.05, 0, &mut none),
            FlowlabStatus::InvalidArgument
        );
        assert!(none.is_null());

        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.fmds");
        std::fs::write(&bad, b"garbage").unwrap();
        assert_eq!(
            flowlab_dataset_load(cpath(&bad).as_ptr(), &mut none),
            FlowlabStatus::Format
        );
        let missing = cpath(&dir.path().join("missing.fmds"));
        assert_eq!(flowlab_dataset_load(missing.as_ptr(), &mut none), FlowlabStatus::Io);

        assert_eq!(flowlab_dataset_len(ptr::null()), 0);
        flowlab_dataset_free(ptr::null_mut());
        flowlab_net_free(ptr::null_mut());
        flowlab_dataset_free(ds);
    }
}

#[test]
fn efm_target_with_one_point_is_the_conditional_target() {
    unsafe {
        let ds = moons(20, 2);
        let mut pts = vec![0.0; 40];
        assert_eq!(flowlab_dataset_points(ds, pts.as_mut_ptr(), 40), FlowlabStatus::Ok);
        let x0 = [0.4, -1.1];
        let mut out = [0.0; 2];
        assert_eq!(
            flowlab_efm_target(ds, x0.as_ptr(), 2, 7, 0.3, 1, 5, 1e-3, out.as_mut_ptr()),
            FlowlabStatus::Ok
        );
        for k in 0..2 {
            assert!((out[k] - (pts[14 + k] - x0[k])).abs() < 1e-12);
        }
        assert_eq!(
            flowlab_efm_target(ds, x0.as_ptr(), 2, 20, 0.3, 1, 5, 1e-3, out.as_mut_ptr()),
            FlowlabStatus::InvalidArgument
        );
        flowlab_dataset_free(ds);
    }
}

#[test]
fn efm_verification_passes() {
    let mut err = f64::NAN;
    let mut ok = false;
    for trial in 0..5 {
        assert_eq!(
            unsafe { flowlab_efm_verify(4, 2, 2, 0, trial, &mut err, &mut ok) },
            FlowlabStatus::Ok
        );
        assert!(err <= 1e-10);
        assert!(ok);
    }
    assert_eq!(
        unsafe { flowlab_efm_verify(100, 6, 2, 0, 0, &mut err, &mut ok) },
        FlowlabStatus::Numeric
    );
}

#[test]
fn nets_load_forward_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let ts = flowlab::datasets::gen_two_moons(32, 0.05, 4).unwrap();
    let cfg = TrainConfig {
        steps: 5,
        net: NetConfig {
            hidden: vec![8],
            ..NetConfig::default()
        },
        ..TrainConfig::default()
    };
    let outcome = train(&ts, &cfg).unwrap();
    let file = dir.path().join("net.fmnn");
    Checkpoint::from(&outcome).save(&file).unwrap();
    let reference = Checkpoint::load(&file).unwrap().net;

    unsafe {
        let mut net = ptr::null_mut();
        assert_eq!(
            flowlab_net_load(cpath(&file).as_ptr(), false, &mut net),
            FlowlabStatus::Ok
        );
        assert_eq!(flowlab_net_dim(net), 2);
        let x = [0.5, 0.25];
        let mut out = [0.0; 2];
        assert_eq!(
            flowlab_net_forward(net, x.as_ptr(), 2, 0.3, out.as_mut_ptr()),
            FlowlabStatus::Ok
        );
        assert_eq!(out.to_vec(), reference.forward(&x, 0.3).unwrap());

        let mut ema = ptr::null_mut();
        assert_eq!(
            flowlab_net_load(cpath(&file).as_ptr(), true, &mut ema),
            FlowlabStatus::Ok
        );

        let ds = moons(32, 4);
        let n = 6;
        let mut learned = vec![0.0; n * 2];
        let mut hybrid0 = vec![0.0; n * 2];
        let mut exact = vec![0.0; n * 2];
        let mut hybrid1 = vec![0.0; n * 2];
        let m = FlowlabMethod::Midpoint;
        assert_eq!(
            flowlab_sample_learned(net, n, 10, m, 3, 1e-3, learned.as_mut_ptr(), learned.len()),
            FlowlabStatus::Ok
        );
        assert_eq!(
            flowlab_sample_hybrid(ds, net, 0.0, n, 10, m, 3, 1e-3, hybrid0.as_mut_ptr(), hybrid0.len()),
            FlowlabStatus::Ok
        );
        assert_eq!(
            flowlab_sample_exact(ds, n, 10, m, 3, 1e-3, exact.as_mut_ptr(), exact.len()),
            FlowlabStatus::Ok
        );
        assert_eq!(
            flowlab_sample_hybrid(ds, net, 1.0, n, 10, m, 3, 1e-3, hybrid1.as_mut_ptr(), hybrid1.len()),
            FlowlabStatus::Ok
        );
        assert_eq!(learned, hybrid0);
        assert_eq!(exact, hybrid1);
        assert_ne!(learned, exact);
        assert_eq!(
            flowlab_sample_exact(ds, n, 10, m, 3, 1e-3, exact.as_mut_ptr(), 3),
            FlowlabStatus::InvalidArgument
        );
        assert_eq!(
            flowlab_sample_hybrid(ds, net, 1.5, n, 10, m, 3, 1e-3, exact.as_mut_ptr(), exact.len()),
            FlowlabStatus::InvalidArgument
        );

        flowlab_dataset_free(ds);
        flowlab_net_free(net);
        flowlab_net_free(ema);
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("flowlab.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "flowlab_last_error",
        "flowlab_dataset_two_moons",
        "flowlab_sample_hybrid",
        "FLOWLAB_STATUS_PANIC",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let status = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(&header)
            .status();
        match status {
            Ok(s) => assert!(s.success(), "{compiler} rejected the header"),
            Err(_) => eprintln!("{compiler} not available; skipping header compile"),
        }
    }
}
