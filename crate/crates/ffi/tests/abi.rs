// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ffi::CStr;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use twophase_ffi::*;

fn dataset(t: &[f64], x: &[f64]) -> *mut TpDataset {
    let mut d = ptr::null_mut();
    let s = unsafe { tp_dataset_new(t.as_ptr(), x.as_ptr(), t.len(), &mut d) };
    assert_eq!(s, TpStatus::Ok);
    d
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    let n = unsafe { tp_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn noiseless_fit_through_the_abi() {
    let d = dataset(&[0.8, 0.2, 0.5], &[0.0, -0.8, -0.2]);
    assert_eq!(unsafe { tp_dataset_len(d) }, 3);
    let mut f = ptr::null_mut();
    assert_eq!(unsafe { tp_fit_mle(d, 0.0, 1.0, &mut f) }, TpStatus::Ok);
    let mut theta = [0.0; 3];
    assert_eq!(unsafe { tp_fit_theta(f, theta.as_mut_ptr()) }, TpStatus::Ok);
    assert!((theta[0] - 2.0).abs() < 1e-9 && (theta[1] - 0.6).abs() < 1e-9);
    assert_eq!(theta[2], 0.0);
    assert_eq!(unsafe { tp_fit_flags(f) }, TP_FLAG_SIGMA2_ZERO);
    assert_eq!(unsafe { tp_fit_rss(f) }, 0.0);
    assert_eq!(unsafe { tp_fit_loglik(f) }, f64::INFINITY);
    unsafe {
        tp_fit_free(f);
        tp_dataset_free(d);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut d = ptr::null_mut();
    let t = [0.1, f64::NAN];
    let s = unsafe { tp_dataset_new(t.as_ptr(), t.as_ptr(), 2, &mut d) };
    assert_eq!(s, TpStatus::InvalidInput);
    assert!(d.is_null());
    assert!(!last_error().is_empty());

    let s = unsafe { tp_dataset_new(ptr::null(), t.as_ptr(), 2, &mut d) };
    assert_eq!(s, TpStatus::NullPointer);

    let d = dataset(&[0.2, 0.5, 0.8], &[-0.8, -0.2, 0.0]);
    let mut out = [0.0; 3];
    // u = 0.5 is a knot.
    let s = unsafe { tp_score(d, 2.0, 0.5, 1.0, out.as_mut_ptr()) };
    assert_eq!(s, TpStatus::NonDifferentiable);
    let mut ll = 0.0;
    assert_eq!(
        unsafe { tp_log_likelihood(d, 2.0, 0.6, 0.0, &mut ll) },
        TpStatus::Precondition
    );
    assert_eq!(
        unsafe { tp_log_likelihood(d, 2.0, 0.6, 1.0, &mut ll) },
        TpStatus::Ok
    );
    assert!((ll + 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    unsafe { tp_dataset_free(d) };
    unsafe { tp_dataset_free(ptr::null_mut()) };
}

#[test]
fn information_matrices() {
    let mut m = [0.0; 9];
    let s = unsafe {
        tp_information(
            ptr::null(),
            TpInfoKind::AsymptoticUniform,
            2.0,
            0.5,
            0.25,
            0.0,
            1.0,
            m.as_mut_ptr(),
        )
    };
    assert_eq!(s, TpStatus::Ok);
    let expected = [1.0 / 6.0, 1.0, 0.0, 1.0, 8.0, 0.0, 0.0, 0.0, 8.0];
    for (a, b) in m.iter().zip(expected) {
        assert!((a - b).abs() < 1e-9, "{m:?}");
    }
    let s = unsafe {
        tp_information(
            ptr::null(),
            TpInfoKind::Empirical,
            2.0,
            0.5,
            0.25,
            0.0,
            1.0,
            m.as_mut_ptr(),
        )
    };
    assert_eq!(s, TpStatus::InvalidInput);
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps/
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_header() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libtwophase_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl"])
        .arg("-o")
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
