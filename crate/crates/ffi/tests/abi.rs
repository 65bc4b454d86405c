use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use vanishlab_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(vl_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn scheme_profile_and_sampling() {
    let mut s = ptr::null_mut();
    let name = CString::new("uniform:lecun").unwrap();
    assert_eq!(unsafe { vl_scheme_parse(name.as_ptr(), &mut s) }, VL_OK);
    let (mut v, mut m4, mut k) = (0.0, 0.0, 0.0);
    assert_eq!(unsafe { vl_scheme_profile(s, 4, &mut v, &mut m4, &mut k) }, VL_OK);
    assert!((v - 1.0 / 12.0).abs() < 1e-15);
    assert!((k - 1.8).abs() < 1e-12);
    let mut a = [0.0; 8];
    let mut b = [0.0; 8];
    assert_eq!(unsafe { vl_scheme_sample(s, 4, 9, a.as_mut_ptr(), 8) }, VL_OK);
    assert_eq!(unsafe { vl_scheme_sample(s, 4, 9, b.as_mut_ptr(), 8) }, VL_OK);
    assert_eq!(a, b);
    let tau = (3.0 * v).sqrt();
    assert!(a.iter().all(|x| x.abs() <= tau));
    unsafe { vl_scheme_free(s) };
}

#[test]
fn bad_scheme_sets_error() {
    let mut s = ptr::null_mut();
    let name = CString::new("cauchy:he").unwrap();
    let code = unsafe { vl_scheme_parse(name.as_ptr(), &mut s) };
    assert_ne!(code, VL_OK);
    assert!(s.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { vl_scheme_parse(ptr::null(), &mut s) }, VL_ERR_NULL_POINTER);
}

#[test]
fn chain_derivatives() {
    let w = [0.5, -1.2, 0.8];
    let (x, y) = ([1.0, 2.0], [0.5, -1.0]);
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { vl_chain_new(w.as_ptr(), 3, x.as_ptr(), y.as_ptr(), 2, &mut c) }, VL_OK);
    let mut loss = 0.0;
    assert_eq!(unsafe { vl_chain_loss(c, &mut loss) }, VL_OK);
    let p: f64 = w.iter().product();
    let expect = 0.5 * ((p * 1.0 - 0.5f64).powi(2) + (p * 2.0 + 1.0f64).powi(2)) / 2.0;
    assert!((loss - expect).abs() < 1e-14, "{loss} vs {expect}");
    let mut g = [0.0; 3];
    assert_eq!(unsafe { vl_chain_gradient(c, g.as_mut_ptr(), 3) }, VL_OK);
    let mut h = [0.0; 9];
    assert_eq!(unsafe { vl_chain_hessian(c, h.as_mut_ptr(), 9) }, VL_OK);
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(h[3 * i + j], h[3 * j + i]);
        }
    }
    assert_eq!(unsafe { vl_chain_hessian(c, h.as_mut_ptr(), 4) }, VL_ERR_BUFFER_TOO_SMALL);
    unsafe { vl_chain_free(c) };
}

#[test]
fn mlp_handle() {
    let mut s = ptr::null_mut();
    let name = CString::new("gaussian:xavier").unwrap();
    assert_eq!(unsafe { vl_scheme_parse(name.as_ptr(), &mut s) }, VL_OK);
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { vl_mlp_random(3, 2, VL_ACTIVATION_LINEAR, s, 4, 0, 0, 1, &mut m) }, VL_OK);
    let mut n = 0;
    assert_eq!(unsafe { vl_mlp_num_params(m, &mut n) }, VL_OK);
    assert_eq!(n, 12);
    let mut g = vec![0.0; n];
    assert_eq!(unsafe { vl_mlp_gradient(m, g.as_mut_ptr(), n) }, VL_OK);
    let mut h = vec![0.0; n * n];
    assert_eq!(unsafe { vl_mlp_hessian(m, h.as_mut_ptr(), n * n) }, VL_OK);
    for i in 0..n {
        for j in 0..n {
            assert!((h[i * n + j] - h[j * n + i]).abs() < 1e-12);
        }
    }
    assert_eq!(unsafe { vl_mlp_random(3, 2, 7, s, 4, 0, 0, 1, &mut m) }, VL_ERR_INVALID_ARGUMENT);
    unsafe {
        vl_mlp_free(m);
        vl_scheme_free(s);
    }
}

#[test]
fn closed_forms() {
    let mut v = 0.0;
    assert_eq!(unsafe { vl_erlang_cdf(1, 1.0, &mut v) }, VL_OK);
    assert!((v - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
    assert_eq!(unsafe { vl_erlang_cdf(0, 1.0, &mut v) }, VL_ERR_DOMAIN);
    assert_eq!(unsafe { vl_chain_moment(2.0, 10, 1, &mut v) }, VL_OK);
    assert!((v - 1.0).abs() < 1e-12);
    let (mut lo, mut hi) = (0.0, 0.0);
    assert_eq!(unsafe { vl_chain_median_bounds(3f64.sqrt(), 1, &mut lo, &mut hi) }, VL_OK);
    assert!(lo < hi);
    let mut st = [1.0, 1.0, 1.0];
    assert_eq!(unsafe { vl_forward_moments(st.as_mut_ptr(), 1, 1.0, 3.0, 1.0, 0) }, VL_OK);
    assert_eq!(st, [1.0, 1.0, 1.0]);
    let mut w = 0u64;
    assert_eq!(unsafe { vl_min_width_for_median(0.5, 4, &mut w) }, VL_OK);
    assert!(w > 0);
    assert_eq!(unsafe { vl_gradient_flow_bound(0.5, 4, 1.0, 0.0, &mut v) }, VL_OK);
    assert!((v - 0.5).abs() < 1e-15);
    assert_eq!(unsafe { vl_erlang_cdf(1, 1.0, ptr::null_mut()) }, VL_ERR_NULL_POINTER);
}

#[test]
fn run_spec_is_deterministic() {
    let spec = CString::new(r#"{"kind":"chain_scan","params":{"depths":[2,3],"tau":1.5},"trials":3,"master_seed":5}"#).unwrap();
    let run = || {
        let mut out = ptr::null_mut();
        assert_eq!(unsafe { vl_run_spec(spec.as_ptr(), 2, &mut out, ptr::null_mut()) }, VL_OK, "{}", last_error());
        let s = unsafe { CStr::from_ptr(out) }.to_string_lossy().into_owned();
        unsafe { vl_string_free(out) };
        s
    };
    let a = run();
    assert!(a.starts_with("kind,observable,depth,width,init,activation,trial,sub_seed,value\n"));
    assert_eq!(a.lines().count(), 1 + 2 * 3 * 4);
    assert_eq!(a, run());
    let bad = CString::new(r#"{"kind":"chain_scan","params":{}}"#).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { vl_run_spec(bad.as_ptr(), 0, &mut out, ptr::null_mut()) }, VL_ERR_CONFIG);
    assert!(out.is_null());
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(include.join("vanishlab.h").exists());
    let dir = tempfile_dir();
    let src = dir.join("probe.c");
    std::fs::write(&src, "#include \"vanishlab.h\"\nint main(void) { VlScheme *s = 0; double v; return vl_erlang_cdf(1, 1.0, &v) + (s != 0); }\n").unwrap();
    for (compiler, extra) in [("gcc", vec!["-std=c99"]), ("g++", vec!["-x", "c++"])] {
        let status = match Command::new(compiler).args(&extra).args(["-Wall", "-Werror", "-fsyntax-only", "-I"]).arg(&include).arg(&src).status() {
            Ok(s) => s,
            Err(_) => {
                eprintln!("{compiler} not found; skipping");
                continue;
            }
        };
        assert!(status.success(), "{compiler} rejected the header");
    }
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("ffi-header");
    std::fs::create_dir_all(&d).unwrap();
    d
}
