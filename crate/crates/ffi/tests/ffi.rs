use std::ffi::{CStr, CString};
use std::ptr;

use infdist_ffi::*;

fn last_error() -> String {
    let p = idf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn matrix(rows: usize, cols: usize, data: &[f64]) -> *mut IdfMatrix {
    let mut m = ptr::null_mut();
    assert_eq!(idf_matrix_from_data(rows, cols, data.as_ptr(), &mut m), IdfStatus::Ok);
    m
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(idf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn matrix_roundtrip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.idm").to_str().unwrap()).unwrap();
    let data = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    unsafe {
        let m = matrix(2, 3, &data);
        assert_eq!(idf_matrix_write(m, path.as_ptr(), false), IdfStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(idf_matrix_read(path.as_ptr(), &mut back), IdfStatus::Ok);
        assert_eq!(idf_matrix_rows(back), 2);
        assert_eq!(idf_matrix_cols(back), 3);
        let got = std::slice::from_raw_parts(idf_matrix_data(back), 6);
        assert_eq!(got, &data);
        idf_matrix_free(m);
        idf_matrix_free(back);
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        let mut m = ptr::null_mut();
        let bad = [1.0, f64::NAN];
        assert_eq!(idf_matrix_from_data(1, 2, bad.as_ptr(), &mut m), IdfStatus::Invalid);
        assert!(m.is_null());
        assert!(last_error().contains("non-finite"), "{}", last_error());

        assert_eq!(idf_matrix_from_data(1, 2, ptr::null(), &mut m), IdfStatus::NullPointer);

        let missing = CString::new("/nonexistent/dir/m.idm").unwrap();
        assert_eq!(idf_matrix_read(missing.as_ptr(), &mut m), IdfStatus::Io);

        let p = [1.0, 2.0];
        let mut s = ptr::null_mut();
        assert_eq!(
            idf_tune_lambda(p.as_ptr(), 2, 5, 100, &mut s, ptr::null_mut()),
            IdfStatus::Invalid
        );
        // success clears the message
        assert_eq!(idf_solve_first_order(p.as_ptr(), 2, 1.0, &mut s), IdfStatus::Ok);
        assert!(idf_last_error().is_null());
        idf_solution_free(s);
        idf_matrix_free(ptr::null_mut());
        idf_solution_free(ptr::null_mut());
    }
}

#[test]
fn first_order_matches_library() {
    let p = [0.3, -0.1, 0.7, 0.2];
    let want = infdist::qpsolve::solve_first_order(&p, 0.5).unwrap();
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(idf_solve_first_order(p.as_ptr(), 4, 0.5, &mut s), IdfStatus::Ok);
        let w = std::slice::from_raw_parts(idf_solution_weights(s), idf_solution_len(s));
        assert_eq!(w, want.weights.as_slice());
        assert_eq!(idf_solution_support_len(s), want.support_len());
        idf_solution_free(s);
    }
}

#[test]
fn tune_lambda_hits_budget() {
    let p = [0.9, 0.1, 0.5, 0.3, 0.7];
    unsafe {
        let mut s = ptr::null_mut();
        let mut exact = false;
        assert_eq!(
            idf_tune_lambda(p.as_ptr(), 5, 3, 100, &mut s, &mut exact),
            IdfStatus::Ok
        );
        assert!(exact);
        assert_eq!(idf_solution_support_len(s), 3);
        assert!(idf_solution_lambda(s) > 0.0);
        idf_solution_free(s);
    }
}

#[test]
fn active_set_and_compute_p() {
    // two orthogonal source gradients, target along the first
    unsafe {
        let src = matrix(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let tgt = matrix(1, 2, &[2.0, 0.0]);
        let mut p = [0.0; 2];
        assert_eq!(idf_compute_p(src, tgt, true, p.as_mut_ptr()), IdfStatus::Ok);
        assert_eq!(p, [1.0, 0.0]);

        let q = matrix(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let mut s = ptr::null_mut();
        assert_eq!(idf_solve_active_set(p.as_ptr(), 2, q, 1.0, 1.0, &mut s), IdfStatus::Ok);
        let w = std::slice::from_raw_parts(idf_solution_weights(s), 2);
        // R = 2I, stationarity 2w - p = tau: w = (1.25, 0.75)
        assert!((w[0] - 1.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12, "{w:?}");
        idf_solution_free(s);
        idf_matrix_free(src);
        idf_matrix_free(tgt);
        idf_matrix_free(q);
    }
}

#[test]
fn projection_is_deterministic() {
    let data: Vec<f64> = (0..3 * 16).map(|i| (i as f64).sin()).collect();
    unsafe {
        let m = matrix(3, 16, &data);
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(idf_project(m, IdfSketch::Hadamard, 4, 0, 7, &mut a), IdfStatus::Ok);
        assert_eq!(idf_project(m, IdfSketch::Hadamard, 4, 0, 7, &mut b), IdfStatus::Ok);
        assert_eq!(idf_matrix_cols(a), 4);
        let sa = std::slice::from_raw_parts(idf_matrix_data(a), 12);
        let sb = std::slice::from_raw_parts(idf_matrix_data(b), 12);
        assert_eq!(sa, sb);
        let mut c = ptr::null_mut();
        assert_eq!(
            idf_project(m, IdfSketch::Hadamard, 64, 0, 7, &mut c),
            IdfStatus::Invalid
        );
        idf_matrix_free(a);
        idf_matrix_free(b);
        idf_matrix_free(m);
    }
}
