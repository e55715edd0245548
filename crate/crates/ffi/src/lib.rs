//! C interface to `infdist`.
//!
//! Handles are opaque and owned by the caller once returned; free them with the
//! matching `*_free` function. Every fallible call returns an [`IdfStatus`] and
//! stores a message retrievable with [`idf_last_error`] on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use infdist::matstore::{self, Dtype, GradientMatrix, Role};
use infdist::qpsolve::{self, QpProblem, WeightSolution};
use infdist::{Error, ErrorKind, InfluenceObjects, SketchMethod, SketchSpec, TargetGradient};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdfStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Input failed validation (shape, range, finiteness, format).
    Invalid = 2,
    /// A numerical failure (singular system, iteration cap).
    Numerical = 3,
    /// File could not be read or written.
    Io = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

/// Sketch method selector for [`idf_project`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdfSketch {
    Hadamard = 0,
    Rademacher = 1,
}

/// Opaque dense row-major matrix.
pub struct IdfMatrix(GradientMatrix);

/// Opaque solver result.
pub struct IdfSolution(WeightSolution);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> IdfStatus {
    match e.kind() {
        ErrorKind::Validation => IdfStatus::Invalid,
        ErrorKind::Numerical => IdfStatus::Numerical,
        ErrorKind::Io => IdfStatus::Io,
    }
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), IdfStatus>) -> IdfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            IdfStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside infdist".into());
            IdfStatus::Panic
        }
    }
}

fn fail(e: Error) -> IdfStatus {
    set_error(e.to_string());
    status_of(&e)
}

fn null(what: &str) -> IdfStatus {
    set_error(format!("null pointer: {what}"));
    IdfStatus::NullPointer
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, IdfStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(Error::InvalidArgument(format!("{what} is not UTF-8"))))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], IdfStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn matrix_arg<'a>(m: *const IdfMatrix, what: &str) -> Result<&'a GradientMatrix, IdfStatus> {
    m.as_ref().map(|m| &m.0).ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Last error message on this thread, or null. Valid until the next call on
/// this thread.
#[no_mangle]
pub extern "C" fn idf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn idf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `rows * cols` row-major values into a new matrix.
///
/// # Safety
/// `data` must point to `rows * cols` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn idf_matrix_from_data(
    rows: usize,
    cols: usize,
    data: *const f64,
    out: *mut *mut IdfMatrix,
) -> IdfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| fail(Error::InvalidArgument("shape overflows".into())))?;
        let values = slice_arg(data, len, "data")?.to_vec();
        let m = GradientMatrix::new(rows, cols, values, Role::Source).map_err(fail)?;
        put(out, IdfMatrix(m));
        Ok(())
    })
}

/// Reads a matrix file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn idf_matrix_read(path: *const c_char, out: *mut *mut IdfMatrix) -> IdfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let m = matstore::read_matrix(path, Role::Source).map_err(fail)?;
        put(out, IdfMatrix(m));
        Ok(())
    })
}

/// Writes a matrix file; `f32` selects single precision storage.
///
/// # Safety
/// `m` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn idf_matrix_write(m: *const IdfMatrix, path: *const c_char, f32: bool) -> IdfStatus {
    guard(|| {
        let m = matrix_arg(m, "matrix")?;
        let path = path_arg(path, "path")?;
        let dtype = if f32 { Dtype::F32 } else { Dtype::F64 };
        matstore::write_matrix(m, path, dtype).map_err(fail)
    })
}

/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn idf_matrix_rows(m: *const IdfMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.rows())
}

/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn idf_matrix_cols(m: *const IdfMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.cols())
}

/// Row-major data pointer, valid while the handle lives.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn idf_matrix_data(m: *const IdfMatrix) -> *const f64 {
    m.as_ref().map_or(ptr::null(), |m| m.0.data().as_ptr())
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn idf_matrix_free(m: *mut IdfMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// First-order scores p = G_S g_T, written into `p_out` (length `source` rows).
/// The target gradient is the normalized mean of the `target` rows.
///
/// # Safety
/// Handles must be live; `p_out` must have room for `rows(source)` doubles.
#[no_mangle]
pub unsafe extern "C" fn idf_compute_p(
    source: *const IdfMatrix,
    target: *const IdfMatrix,
    normalize: bool,
    p_out: *mut f64,
) -> IdfStatus {
    guard(|| {
        let g_s = matrix_arg(source, "source")?;
        let g_t = matrix_arg(target, "target")?;
        if p_out.is_null() {
            return Err(null("p_out"));
        }
        let t = TargetGradient::from_rows(g_t, normalize).map_err(fail)?;
        let p = infdist::influence::compute_p(g_s, &t, normalize).map_err(fail)?;
        ptr::copy_nonoverlapping(p.as_ptr(), p_out, p.len());
        Ok(())
    })
}

/// Closed-form first-order weights.
///
/// # Safety
/// `p` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn idf_solve_first_order(
    p: *const f64,
    n: usize,
    lambda: f64,
    out: *mut *mut IdfSolution,
) -> IdfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = slice_arg(p, n, "p")?;
        let sol = qpsolve::solve_first_order(p, lambda).map_err(fail)?;
        put(out, IdfSolution(sol));
        Ok(())
    })
}

/// Second-order weights via the active-set solver. `q` is n x n.
///
/// # Safety
/// `p` must point to `n` doubles, `q` must be a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn idf_solve_active_set(
    p: *const f64,
    n: usize,
    q: *const IdfMatrix,
    eta: f64,
    lambda: f64,
    out: *mut *mut IdfSolution,
) -> IdfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = slice_arg(p, n, "p")?.to_vec();
        let q = matrix_arg(q, "q")?.to_dmatrix();
        let obj = InfluenceObjects::second_order(p, q, eta).map_err(fail)?;
        let sol = qpsolve::solve_active_set(&QpProblem::from_objects(&obj, lambda)).map_err(fail)?;
        put(out, IdfSolution(sol));
        Ok(())
    })
}

/// Tunes lambda so the first-order solution has `k` nonzero weights. `exact`
/// (optional) reports whether exactly `k` was reached.
///
/// # Safety
/// `p` must point to `n` doubles; `out` writable; `exact` null or writable.
#[no_mangle]
pub unsafe extern "C" fn idf_tune_lambda(
    p: *const f64,
    n: usize,
    k: usize,
    max_iters: usize,
    out: *mut *mut IdfSolution,
    exact: *mut bool,
) -> IdfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = slice_arg(p, n, "p")?;
        let tuned = qpsolve::tune_lambda(p, k, max_iters).map_err(fail)?;
        if !exact.is_null() {
            *exact = tuned.exact;
        }
        put(out, IdfSolution(tuned.solution));
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn idf_solution_len(s: *const IdfSolution) -> usize {
    s.as_ref().map_or(0, |s| s.0.weights.len())
}

/// Weight vector pointer, valid while the handle lives.
///
/// # Safety
/// `s` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn idf_solution_weights(s: *const IdfSolution) -> *const f64 {
    s.as_ref().map_or(ptr::null(), |s| s.0.weights.as_ptr())
}

/// # Safety
/// `s` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn idf_solution_lambda(s: *const IdfSolution) -> f64 {
    s.as_ref().map_or(f64::NAN, |s| s.0.lambda)
}

/// # Safety
/// `s` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn idf_solution_support_len(s: *const IdfSolution) -> usize {
    s.as_ref().map_or(0, |s| s.0.support_len())
}

/// # Safety
/// `s` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn idf_solution_free(s: *mut IdfSolution) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Projects every row of `m` to `out_dim` columns. `premask` of 0 means none.
///
/// # Safety
/// `m` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn idf_project(
    m: *const IdfMatrix,
    method: IdfSketch,
    out_dim: u64,
    premask: u64,
    seed: u64,
    out: *mut *mut IdfMatrix,
) -> IdfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let g = matrix_arg(m, "matrix")?;
        let method = match method {
            IdfSketch::Hadamard => SketchMethod::Hadamard,
            IdfSketch::Rademacher => SketchMethod::Rademacher,
        };
        let mut spec = SketchSpec::new(method, g.cols() as u64, out_dim, seed);
        if premask > 0 {
            spec = spec.with_premask(premask);
        }
        let y = spec.prepare().and_then(|s| s.project_rows(g)).map_err(fail)?;
        put(out, IdfMatrix(y));
        Ok(())
    })
}
