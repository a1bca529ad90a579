//! C ABI over the `pointflow` crate.
//!
//! Every function returns a [`PfStatus`]; on failure the message is
//! available from [`pf_last_error`] on the same thread. Point buffers are
//! row-major `double` arrays of `n * dim` values. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ndarray::ArrayView2;
use pointflow::data::{NormalizationStats, PointCloud};
use pointflow::model::PointFlowModel;
use pointflow::train::Checkpoint;
use pointflow::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    Io = 4,
    Checkpoint = 5,
    Panic = 6,
}

/// A loaded model. Create with [`pf_model_load`], release with
/// [`pf_model_free`].
pub struct PfModel {
    model: PointFlowModel,
    normalization: Option<NormalizationStats>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("interior NULs removed"));
}

fn status_of(e: &Error) -> PfStatus {
    match e {
        _ if e.is_numerical() => PfStatus::Numerical,
        Error::Io(_) | Error::Parse { .. } => PfStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => PfStatus::Checkpoint,
        _ => PfStatus::InvalidArgument,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (PfStatus, String)>) -> PfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PfStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (PfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PfStatus, String) {
    (PfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (PfStatus, String) {
    (PfStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `data` must point to `n * dim` readable doubles when non-null.
unsafe fn cloud_view<'a>(data: *const f64, n: usize, dim: usize, what: &str) -> Result<ArrayView2<'a, f64>, (PfStatus, String)> {
    if data.is_null() {
        return Err(null(what));
    }
    if n == 0 || dim == 0 {
        return Err(invalid(format!("{what} must hold at least one point of positive dimension")));
    }
    let len = n.checked_mul(dim).ok_or_else(|| invalid("buffer size overflows"))?;
    let slice = std::slice::from_raw_parts(data, len);
    Ok(ArrayView2::from_shape((n, dim), slice).expect("length matches shape"))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn pf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a checkpoint file into a new model handle written to `out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_model_load(path: *const c_char, out: *mut *mut PfModel) -> PfStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let ck = Checkpoint::load(path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(PfModel {
            model: ck.model,
            normalization: ck.normalization,
        }));
        Ok(())
    })
}

/// Release a handle from [`pf_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`pf_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pf_model_free(model: *mut PfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Point dimension of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_model_dim(model: *const PfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.d())
}

/// Latent code dimension of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_model_latent_dim(model: *const PfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.dz())
}

/// Sample one shape of `points` points into `out` (`points * dim`
/// doubles), in the coordinates of the training data. The result depends
/// only on the model and `seed`.
///
/// # Safety
/// `model` must be a live handle; `out` must hold `points * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn pf_model_sample(model: *const PfModel, points: usize, seed: u64, out: *mut f64) -> PfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if points == 0 {
            return Err(invalid("points must be at least 1"));
        }
        let mut rng = pointflow::rng::derived(seed, 0);
        let z = m.model.sample_shape(&mut rng).map_err(lib_err)?;
        let pts = m.model.sample_points(z.view(), points, &mut rng).map_err(lib_err)?;
        let mut cloud = PointCloud::new(pts).map_err(lib_err)?;
        if let Some(s) = &m.normalization {
            cloud = s.invert(&cloud).map_err(lib_err)?;
        }
        let dst = std::slice::from_raw_parts_mut(out, points * m.model.d());
        for (d, s) in dst.iter_mut().zip(cloud.points().iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Chamfer distance (sum of squared nearest-neighbour distances in both
/// directions) between `x` (`nx` points) and `y` (`ny` points).
///
/// # Safety
/// `x` and `y` must hold `nx * dim` and `ny * dim` doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pf_chamfer(
    x: *const f64,
    nx: usize,
    y: *const f64,
    ny: usize,
    dim: usize,
    out: *mut f64,
) -> PfStatus {
    guard(|| {
        let (xv, yv) = (cloud_view(x, nx, dim, "x")?, cloud_view(y, ny, dim, "y")?);
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = pointflow::metrics::chamfer(xv, yv).map_err(lib_err)?;
        Ok(())
    })
}

/// Earth mover's distance between two clouds of `n` points each. With
/// `epsilon > 0` the auction approximation (within `n * epsilon` of the
/// optimum) is used; with `epsilon == 0` the exact assignment.
///
/// # Safety
/// `x` and `y` must each hold `n * dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_emd(x: *const f64, y: *const f64, n: usize, dim: usize, epsilon: f64, out: *mut f64) -> PfStatus {
    guard(|| {
        let (xv, yv) = (cloud_view(x, n, dim, "x")?, cloud_view(y, n, dim, "y")?);
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = if epsilon == 0.0 {
            pointflow::metrics::emd_exact(xv, yv)
        } else {
            pointflow::metrics::emd_approx(xv, yv, epsilon)
        }
        .map_err(lib_err)?;
        Ok(())
    })
}
