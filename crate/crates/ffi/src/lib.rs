//! C ABI over the flowlab core.
//!
//! Conventions:
//! - Every fallible function returns a [`FlowlabStatus`]; on failure a message
//!   is available from [`flowlab_last_error`] on the same thread.
//! - Datasets and networks are opaque handles returned through an out
//!   pointer by the generators and loaders, and released with the matching
//!   `*_free`.
//! - Vectors and matrices are caller-owned `double` buffers; matrices are
//!   row-major. Point-sized buffers share one `dim` argument, which must equal
//!   the handle's dimension; matrix outputs take an explicit element count,
//!   which must equal the expected size.
//! - Panics never cross the boundary; they are reported as
//!   [`FlowlabStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use flowlab::datasets::{gen_gaussian_mixture, gen_two_moons};
use flowlab::efm_estimator::{make_target, verify_instance};
use flowlab::exact_field::ExactField;
use flowlab::neural_velocity::{Checkpoint, VelocityNet};
use flowlab::sampler::{sample_batch, FieldSource, Method};
use flowlab::{Error, TrainingSet};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowlabStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument was out of range or inconsistent (including buffer lengths).
    InvalidArgument = 2,
    /// A dataset or checkpoint file was malformed.
    Format = 3,
    /// Non-finite values, divergence or an oversized enumeration.
    Numeric = 4,
    /// A time at or beyond the `1 - t_eps` cap was requested.
    Singularity = 5,
    /// A file could not be read or written.
    Io = 6,
    /// An internal panic was caught.
    Panic = 7,
}

/// ODE integration scheme for the `flowlab_sample_*` functions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowlabMethod {
    Euler = 0,
    Midpoint = 1,
    Rk4 = 2,
}

impl From<FlowlabMethod> for Method {
    fn from(m: FlowlabMethod) -> Self {
        match m {
            FlowlabMethod::Euler => Method::Euler,
            FlowlabMethod::Midpoint => Method::Midpoint,
            FlowlabMethod::Rk4 => Method::Rk4,
        }
    }
}

/// Opaque training set.
pub struct FlowlabDataset(TrainingSet);

/// Opaque velocity network.
pub struct FlowlabNet(VelocityNet);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Message of the most recent failure on this thread, or null if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn flowlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Forgets the stored error message for this thread.
#[no_mangle]
pub extern "C" fn flowlab_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(FlowlabStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.root() {
            Error::InvalidArgument(_) => FlowlabStatus::InvalidArgument,
            Error::Format { .. } => FlowlabStatus::Format,
            Error::Singularity { .. } => FlowlabStatus::Singularity,
            Error::Io(_) => FlowlabStatus::Io,
            _ => FlowlabStatus::Numeric,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(FlowlabStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: String) -> Failure {
    Failure(FlowlabStatus::InvalidArgument, message)
}

/// Runs `body`, converting errors and panics into a status plus message.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> FlowlabStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => FlowlabStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {message}"));
            FlowlabStatus::Panic
        }
    }
}

unsafe fn input<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a>(ptr: *mut f64, len: usize, expected: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len != expected {
        return Err(invalid(format!("{what} has length {len}, expected {expected}")));
    }
    if expected == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn path(ptr: *const c_char) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid("path is not valid UTF-8".into()))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Two interleaving half-circles with Gaussian noise.
///
/// # Safety
/// `out` must be a valid pointer to writable handle storage.
#[no_mangle]
pub unsafe extern "C" fn flowlab_dataset_two_moons(
    n: usize,
    noise_std: f64,
    seed: u64,
    out: *mut *mut FlowlabDataset,
) -> FlowlabStatus {
    guard(|| emit(out, FlowlabDataset(gen_two_moons(n, noise_std, seed)?)))
}

/// `k`-component unit-variance Gaussian mixture in `dim` dimensions.
///
/// # Safety
/// `out` must be a valid pointer to writable handle storage.
#[no_mangle]
pub unsafe extern "C" fn flowlab_dataset_gaussian_mixture(
    n: usize,
    dim: usize,
    k: usize,
    spread: f64,
    seed: u64,
    out: *mut *mut FlowlabDataset,
) -> FlowlabStatus {
    guard(|| emit(out, FlowlabDataset(gen_gaussian_mixture(n, dim, k, spread, seed)?)))
}

/// Builds a dataset from `n x dim` row-major points.
///
/// # Safety
/// `points` must hold `n * dim` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flowlab_dataset_from_points(
    points: *const f64,
    n: usize,
    dim: usize,
    out: *mut *mut FlowlabDataset,
) -> FlowlabStatus {
    guard(|| {
        let len = n.checked_mul(dim).ok_or_else(|| invalid("n * dim overflows".into()))?;
        let data = input(points, len, "points")?;
        let rows: Vec<Vec<f64>> = if dim == 0 {
            Vec::new()
        } else {
            data.chunks(dim).map(<[f64]>::to_vec).collect()
        };
        emit(out, FlowlabDataset(TrainingSet::from_rows(&rows, "points")?))
    })
}

/// Reads a dataset file.
///
/// # Safety
/// `file` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flowlab_dataset_load(file: *const c_char, out: *mut *mut FlowlabDataset) -> FlowlabStatus {
    guard(|| emit(out, FlowlabDataset(TrainingSet::load(path(file)?)?)))
}

/// Writes a dataset file.
///
/// # Safety
/// `dataset` must be a live handle; `file` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn flowlab_dataset_save(dataset: *const FlowlabDataset, file: *const c_char) -> FlowlabStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        ds.0.save(path(file)?)?;
        Ok(())
    })
}

/// Number of points (0 for a null handle).
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flowlab_dataset_len(dataset: *const FlowlabDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.n())
}

/// Ambient dimension (0 for a null handle).
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flowlab_dataset_dim(dataset: *const FlowlabDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.dim())
}

/// Copies the points into `out` (`n * dim` doubles, row-major).
///
/// # Safety
/// `dataset` must be a live handle; `out` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn flowlab_dataset_points(
    dataset: *const FlowlabDataset,
    out: *mut f64,
    len: usize,
) -> FlowlabStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        let dst = output(out, len, ds.0.n() * ds.0.dim(), "out")?;
        for (d, &s) in dst.iter_mut().zip(ds.0.points().iter()) {
            *d = s as f64;
        }
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn flowlab_dataset_free(dataset: *mut FlowlabDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Evaluates the closed-form optimal velocity at `(x, t)`; `x` and `out`
/// have the dataset's dimension.
///
/// # Safety
/// `dataset` must be a live handle; `x`/`out` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn flowlab_exact_velocity(
    dataset: *const FlowlabDataset,
    x: *const f64,
    dim: usize,
    t: f64,
    t_eps: f64,
    out: *mut f64,
) -> FlowlabStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        let x = input(x, dim, "x")?;
        let dst = output(out, dim, ds.0.dim(), "out")?;
        let u = ExactField::new(&ds.0, t_eps)?.velocity(x, t)?;
        dst.copy_from_slice(&u);
        Ok(())
    })
}

/// EFM regression target at `x_t = (1 - t) x0 + t x_{x1_index}` from a
/// batch of `m` points (`x1` plus `m - 1` companions drawn from `seed`).
///
/// # Safety
/// `dataset` must be a live handle; `x0`/`out` must hold `dim` doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn flowlab_efm_target(
    dataset: *const FlowlabDataset,
    x0: *const f64,
    dim: usize,
    x1_index: usize,
    t: f64,
    m: usize,
    seed: u64,
    t_eps: f64,
    out: *mut f64,
) -> FlowlabStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        let x0 = input(x0, dim, "x0")?;
        let dst = output(out, dim, ds.0.dim(), "out")?;
        let target = make_target(x0, x1_index, t, m, &ds.0, seed, t_eps)?;
        dst.copy_from_slice(&target.u_hat_m);
        Ok(())
    })
}

/// Checks the estimator's mean against exhaustive enumeration on one random
/// instance; writes the absolute error and whether the variance bound held.
///
/// # Safety
/// `max_error` and `variance_ok` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flowlab_efm_verify(
    n: usize,
    m: usize,
    d: usize,
    seed: u64,
    trial: u64,
    max_error: *mut f64,
    variance_ok: *mut bool,
) -> FlowlabStatus {
    guard(|| {
        if max_error.is_null() || variance_ok.is_null() {
            return Err(null("output"));
        }
        let r = verify_instance(n, m, d, seed, trial)?;
        *max_error = r.unbiasedness_error;
        *variance_ok = r.variance_ok(1e-12);
        Ok(())
    })
}

/// Loads a network checkpoint; with `use_ema` the EMA weights are returned.
///
/// # Safety
/// `file` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flowlab_net_load(
    file: *const c_char,
    use_ema: bool,
    out: *mut *mut FlowlabNet,
) -> FlowlabStatus {
    guard(|| {
        let file = path(file)?;
        let ck = Checkpoint::load(&file)?;
        let net = if use_ema {
            ck.ema
                .map(|e| e.shadow)
                .ok_or_else(|| invalid(format!("{} has no EMA weights", file.display())))?
        } else {
            ck.net
        };
        emit(out, FlowlabNet(net))
    })
}

/// Input/output dimension of a network (0 for a null handle).
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flowlab_net_dim(net: *const FlowlabNet) -> usize {
    net.as_ref().map_or(0, |n| n.0.dim())
}

/// Learned velocity at `(x, t)`.
///
/// # Safety
/// `net` must be a live handle; `x`/`out` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn flowlab_net_forward(
    net: *const FlowlabNet,
    x: *const f64,
    dim: usize,
    t: f64,
    out: *mut f64,
) -> FlowlabStatus {
    guard(|| {
        let net = handle(net, "net")?;
        let x = input(x, dim, "x")?;
        let dst = output(out, dim, net.0.dim(), "out")?;
        dst.copy_from_slice(&net.0.forward(x, t)?);
        Ok(())
    })
}

/// Releases a network. Null is ignored.
///
/// # Safety
/// `net` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn flowlab_net_free(net: *mut FlowlabNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

#[allow(clippy::too_many_arguments)]
unsafe fn sample_into(
    field: &FieldSource<'_>,
    n_samples: usize,
    steps: usize,
    method: FlowlabMethod,
    seed: u64,
    t_eps: f64,
    out: *mut f64,
    len: usize,
) -> Result<(), Failure> {
    let dst = output(out, len, n_samples * field.dim(), "out")?;
    let ends = sample_batch(n_samples, field, steps, method.into(), seed, t_eps)?;
    for (d, &s) in dst.iter_mut().zip(ends.iter()) {
        *d = s;
    }
    Ok(())
}

/// Integrates `n_samples` noise starts under the exact field; writes the
/// `n_samples x dim` endpoints row-major.
///
/// # Safety
/// `dataset` must be a live handle; `out` must hold `len` writable doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn flowlab_sample_exact(
    dataset: *const FlowlabDataset,
    n_samples: usize,
    steps: usize,
    method: FlowlabMethod,
    seed: u64,
    t_eps: f64,
    out: *mut f64,
    len: usize,
) -> FlowlabStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        sample_into(
            &FieldSource::Exact(&ds.0),
            n_samples,
            steps,
            method,
            seed,
            t_eps,
            out,
            len,
        )
    })
}

/// As [`flowlab_sample_exact`] under a learned field.
///
/// # Safety
/// `net` must be a live handle; `out` must hold `len` writable doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn flowlab_sample_learned(
    net: *const FlowlabNet,
    n_samples: usize,
    steps: usize,
    method: FlowlabMethod,
    seed: u64,
    t_eps: f64,
    out: *mut f64,
    len: usize,
) -> FlowlabStatus {
    guard(|| {
        let net = handle(net, "net")?;
        sample_into(
            &FieldSource::Learned(&net.0),
            n_samples,
            steps,
            method,
            seed,
            t_eps,
            out,
            len,
        )
    })
}

/// Hybrid sampling: the exact field for the first `round(tau * steps)` steps,
/// then the learned one.
///
/// # Safety
/// Both handles must be live; `out` must hold `len` writable doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn flowlab_sample_hybrid(
    dataset: *const FlowlabDataset,
    net: *const FlowlabNet,
    tau: f64,
    n_samples: usize,
    steps: usize,
    method: FlowlabMethod,
    seed: u64,
    t_eps: f64,
    out: *mut f64,
    len: usize,
) -> FlowlabStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        let net = handle(net, "net")?;
        let field = FieldSource::Hybrid {
            ts: &ds.0,
            net: &net.0,
            tau,
        };
        sample_into(&field, n_samples, steps, method, seed, t_eps, out, len)
    })
}
