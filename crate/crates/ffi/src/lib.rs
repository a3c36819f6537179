//! C ABI over the `gipip` library.
//!
//! Every fallible function returns a [`GipipStatus`]; on failure the message
//! is available from [`gipip_last_error`] on the same thread. Objects are
//! opaque handles created by `*_new`/`*_load`/`*_run` functions and released
//! by the matching `*_free`. Passing NULL to a `*_free` function is a no-op.
//!
//! Images are NCHW `double` buffers with values in [0, 1].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gipip::attack::{run_attack, AttackConfig, AttackResult, Method};
use gipip::flsim::{client_compute_gradient, ClientBatch, SharedGradient};
use gipip::metrics;
use gipip::nn::{init_classifier, Arch, AutoEncoderParams, ClassifierParams, ClassifierSpec, InitScheme};
use gipip::prior::load_autoencoder;
use gipip::tensor::Tensor;
use gipip::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GipipStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    Argument = 3,
    Config = 4,
    Format = 5,
    Numeric = 6,
    PartitionViolation = 7,
    Contract = 8,
    Io = 9,
    Panic = 10,
}

/// A classifier θ_g.
pub struct GipipClassifier(ClassifierParams);

/// A trained anomaly-score auto-encoder.
pub struct GipipAutoEncoder(AutoEncoderParams);

/// A gradient shared by a client, with its labels and model fingerprint.
pub struct GipipGradient(SharedGradient);

/// The outcome of an attack.
pub struct GipipAttackResult(AttackResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GipipStatus {
    match e {
        Error::Dimension(_) => GipipStatus::Dimension,
        Error::Argument(_) => GipipStatus::Argument,
        Error::Config(_) => GipipStatus::Config,
        Error::Format { .. } => GipipStatus::Format,
        Error::Numeric { .. } => GipipStatus::Numeric,
        Error::PartitionViolation(_) => GipipStatus::PartitionViolation,
        Error::Contract(_) => GipipStatus::Contract,
        Error::Io { .. } => GipipStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GipipStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GipipStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            GipipStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            GipipStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn string<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::Argument(format!("{what} is not valid UTF-8"))))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, len: usize) -> Result<(), Fail> {
    if len != src.len() {
        return Err(Fail::Lib(Error::Argument(format!("buffer holds {len} values, need {}", src.len()))));
    }
    if dst.is_null() {
        return Err(Fail::Null("buffer"));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), dst, len);
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gipip_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gipip_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Kaiming-uniform classifier. `arch` is "dense1", "mlp2" or "convnet".
///
/// # Safety
/// `arch` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn gipip_classifier_new(
    arch: *const c_char,
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
    out: *mut *mut GipipClassifier,
) -> GipipStatus {
    guard(|| {
        let arch: Arch = string(arch, "arch")?.parse()?;
        let spec = ClassifierSpec::new(arch, [channels, height, width], num_classes);
        put(out, GipipClassifier(init_classifier(spec, InitScheme::kaiming(seed))?))
    })
}

/// Number of scalar parameters, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gipip_classifier_param_count(model: *const GipipClassifier) -> usize {
    model.as_ref().map_or(0, |m| m.0.params.num_values())
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gipip_classifier_free(model: *mut GipipClassifier) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads an auto-encoder model file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn gipip_autoencoder_load(path: *const c_char, out: *mut *mut GipipAutoEncoder) -> GipipStatus {
    guard(|| {
        let path = string(path, "path")?;
        put(out, GipipAutoEncoder(load_autoencoder(Path::new(path))?))
    })
}

/// # Safety
/// `ae` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gipip_autoencoder_free(ae: *mut GipipAutoEncoder) {
    if !ae.is_null() {
        drop(Box::from_raw(ae));
    }
}

fn images(model: &ClassifierParams, data: &[f64], n: usize) -> Result<Tensor, Error> {
    let [c, h, w] = model.spec.input;
    Tensor::new(vec![n, c, h, w], data.to_vec())
}

/// Client step: gradient of the mean cross-entropy of `n` images.
///
/// # Safety
/// `images` must hold `n·C·H·W` values and `labels` `n` values.
#[no_mangle]
pub unsafe extern "C" fn gipip_client_gradient(
    model: *const GipipClassifier,
    images_ptr: *const f64,
    labels: *const usize,
    n: usize,
    out: *mut *mut GipipGradient,
) -> GipipStatus {
    guard(|| {
        let m = &non_null(model, "model")?.0;
        let [c, h, w] = m.spec.input;
        let x = images(m, slice(images_ptr, n * c * h * w, "images")?, n)?;
        let batch = ClientBatch::new(x, slice(labels, n, "labels")?.to_vec())?;
        put(out, GipipGradient(client_compute_gradient(m, &batch)?))
    })
}

/// Length of the flattened gradient, or 0 for NULL.
///
/// # Safety
/// `grad` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gipip_gradient_len(grad: *const GipipGradient) -> usize {
    grad.as_ref().map_or(0, |g| g.0.gradient().len())
}

/// Copies the flattened gradient into `buf` of exactly `len` values.
///
/// # Safety
/// `buf` must be writable for `len` values.
#[no_mangle]
pub unsafe extern "C" fn gipip_gradient_copy(grad: *const GipipGradient, buf: *mut f64, len: usize) -> GipipStatus {
    guard(|| copy_out(&non_null(grad, "grad")?.0.gradient().flatten(), buf, len))
}

/// # Safety
/// `grad` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gipip_gradient_free(grad: *mut GipipGradient) {
    if !grad.is_null() {
        drop(Box::from_raw(grad));
    }
}

/// Reconstructs the batch behind `grad`. `method` is "gipip", "ig" or
/// "dlg"; "gipip" needs `ae`, the others need `ae` to be NULL. Other
/// settings take their per-method defaults.
///
/// # Safety
/// Handles must be live; `method` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gipip_attack_run(
    method: *const c_char,
    iterations: usize,
    seed: u64,
    model: *const GipipClassifier,
    grad: *const GipipGradient,
    ae: *const GipipAutoEncoder,
    out: *mut *mut GipipAttackResult,
) -> GipipStatus {
    guard(|| {
        let method: Method = string(method, "method")?.parse()?;
        let cfg = AttackConfig { iterations, seed, ..AttackConfig::for_method(method) };
        let m = &non_null(model, "model")?.0;
        let g = &non_null(grad, "grad")?.0;
        let res = run_attack(&cfg, g, m, ae.as_ref().map(|a| &a.0))?;
        put(out, GipipAttackResult(res))
    })
}

/// Number of values in the recovered batch, or 0 for NULL.
///
/// # Safety
/// `result` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gipip_attack_result_len(result: *const GipipAttackResult) -> usize {
    result.as_ref().map_or(0, |r| r.0.recovered().numel())
}

/// Copies the recovered NCHW batch into `buf` of exactly `len` values.
///
/// # Safety
/// `buf` must be writable for `len` values.
#[no_mangle]
pub unsafe extern "C" fn gipip_attack_result_copy(
    result: *const GipipAttackResult,
    buf: *mut f64,
    len: usize,
) -> GipipStatus {
    guard(|| copy_out(non_null(result, "result")?.0.recovered().data(), buf, len))
}

/// Final unweighted gradient-matching term of the selected restart.
///
/// # Safety
/// `result` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gipip_attack_result_grad_loss(result: *const GipipAttackResult, out: *mut f64) -> GipipStatus {
    guard(|| {
        let v = non_null(result, "result")?.0.final_terms().grad_matching;
        *out.as_mut().ok_or(Fail::Null("out"))? = v;
        Ok(())
    })
}

/// # Safety
/// `result` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gipip_attack_result_free(result: *mut GipipAttackResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// PSNR with peak 1 between two equal-length buffers; +inf when identical.
///
/// # Safety
/// `a` and `b` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gipip_psnr(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> GipipStatus {
    guard(|| {
        let a = Tensor::new(vec![len], slice(a, len, "a")?.to_vec())?;
        let b = Tensor::new(vec![len], slice(b, len, "b")?.to_vec())?;
        *out.as_mut().ok_or(Fail::Null("out"))? = metrics::psnr(&a, &b)?;
        Ok(())
    })
}

/// SSIM of two CHW images (11×11 Gaussian window, σ = 1.5).
///
/// # Safety
/// `a` and `b` must hold `c·h·w` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gipip_ssim(
    a: *const f64,
    b: *const f64,
    c: usize,
    h: usize,
    w: usize,
    out: *mut f64,
) -> GipipStatus {
    guard(|| {
        let len = c * h * w;
        let a = Tensor::new(vec![c, h, w], slice(a, len, "a")?.to_vec())?;
        let b = Tensor::new(vec![c, h, w], slice(b, len, "b")?.to_vec())?;
        *out.as_mut().ok_or(Fail::Null("out"))? = metrics::ssim(&a, &b)?;
        Ok(())
    })
}
