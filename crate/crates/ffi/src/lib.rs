//! C ABI over `tvseg`.
//!
//! Every function returns a [`TvsegStatus`]. On failure the message is kept
//! per thread and can be copied out with [`tvseg_last_error`]. Arrays are
//! channel-major (`c`, then row, then column) `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use tvseg::activation::{reg_relu_iterative, reg_softmax_iterative_value, RegActConfig};
use tvseg::metrics::{regularization_effect, ConfusionMatrix, ReMode};
use tvseg::net::{read_checkpoint, Network};
use tvseg::{Error, Field3, LabelMap, Shape};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TvsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    Panic = 6,
}

/// Opaque handle to a trained network.
pub struct TvsegNetwork {
    net: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> TvsegStatus {
    match e {
        Error::Io { .. } => TvsegStatus::Io,
        Error::MalformedHeader { .. }
        | Error::UnsupportedMaxval { .. }
        | Error::TruncatedPayload { .. }
        | Error::Checkpoint(_)
        | Error::Manifest(_) => TvsegStatus::Format,
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } => TvsegStatus::Numeric,
        _ => TvsegStatus::InvalidArgument,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TvsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TvsegStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            TvsegStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            TvsegStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

/// # Safety
/// `p` must be valid for reading `shape.len()` doubles.
unsafe fn read_field(p: *const f64, shape: Shape) -> Result<Field3, Failure> {
    let p = non_null(p, "input buffer")?;
    let data = std::slice::from_raw_parts(p, shape.len()).to_vec();
    Ok(Field3::from_vec(shape, data)?)
}

/// # Safety
/// `out` must be valid for writing `src.len()` doubles.
unsafe fn write_out(out: *mut f64, src: &[f64]) -> Result<(), Failure> {
    non_null(out, "output buffer")?;
    std::ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`) and returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for writing `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn tvseg_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint. On success `*out` owns a handle to release with
/// [`tvseg_network_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tvseg_network_load(
    path: *const c_char,
    out: *mut *mut TvsegNetwork,
) -> TvsegStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::InvalidConfig("path is not UTF-8".into()))?;
        let net = read_checkpoint(Path::new(p))?;
        *out = Box::into_raw(Box::new(TvsegNetwork { net }));
        Ok(())
    })
}

/// # Safety
/// `net` must be null or a handle from [`tvseg_network_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tvseg_network_free(net: *mut TvsegNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of output classes.
///
/// # Safety
/// `net` must be a live handle; `classes` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tvseg_network_classes(
    net: *const TvsegNetwork,
    classes: *mut usize,
) -> TvsegStatus {
    guard(|| {
        let net = &*non_null(net, "network")?;
        non_null(classes, "classes")?;
        *classes = net.net.spec().classes;
        Ok(())
    })
}

/// Segments a `3 x height x width` image. `probs` (may be null) receives
/// `classes x height x width` probabilities, `labels` (may be null) the
/// `height x width` argmax.
///
/// # Safety
/// Buffers must have the sizes above; `net` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tvseg_network_predict(
    net: *const TvsegNetwork,
    image: *const f64,
    height: usize,
    width: usize,
    iterations: usize,
    probs: *mut f64,
    labels: *mut u8,
) -> TvsegStatus {
    guard(|| {
        let net = &(*non_null(net, "network")?).net;
        let x = read_field(image, Shape::new(net.spec().input_channels, height, width)?)?;
        let (p, l) = net.predict(&x, iterations)?;
        if !probs.is_null() {
            write_out(probs, p.as_slice())?;
        }
        if !labels.is_null() {
            std::ptr::copy_nonoverlapping(l.as_slice().as_ptr(), labels, l.len());
        }
        Ok(())
    })
}

/// Iterative regularized softmax of `channels x height x width` logits.
///
/// # Safety
/// `logits` and `out` must each hold `channels * height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn tvseg_reg_softmax(
    logits: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    lambda: f64,
    tau: f64,
    iterations: usize,
    out: *mut f64,
) -> TvsegStatus {
    guard(|| {
        let o = read_field(logits, Shape::new(channels, height, width)?)?;
        let (a, _) =
            reg_softmax_iterative_value(&o, &RegActConfig::iterative(lambda, tau, iterations))?;
        write_out(out, a.as_slice())
    })
}

/// Iterative regularized ReLU, same layout as [`tvseg_reg_softmax`].
///
/// # Safety
/// `input` and `out` must each hold `channels * height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn tvseg_reg_relu(
    input: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    lambda: f64,
    tau: f64,
    iterations: usize,
    out: *mut f64,
) -> TvsegStatus {
    guard(|| {
        let o = read_field(input, Shape::new(channels, height, width)?)?;
        let (a, _) = reg_relu_iterative(&o, &RegActConfig::iterative(lambda, tau, iterations))?;
        write_out(out, a.as_slice())
    })
}

/// Mean IoU (percent) and global accuracy (percent) of `pred` against
/// `truth`, both `count` labels long.
///
/// # Safety
/// `pred` and `truth` must hold `count` bytes; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn tvseg_segmentation_scores(
    pred: *const u8,
    truth: *const u8,
    count: usize,
    classes: usize,
    miou: *mut f64,
    accuracy: *mut f64,
) -> TvsegStatus {
    guard(|| {
        non_null(pred, "pred")?;
        non_null(truth, "truth")?;
        non_null(miou, "miou")?;
        non_null(accuracy, "accuracy")?;
        if classes == 0 || classes > 256 {
            return Err(Error::InvalidConfig(format!(
                "classes must lie in 1..=256, got {classes}"
            ))
            .into());
        }
        let p = LabelMap::new(1, count, std::slice::from_raw_parts(pred, count).to_vec())?;
        let t = LabelMap::new(1, count, std::slice::from_raw_parts(truth, count).to_vec())?;
        let mut cm = ConfusionMatrix::new(classes);
        cm.add(&p, &t)?;
        *miou = cm.miou();
        *accuracy = cm.accuracy();
        Ok(())
    })
}

/// Regularization effect of a `height x width` label map.
///
/// # Safety
/// `labels` must hold `height * width` bytes; `re` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tvseg_regularization_effect(
    labels: *const u8,
    height: usize,
    width: usize,
    re: *mut f64,
) -> TvsegStatus {
    guard(|| {
        non_null(labels, "labels")?;
        non_null(re, "re")?;
        let n = height
            .checked_mul(width)
            .ok_or(Failure::Lib(Error::InvalidShape("overflow".into())))?;
        let l = LabelMap::new(
            height,
            width,
            std::slice::from_raw_parts(labels, n).to_vec(),
        )?;
        *re = regularization_effect(&l, ReMode::LabelIndex);
        Ok(())
    })
}
