//! C ABI over the landmark-mtl toolkit.
//!
//! Every fallible call returns an [`LmtlStatus`]. On failure a message is kept
//! per thread and can be fetched with [`lmtl_last_error_message`]. Networks and
//! phone inventories are opaque handles owned by the caller and released with
//! their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use landmark_mtl::cascade::{self, CascadeError};
use landmark_mtl::corpus::{self, PhoneInventory};
use landmark_mtl::features::FeatureMatrix;
use landmark_mtl::landmarks;
use landmark_mtl::net::{self, MTLNet, NetError};
use ndarray::ArrayView2;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmtlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Trained two-headed network.
pub struct LmtlNet {
    net: MTLNet,
}

/// Phone inventory with manner classes.
pub struct LmtlInventory {
    inv: PhoneInventory,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: LmtlStatus, msg: impl Into<String>) -> LmtlStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> LmtlStatus) -> LmtlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(LmtlStatus::Panic, "internal panic"),
    }
}

fn net_status(e: NetError) -> LmtlStatus {
    let status = match &e {
        NetError::DimensionMismatch { .. } => LmtlStatus::DimensionMismatch,
        NetError::Io(_) => LmtlStatus::Io,
        NetError::Format(_) => LmtlStatus::Format,
        _ => LmtlStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

fn cascade_status(e: CascadeError) -> LmtlStatus {
    match e {
        CascadeError::Net(n) => net_status(n),
        other => fail(LmtlStatus::InvalidArgument, other.to_string()),
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, LmtlStatus> {
    if path.is_null() {
        return Err(fail(LmtlStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(LmtlStatus::InvalidArgument, "path is not valid UTF-8"))
}

/// Length in bytes of the last error message on this thread, excluding the
/// terminating NUL.
#[no_mangle]
pub extern "C" fn lmtl_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message into `buf` (NUL-terminated, truncated to
/// `len - 1` bytes). Returns the full message length excluding the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lmtl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lmtl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an LMNN model file into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lmtl_net_load(path: *const c_char, out: *mut *mut LmtlNet) -> LmtlStatus {
    guard(|| {
        if out.is_null() {
            return fail(LmtlStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match net::load_model(path) {
            Ok(net) => {
                *out = Box::into_raw(Box::new(LmtlNet { net }));
                LmtlStatus::Ok
            }
            Err(e) => net_status(e),
        }
    })
}

/// Releases a network handle. Null is ignored.
///
/// # Safety
/// `net` must come from [`lmtl_net_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lmtl_net_free(net: *mut LmtlNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Input width; 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lmtl_net_input_dim(net: *const LmtlNet) -> usize {
    net.as_ref().map_or(0, |n| n.net.input_dim())
}

/// Number of phone classes; 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lmtl_net_phone_classes(net: *const LmtlNet) -> usize {
    net.as_ref().map_or(0, |n| n.net.phone_classes())
}

/// Number of landmark classes; 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lmtl_net_landmark_classes(net: *const LmtlNet) -> usize {
    net.as_ref().map_or(0, |n| n.net.landmark_classes())
}

unsafe fn input<'a>(x: *const f64, frames: usize, dim: usize) -> Result<ArrayView2<'a, f64>, LmtlStatus> {
    if x.is_null() && frames * dim > 0 {
        return Err(fail(LmtlStatus::NullPointer, "input is null"));
    }
    if frames == 0 {
        return Ok(ArrayView2::from_shape((0, dim), &[]).expect("empty view"));
    }
    let data = std::slice::from_raw_parts(x, frames * dim);
    Ok(ArrayView2::from_shape((frames, dim), data).expect("length matches shape"))
}

/// Posteriors of both heads for `frames` row-major input rows of width `dim`.
/// `phone_out` receives `frames * phone_classes` values and `landmark_out`
/// `frames * landmark_classes`; either may be null to skip it.
///
/// # Safety
/// `x` must hold `frames * dim` values and the outputs must be large enough.
#[no_mangle]
pub unsafe extern "C" fn lmtl_net_forward(
    net: *const LmtlNet,
    x: *const f64,
    frames: usize,
    dim: usize,
    phone_out: *mut f64,
    landmark_out: *mut f64,
) -> LmtlStatus {
    guard(|| {
        let Some(net) = net.as_ref() else {
            return fail(LmtlStatus::NullPointer, "net is null");
        };
        let x = match input(x, frames, dim) {
            Ok(x) => x,
            Err(s) => return s,
        };
        let (p_ph, p_la) = match net.net.forward(x) {
            Ok(p) => p,
            Err(e) => return net_status(e),
        };
        for (src, dst) in [(p_ph, phone_out), (p_la, landmark_out)] {
            if !dst.is_null() {
                let flat: Vec<f64> = src.iter().copied().collect();
                ptr::copy_nonoverlapping(flat.as_ptr(), dst, flat.len());
            }
        }
        LmtlStatus::Ok
    })
}

/// Landmark detection: argmax class and margin confidence per frame.
///
/// # Safety
/// `x` must hold `frames * dim` values; `classes_out` and `confidence_out`
/// must hold `frames` entries each.
#[no_mangle]
pub unsafe extern "C" fn lmtl_net_detect(
    net: *const LmtlNet,
    x: *const f64,
    frames: usize,
    dim: usize,
    classes_out: *mut u32,
    confidence_out: *mut f64,
) -> LmtlStatus {
    guard(|| {
        let Some(net) = net.as_ref() else {
            return fail(LmtlStatus::NullPointer, "net is null");
        };
        if frames > 0 && (classes_out.is_null() || confidence_out.is_null()) {
            return fail(LmtlStatus::NullPointer, "output buffer is null");
        }
        let x = match input(x, frames, dim) {
            Ok(x) => x,
            Err(s) => return s,
        };
        let fm = FeatureMatrix::new(x.to_owned(), 0.01);
        match cascade::detect(&net.net, &fm) {
            Ok(dets) => {
                for (i, d) in dets.iter().enumerate() {
                    *classes_out.add(i) = d.class as u32;
                    *confidence_out.add(i) = d.confidence;
                }
                LmtlStatus::Ok
            }
            Err(e) => cascade_status(e),
        }
    })
}

/// Margin confidence of a posterior of length `len`.
///
/// # Safety
/// `p` must hold `len` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lmtl_confidence(p: *const f64, len: usize, out: *mut f64) -> LmtlStatus {
    guard(|| {
        if p.is_null() || out.is_null() {
            return fail(LmtlStatus::NullPointer, "argument is null");
        }
        match cascade::confidence(std::slice::from_raw_parts(p, len)) {
            Ok(c) => {
                *out = c;
                LmtlStatus::Ok
            }
            Err(e) => cascade_status(e),
        }
    })
}

/// The built-in 48-phone TIMIT inventory.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lmtl_inventory_timit(out: *mut *mut LmtlInventory) -> LmtlStatus {
    guard(|| {
        if out.is_null() {
            return fail(LmtlStatus::NullPointer, "out is null");
        }
        *out = Box::into_raw(Box::new(LmtlInventory {
            inv: PhoneInventory::timit(),
        }));
        LmtlStatus::Ok
    })
}

/// Loads a `phone manner` inventory file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn lmtl_inventory_load(path: *const c_char, out: *mut *mut LmtlInventory) -> LmtlStatus {
    guard(|| {
        if out.is_null() {
            return fail(LmtlStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match corpus::load_inventory(path) {
            Ok(inv) => {
                *out = Box::into_raw(Box::new(LmtlInventory { inv }));
                LmtlStatus::Ok
            }
            Err(corpus::CorpusError::Io { path, source }) => {
                fail(LmtlStatus::Io, format!("{}: {source}", path.display()))
            }
            Err(e) => fail(LmtlStatus::Format, e.to_string()),
        }
    })
}

/// Number of phones; 0 for a null handle.
///
/// # Safety
/// `inv` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lmtl_inventory_len(inv: *const LmtlInventory) -> usize {
    inv.as_ref().map_or(0, |i| i.inv.len())
}

/// Releases an inventory handle. Null is ignored.
///
/// # Safety
/// `inv` must come from an inventory constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lmtl_inventory_free(inv: *mut LmtlInventory) {
    if !inv.is_null() {
        drop(Box::from_raw(inv));
    }
}

/// Frame landmark labels (class indices) for a `.phn` alignment. Writes
/// `frames` entries to `labels_out`; `radius` 0 disables expansion.
///
/// # Safety
/// `phn` must be a NUL-terminated string and `labels_out` hold `frames`
/// entries.
#[no_mangle]
pub unsafe extern "C" fn lmtl_label_phn(
    inv: *const LmtlInventory,
    phn: *const c_char,
    sample_rate: u32,
    frames: usize,
    hop: f64,
    radius: usize,
    labels_out: *mut u8,
) -> LmtlStatus {
    guard(|| {
        let Some(inv) = inv.as_ref() else {
            return fail(LmtlStatus::NullPointer, "inventory is null");
        };
        if phn.is_null() || labels_out.is_null() {
            return fail(LmtlStatus::NullPointer, "argument is null");
        }
        if frames == 0 || !(hop > 0.0) || sample_rate == 0 {
            return fail(LmtlStatus::InvalidArgument, "frames, hop and sample_rate must be positive");
        }
        let Ok(text) = CStr::from_ptr(phn).to_str() else {
            return fail(LmtlStatus::InvalidArgument, "alignment is not valid UTF-8");
        };
        let segments = match corpus::parse_phn(text, sample_rate) {
            Ok(s) => s,
            Err(e) => return fail(LmtlStatus::Format, e.to_string()),
        };
        let events = match landmarks::segments_to_events(&segments, &inv.inv, hop, "input") {
            Ok(e) => e,
            Err(e) => return fail(LmtlStatus::InvalidArgument, e.to_string()),
        };
        let mut fl = landmarks::events_to_frame_labels(&events, frames, hop);
        if radius > 0 {
            fl = landmarks::expand_labels(&fl, radius).expect("fresh labels are unexpanded");
        }
        for (i, c) in fl.labels.iter().enumerate() {
            *labels_out.add(i) = c.index() as u8;
        }
        LmtlStatus::Ok
    })
}
