//! C ABI over `bdnn`: opaque handles for dispersion tables and trained models,
//! integer status codes, and a per-thread last-error message.
//!
//! Every function returns a [`BdnnStatus`]; results are written through out
//! pointers. Handles are created by `*_load`/`*_new` functions and must be
//! released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use bdnn::analysis::spectrum_scan;
use bdnn::materials::{slab_power_transmission, DispersionTable};
use bdnn::network::{forward_single_frequency, stack_efficiency, OpticalStack};
use bdnn::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BdnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    Numerical = 4,
    Parse = 5,
    Io = 6,
    Utf8 = 7,
    Panic = 8,
}

/// Opaque dispersion table.
pub struct BdnnTable(DispersionTable);

/// Opaque trained network.
pub struct BdnnModel(OpticalStack);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BdnnStatus {
    match e {
        Error::InvalidArgument(_) | Error::Config { .. } | Error::NoBand(_) => BdnnStatus::InvalidArgument,
        Error::OutOfRange { .. } => BdnnStatus::OutOfRange,
        Error::Numerical { .. } => BdnnStatus::Numerical,
        Error::Parse { .. } => BdnnStatus::Parse,
        Error::Io { .. } => BdnnStatus::Io,
    }
}

struct Failure(BdnnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(BdnnStatus::NullPointer, format!("{what} is null"))
}

// Runs `f`, converting errors and panics into a status and the last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BdnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            BdnnStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            BdnnStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|e| Failure(BdnnStatus::Utf8, format!("path is not UTF-8: {e}")))
}

unsafe fn out_handle<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bdnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes without the
/// terminator, or 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn bdnn_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Single-pass power transmission through `layers` absorbing layers of
/// thickness `h_mm`, extinction `kappa`, at free-space wavelength `wavelength_mm`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `double`.
#[no_mangle]
pub unsafe extern "C" fn bdnn_slab_power_transmission(
    kappa: f64,
    h_mm: f64,
    wavelength_mm: f64,
    layers: u32,
    out: *mut f64,
) -> BdnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = slab_power_transmission(kappa, h_mm, wavelength_mm, layers)?;
        Ok(())
    })
}

/// Built-in synthetic dispersion table.
///
/// # Safety
/// `out` must be null or valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn bdnn_table_synthetic(out: *mut *mut BdnnTable) -> BdnnStatus {
    guard(|| out_handle(out, BdnnTable(DispersionTable::synthetic())))
}

/// Loads a `frequency_thz,n,kappa` CSV table.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn bdnn_table_load(path: *const c_char, out: *mut *mut BdnnTable) -> BdnnStatus {
    guard(|| {
        let path = path_arg(path)?;
        out_handle(out, BdnnTable(DispersionTable::load(path)?))
    })
}

/// # Safety
/// `table` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bdnn_table_free(table: *mut BdnnTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Loads a model JSON file written by `bdnn train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn bdnn_model_load(path: *const c_char, out: *mut *mut BdnnModel) -> BdnnStatus {
    guard(|| {
        let path = path_arg(path)?;
        out_handle(out, BdnnModel(bdnn::io::load_model(&path)?))
    })
}

/// Parses a model from a JSON string.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn bdnn_model_from_json(json: *const c_char, out: *mut *mut BdnnModel) -> BdnnStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| Failure(BdnnStatus::Utf8, format!("model JSON is not UTF-8: {e}")))?;
        out_handle(out, BdnnModel(bdnn::io::model_from_str(text)?))
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bdnn_model_free(model: *mut BdnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of detectors behind the output plane.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bdnn_model_detector_count(model: *const BdnnModel, out: *mut usize) -> BdnnStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = model.0.detectors.len();
        Ok(())
    })
}

/// Power efficiency (detector power over input power) of one detector at one frequency.
///
/// # Safety
/// `model` and `table` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bdnn_efficiency(
    model: *const BdnnModel,
    table: *const BdnnTable,
    frequency_thz: f64,
    detector: usize,
    out: *mut f64,
) -> BdnnStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let table = table.as_ref().ok_or_else(|| null("table"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (_, readout) = forward_single_frequency(&model.0, frequency_thz, &table.0)?;
        *out = stack_efficiency(&readout, detector)?;
        Ok(())
    })
}

/// Efficiency of `detector` at each of `count` frequencies, with the output
/// plane displaced axially by `dz_mm`. Writes `count` values to `out`.
///
/// # Safety
/// `frequencies` must be readable and `out` writable for `count` doubles.
#[no_mangle]
pub unsafe extern "C" fn bdnn_spectrum_scan(
    model: *const BdnnModel,
    table: *const BdnnTable,
    frequencies: *const f64,
    count: usize,
    dz_mm: f64,
    detector: usize,
    out: *mut f64,
) -> BdnnStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let table = table.as_ref().ok_or_else(|| null("table"))?;
        if frequencies.is_null() || out.is_null() {
            return Err(null(if frequencies.is_null() { "frequencies" } else { "out" }));
        }
        let freqs = std::slice::from_raw_parts(frequencies, count);
        let spectrum = spectrum_scan(&model.0, &table.0, freqs, dz_mm)?;
        let eta = spectrum.detector(detector)?;
        std::slice::from_raw_parts_mut(out, count).copy_from_slice(eta);
        Ok(())
    })
}
