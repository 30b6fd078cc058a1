//! C ABI over `sfa-core`.
//!
//! Objects cross the boundary as opaque handles (`SfaCube`, `SfaModel`,
//! `SfaDetections`) that the caller releases with the matching `*_free`.
//! Every fallible call returns an `SfaStatus`; on failure the message is
//! available from `sfa_last_error` on the same thread. Panics are caught and
//! reported as `SFA_STATUS_INTERNAL`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sfa_core::detect::DetectConfig;
use sfa_core::hsi::{match_bands, read_cube, write_cube, HsiError, HyperCube};
use sfa_core::sacm::gram;
use sfa_core::trainer::Model;
use sfa_core::SfaError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfaStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument was out of range or inconsistent (sizes, UTF-8 paths).
    InvalidArgument = 2,
    /// A file could not be read or written.
    Io = 3,
    /// A file was readable but malformed.
    Format = 4,
    /// The cube's band count differs from the model's.
    BandMismatch = 5,
    /// Numerical failure or another library error.
    Failed = 6,
    /// A panic was caught at the boundary.
    Internal = 7,
}

/// Opaque hyperspectral cube.
pub struct SfaCube(HyperCube);

/// Opaque trained model.
pub struct SfaModel(Model);

/// One detection; `x, y` is the top-left corner in pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SfaDetection {
    pub image_id: u64,
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub score: f32,
    pub category_id: u32,
}

/// Opaque owned list of detections.
pub struct SfaDetections(Vec<SfaDetection>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(SfaStatus, String);

impl From<SfaError> for Failure {
    fn from(e: SfaError) -> Self {
        let status = match &e {
            SfaError::Io { .. } | SfaError::Hsi(HsiError::Io { .. }) => SfaStatus::Io,
            SfaError::Hsi(_) | SfaError::Checkpoint(_) | SfaError::Json(_) | SfaError::Config(_) => SfaStatus::Format,
            SfaError::BandMismatch { .. } => SfaStatus::BandMismatch,
            SfaError::InvalidConfig(_) | SfaError::Indivisible { .. } | SfaError::ChannelMismatch { .. } => {
                SfaStatus::InvalidArgument
            }
            _ => SfaStatus::Failed,
        };
        Failure(status, e.to_string())
    }
}

impl From<HsiError> for Failure {
    fn from(e: HsiError) -> Self {
        SfaError::from(e).into()
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SfaStatus::InvalidArgument, msg.into())
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SfaStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SfaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SfaStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(SfaStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(SfaStatus::NullPointer, "path is null".into()));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn out_arg<'a, T>(p: *mut T) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(SfaStatus::NullPointer, "output pointer is null".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sfa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn sfa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a cube from band-sequential values (`bands` planes of
/// `height * width`, row-major).
#[no_mangle]
pub unsafe extern "C" fn sfa_cube_new(
    width: usize,
    height: usize,
    bands: usize,
    values: *const f32,
    len: usize,
    out: *mut *mut SfaCube,
) -> SfaStatus {
    guard(|| {
        let out = out_arg(out)?;
        if values.is_null() && len > 0 {
            return Err(Failure(SfaStatus::NullPointer, "values is null".into()));
        }
        let data = if len == 0 { Vec::new() } else { std::slice::from_raw_parts(values, len).to_vec() };
        let res = 1.0 / bands.max(1) as f32;
        let cube = HyperCube::new(width, height, bands, res, data).map_err(|e| invalid(e.to_string()))?;
        *out = Box::into_raw(Box::new(SfaCube(cube)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sfa_cube_read(path: *const c_char, out: *mut *mut SfaCube) -> SfaStatus {
    guard(|| {
        let out = out_arg(out)?;
        let cube = read_cube(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SfaCube(cube)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sfa_cube_write(cube: *const SfaCube, path: *const c_char) -> SfaStatus {
    guard(|| Ok(write_cube(&deref(cube, "cube")?.0, path_arg(path)?)?))
}

#[no_mangle]
pub unsafe extern "C" fn sfa_cube_dims(
    cube: *const SfaCube,
    width: *mut usize,
    height: *mut usize,
    bands: *mut usize,
) -> SfaStatus {
    guard(|| {
        let c = &deref(cube, "cube")?.0;
        *out_arg(width)? = c.width();
        *out_arg(height)? = c.height();
        *out_arg(bands)? = c.bands();
        Ok(())
    })
}

/// Borrowed band-sequential values, valid while `cube` lives. Null when
/// `cube` is null.
#[no_mangle]
pub unsafe extern "C" fn sfa_cube_values(cube: *const SfaCube, len: *mut usize) -> *const f32 {
    let Some(c) = cube.as_ref() else {
        return ptr::null();
    };
    if let Some(l) = len.as_mut() {
        *l = c.0.values().len();
    }
    c.0.values().as_ptr()
}

/// Expands or reduces `cube` to `bands` bands into a new cube.
#[no_mangle]
pub unsafe extern "C" fn sfa_cube_match_bands(cube: *const SfaCube, bands: usize, out: *mut *mut SfaCube) -> SfaStatus {
    guard(|| {
        let out = out_arg(out)?;
        let c = &deref(cube, "cube")?.0;
        if bands == 0 {
            return Err(invalid("bands must be at least 1"));
        }
        *out = Box::into_raw(Box::new(SfaCube(match_bands(c, bands))));
        Ok(())
    })
}

/// Writes the bands×bands Gram matrix of the standardized cube, row-major,
/// into `buf`, which must hold at least `bands * bands` floats.
#[no_mangle]
pub unsafe extern "C" fn sfa_cube_gram(cube: *const SfaCube, normalize: bool, buf: *mut f32, len: usize) -> SfaStatus {
    guard(|| {
        let c = &deref(cube, "cube")?.0;
        let need = c.bands() * c.bands();
        if buf.is_null() {
            return Err(Failure(SfaStatus::NullPointer, "buffer is null".into()));
        }
        if len < need {
            return Err(invalid(format!("buffer holds {len} floats, {need} needed")));
        }
        let feature = c
            .standardized_tensor()
            .reshaped([1, c.bands(), c.height(), c.width()])
            .map_err(SfaError::from)?;
        let g = gram(&feature, normalize)?;
        std::slice::from_raw_parts_mut(buf, need).copy_from_slice(g.values.data());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sfa_cube_free(cube: *mut SfaCube) {
    if !cube.is_null() {
        drop(Box::from_raw(cube));
    }
}

/// Loads a checkpoint with default detection thresholds.
#[no_mangle]
pub unsafe extern "C" fn sfa_model_load(path: *const c_char, out: *mut *mut SfaModel) -> SfaStatus {
    guard(|| {
        let out = out_arg(out)?;
        let model = Model::load(path_arg(path)?, DetectConfig::default())?;
        *out = Box::into_raw(Box::new(SfaModel(model)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sfa_model_save(model: *const SfaModel, path: *const c_char) -> SfaStatus {
    guard(|| Ok(deref(model, "model")?.0.save(path_arg(path)?)?))
}

/// Band count the model expects; 0 when `model` is null.
#[no_mangle]
pub unsafe extern "C" fn sfa_model_bands(model: *const SfaModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.ssam.bands)
}

/// Runs detection on one cube. The cube must already have the model's band
/// count and sides divisible by 8.
#[no_mangle]
pub unsafe extern "C" fn sfa_model_detect(
    model: *const SfaModel,
    cube: *const SfaCube,
    image_id: u64,
    out: *mut *mut SfaDetections,
) -> SfaStatus {
    guard(|| {
        let out = out_arg(out)?;
        let m = &deref(model, "model")?.0;
        let c = &deref(cube, "cube")?.0;
        let dets = m
            .detect_cube(image_id, c)?
            .into_iter()
            .map(|d| SfaDetection {
                image_id: d.image_id,
                x: d.bbox.x,
                y: d.bbox.y,
                w: d.bbox.w,
                h: d.bbox.h,
                score: d.score,
                category_id: d.category_id as u32,
            })
            .collect();
        *out = Box::into_raw(Box::new(SfaDetections(dets)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sfa_model_free(model: *mut SfaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn sfa_detections_len(dets: *const SfaDetections) -> usize {
    dets.as_ref().map_or(0, |d| d.0.len())
}

/// Borrowed array of `sfa_detections_len` entries, valid while `dets` lives.
#[no_mangle]
pub unsafe extern "C" fn sfa_detections_data(dets: *const SfaDetections) -> *const SfaDetection {
    dets.as_ref().map_or(ptr::null(), |d| d.0.as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn sfa_detections_free(dets: *mut SfaDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}
