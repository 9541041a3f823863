//! C interface to the cddvt tokenizer.
//!
//! Models are opaque handles created by `cddvt_model_load` and released with
//! `cddvt_model_free`. Every fallible call returns a `CddvtStatus`; on
//! failure `cddvt_last_error` describes the most recent error on the calling
//! thread. Images are passed as row-major, channel-interleaved `double`
//! buffers with values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use cddvt::autoencoder::Image;
use cddvt::checkpoint::Checkpoint;
use cddvt::error::Error;
use cddvt::metrics::{centroid_similarity_matrix, psnr, ssim};
use cddvt::model::{AllocationPolicy, ModelConfig, Tokenizer};
use cddvt::quantizer::QuantizeMode;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CddvtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Parse = 5,
    Checkpoint = 6,
    Numerical = 7,
    Config = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Quantizer setting for a call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CddvtModeKind {
    /// Whatever policy the checkpoint was trained with.
    Default = 0,
    Top1 = 1,
    /// Exactly `n` primitives per chunk.
    Fixed = 2,
    /// Allocator-driven, at most `n` primitives (0 = the model's K).
    Adaptive = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CddvtMode {
    pub kind: CddvtModeKind,
    pub n: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CddvtModelInfo {
    pub patch: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_subcodebooks: usize,
    pub codebook_size: usize,
    pub max_count: usize,
}

/// Opaque model handle.
pub struct CddvtModel {
    inner: Tokenizer,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CddvtStatus {
    match e {
        Error::Shape(_) => CddvtStatus::ShapeMismatch,
        Error::Argument(_) => CddvtStatus::InvalidArgument,
        Error::Numerical(_) => CddvtStatus::Numerical,
        Error::Config(_) | Error::ConfigKey { .. } => CddvtStatus::Config,
        Error::Parse { .. } => CddvtStatus::Parse,
        Error::Checkpoint(_) => CddvtStatus::Checkpoint,
        Error::Io { .. } => CddvtStatus::Io,
    }
}

struct Fail(CddvtStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, translating errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CddvtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            CddvtStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            CddvtStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail(CddvtStatus::NullPointer, format!("{what} is null")));
    }
    Ok(())
}

/// # Safety
/// `model` must be null or a live handle from `cddvt_model_load`.
unsafe fn model_ref<'a>(model: *const CddvtModel) -> Result<&'a Tokenizer, Fail> {
    non_null(model, "model")?;
    Ok(&(*model).inner)
}

/// # Safety
/// `pixels` must point to `height * width * channels` readable doubles.
unsafe fn read_image(pixels: *const f64, height: usize, width: usize, channels: usize) -> Result<Image, Fail> {
    non_null(pixels, "pixels")?;
    let len = height
        .checked_mul(width)
        .and_then(|x| x.checked_mul(channels))
        .filter(|&n| n > 0)
        .ok_or_else(|| Fail(CddvtStatus::InvalidArgument, format!("bad image size {height}x{width}x{channels}")))?;
    let data = slice::from_raw_parts(pixels, len).to_vec();
    Ok(Image::new(height, width, channels, data)?)
}

/// # Safety
/// `out` must point to `out_len` writable elements.
unsafe fn write_out<T: Copy>(out: *mut T, out_len: usize, data: &[T]) -> Result<(), Fail> {
    non_null(out, "output buffer")?;
    if out_len < data.len() {
        return Err(Fail(
            CddvtStatus::BufferTooSmall,
            format!("output buffer holds {out_len} elements, {} needed", data.len()),
        ));
    }
    ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    Ok(())
}

fn resolve_mode(config: &ModelConfig, mode: CddvtMode) -> Result<QuantizeMode, Fail> {
    let m = match mode.kind {
        CddvtModeKind::Default => config.active_mode(),
        CddvtModeKind::Top1 => QuantizeMode::Warmup,
        CddvtModeKind::Fixed => ModelConfig { policy: AllocationPolicy::Fixed(mode.n), ..config.clone() }.active_mode(),
        CddvtModeKind::Adaptive => QuantizeMode::Adaptive(if mode.n == 0 { config.max_count } else { mode.n }),
    };
    m.validate(config.codebook_size)?;
    Ok(m)
}

/// Static description of a status code. Never null.
#[no_mangle]
pub extern "C" fn cddvt_status_message(status: CddvtStatus) -> *const c_char {
    let s: &'static CStr = match status {
        CddvtStatus::Ok => c"ok",
        CddvtStatus::NullPointer => c"null pointer argument",
        CddvtStatus::InvalidArgument => c"invalid argument",
        CddvtStatus::ShapeMismatch => c"shape mismatch",
        CddvtStatus::Io => c"i/o error",
        CddvtStatus::Parse => c"parse error",
        CddvtStatus::Checkpoint => c"invalid checkpoint",
        CddvtStatus::Numerical => c"numerical failure",
        CddvtStatus::Config => c"configuration error",
        CddvtStatus::BufferTooSmall => c"output buffer too small",
        CddvtStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Message for the last failed call on this thread ("" after a success).
/// Valid until the next cddvt call on the same thread.
#[no_mangle]
pub extern "C" fn cddvt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cddvt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint; on success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cddvt_model_load(path: *const c_char, out: *mut *mut CddvtModel) -> CddvtStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(CddvtStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = Checkpoint::load(path)?;
        *out = Box::into_raw(Box::new(CddvtModel { inner: ck.model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cddvt_model_free(model: *mut CddvtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `info` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cddvt_model_info(model: *const CddvtModel, info: *mut CddvtModelInfo) -> CddvtStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(info, "info")?;
        let c = &m.config;
        *info = CddvtModelInfo {
            patch: c.patch,
            channels: c.channels,
            embed_dim: c.embed_dim,
            num_subcodebooks: c.num_subcodebooks,
            codebook_size: c.codebook_size,
            max_count: c.max_count,
        };
        Ok(())
    })
}

/// Reconstructs an image (clamped to `[0, 1]`) into `out`, which must hold
/// `height * width * channels` doubles.
///
/// # Safety
/// `pixels` must hold `height * width * channels` doubles; `out` must hold `out_len`.
#[no_mangle]
pub unsafe extern "C" fn cddvt_reconstruct(
    model: *const CddvtModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    mode: CddvtMode,
    out: *mut f64,
    out_len: usize,
) -> CddvtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let img = read_image(pixels, height, width, channels)?;
        let (recon, _) = m.reconstruct(&img, resolve_mode(&m.config, mode)?)?;
        write_out(out, out_len, &recon.pixels)
    })
}

/// Per-patch primitive counts in raster order; `out` must hold one entry per patch.
///
/// # Safety
/// As for `cddvt_reconstruct`.
#[no_mangle]
pub unsafe extern "C" fn cddvt_allocation_counts(
    model: *const CddvtModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    mode: CddvtMode,
    out: *mut u32,
    out_len: usize,
) -> CddvtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let img = read_image(pixels, height, width, channels)?;
        let fwd = m.forward(&img, resolve_mode(&m.config, mode)?)?;
        let counts: Vec<u32> = fwd.quantized.alloc.counts().iter().map(|&c| c as u32).collect();
        write_out(out, out_len, &counts)
    })
}

/// Row-major M x M cosine similarities between sub-codebook centroids.
///
/// # Safety
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cddvt_centroid_similarity(model: *const CddvtModel, out: *mut f64, out_len: usize) -> CddvtStatus {
    guard(|| {
        let m = model_ref(model)?;
        write_out(out, out_len, centroid_similarity_matrix(&m.codebook).as_slice())
    })
}

/// PSNR in dB with peak 1 (99 for identical images).
///
/// # Safety
/// `a` and `b` must each hold `height * width * channels` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cddvt_psnr(
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut f64,
) -> CddvtStatus {
    guard(|| {
        non_null(out, "out")?;
        let (x, y) = (read_image(a, height, width, channels)?, read_image(b, height, width, channels)?);
        *out = psnr(&x, &y, 1.0)?;
        Ok(())
    })
}

/// Mean SSIM over non-overlapping 8x8 windows.
///
/// # Safety
/// As for `cddvt_psnr`.
#[no_mangle]
pub unsafe extern "C" fn cddvt_ssim(
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut f64,
) -> CddvtStatus {
    guard(|| {
        non_null(out, "out")?;
        let (x, y) = (read_image(a, height, width, channels)?, read_image(b, height, width, channels)?);
        *out = ssim(&x, &y)?;
        Ok(())
    })
}
