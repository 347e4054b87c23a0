//! C ABI over a trained checkpoint plus a few stateless kernels.
//!
//! Every entry point returns a [`SpalignStatus`]; on failure the message is
//! kept per thread and read back with [`spalign_last_error`]. Buffers are
//! caller-owned, dense, row-major `double` arrays. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use spalign::meta::{AlignNet, Checkpoint, Stage};
use spalign::nn::{Ctx, ParamStore};
use spalign::{Error, Graph, Tensor};

/// Result code of every fallible call. `SPALIGN_STATUS_OK` is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpalignStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Integrity = 5,
    Version = 6,
    Config = 7,
    Parse = 8,
    Capacity = 9,
    NonFinite = 10,
    Panic = 11,
}

/// Opaque loaded model; create with `spalign_model_load`, release with
/// `spalign_model_free`.
pub struct SpalignModel {
    ck: Checkpoint,
    net: AlignNet,
    params: ParamStore<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SpalignStatus {
    match e {
        Error::Shape { .. } | Error::NotScalar(_) => SpalignStatus::Shape,
        Error::NonFinite { .. } => SpalignStatus::NonFinite,
        Error::Invalid { .. } => SpalignStatus::InvalidArgument,
        Error::Capacity(_) => SpalignStatus::Capacity,
        Error::Config(_) => SpalignStatus::Config,
        Error::Io { .. } => SpalignStatus::Io,
        Error::Integrity(_) => SpalignStatus::Integrity,
        Error::Version { .. } => SpalignStatus::Version,
        Error::Parse(_) => SpalignStatus::Parse,
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

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SpalignStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SpalignStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            SpalignStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            SpalignStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn model<'a>(m: *const SpalignModel) -> Result<&'a SpalignModel, Fail> {
    m.as_ref().ok_or(Fail::Null("model"))
}

unsafe fn string<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::Parse(format!("{what} is not UTF-8"))))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn spalign_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spalign_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file. On success `*out` owns a new model.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn spalign_model_load(path: *const c_char, out: *mut *mut SpalignModel) -> SpalignStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = ptr::null_mut();
        let path = string(path, "path")?;
        let ck = Checkpoint::load(Path::new(path))?;
        let net = AlignNet::new(ck.model.clone())?;
        let params = ck.params.cast::<f64>();
        *out = Box::into_raw(Box::new(SpalignModel { ck, net, params }));
        Ok(())
    })
}

/// Releases a model; null is a no-op.
///
/// # Safety
/// `m` must come from `spalign_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spalign_model_free(m: *mut SpalignModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Input side length and feature map shape `[C, H, W]` of the model.
///
/// # Safety
/// `m` must be a live model; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn spalign_model_shape(
    m: *const SpalignModel,
    input_size: *mut usize,
    channels: *mut usize,
    extent: *mut usize,
) -> SpalignStatus {
    guard(|| {
        let m = model(m)?;
        if input_size.is_null() || channels.is_null() || extent.is_null() {
            return Err(Fail::Null("out"));
        }
        let b = &m.ck.model.backbone;
        *input_size = b.input_size;
        *channels = b.feature_channels();
        *extent = b.feature_extent();
        Ok(())
    })
}

/// Backbone features of one interleaved 8-bit RGB image of any size; the
/// image is resized and normalized as in training. `out` holds `C * H * W`
/// values.
///
/// # Safety
/// `rgb` must hold `width * height * 3` bytes and `out` the feature count.
#[no_mangle]
pub unsafe extern "C" fn spalign_model_features(
    m: *const SpalignModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    out: *mut f64,
) -> SpalignStatus {
    guard(|| {
        let m = model(m)?;
        let px = slice(rgb, width * height * 3, "rgb")?;
        let b = &m.ck.model.backbone;
        let s = b.input_size;
        let (c, e) = (b.feature_channels(), b.feature_extent());
        let out = slice_mut(out, c * e * e, "out")?;
        let x = Tensor::new(&[1, 3, s, s], m.ck.norm.prepare(px, width, height, s)?)?;
        let mut ctx = Ctx::inference(&m.params);
        let xv = ctx.input(x);
        let f = m.net.features(&mut ctx, xv)?;
        out.copy_from_slice(ctx.graph.value(f).data());
        Ok(())
    })
}

/// Aligns support features to query features (both `[C, H, W]` as returned
/// by `spalign_model_features`) through the stages named by `stage`, e.g.
/// `"full"` or `"foe+lsc"`. Writes the aligned support map and the query map
/// after FOE, each `C * H * W` values.
///
/// # Safety
/// Feature buffers must hold `C * H * W` values; `stage` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spalign_model_align_pair(
    m: *const SpalignModel,
    support: *const f64,
    query: *const f64,
    stage: *const c_char,
    aligned_out: *mut f64,
    query_out: *mut f64,
) -> SpalignStatus {
    guard(|| {
        let m = model(m)?;
        let b = &m.ck.model.backbone;
        let (c, e) = (b.feature_channels(), b.feature_extent());
        let n = c * e * e;
        let stage: Stage = string(stage, "stage")?.parse()?;
        let s = Tensor::new(&[c, e, e], slice(support, n, "support")?.to_vec())?;
        let q = Tensor::new(&[c, e, e], slice(query, n, "query")?.to_vec())?;
        let aligned_out = slice_mut(aligned_out, n, "aligned_out")?;
        let query_out = slice_mut(query_out, n, "query_out")?;
        let mut ctx = Ctx::inference(&m.params);
        let (sv, qv) = (ctx.input(s), ctx.input(q));
        let pair = m.net.align_pair(&mut ctx, sv, qv, stage)?;
        aligned_out.copy_from_slice(ctx.graph.value(pair.aligned).data());
        query_out.copy_from_slice(ctx.graph.value(pair.query).data());
        Ok(())
    })
}

/// Row-wise softmax of a `rows x cols` matrix.
///
/// # Safety
/// `x` and `out` must each hold `rows * cols` values; they may alias.
#[no_mangle]
pub unsafe extern "C" fn spalign_softmax_rows(x: *const f64, rows: usize, cols: usize, out: *mut f64) -> SpalignStatus {
    guard(|| {
        let input = slice(x, rows * cols, "x")?.to_vec();
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::new(&[rows, cols], input)?);
        let y = g.softmax(v)?;
        slice_mut(out, rows * cols, "out")?.copy_from_slice(g.value(y).data());
        Ok(())
    })
}

/// Bilinear sampling of a `[C, H, W]` map at normalized `(x, y)` positions
/// (`[Ho, Wo, 2]`, corners at -1 and 1, zero outside). `out` is `[C, Ho, Wo]`.
///
/// # Safety
/// Buffers must hold the element counts implied by their shapes.
#[no_mangle]
pub unsafe extern "C" fn spalign_bilinear_sample(
    input: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    grid: *const f64,
    out_height: usize,
    out_width: usize,
    out: *mut f64,
) -> SpalignStatus {
    guard(|| {
        let x = slice(input, channels * height * width, "input")?.to_vec();
        let gr = slice(grid, out_height * out_width * 2, "grid")?.to_vec();
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new(&[channels, height, width], x)?);
        let gv = g.constant(Tensor::new(&[out_height, out_width, 2], gr)?);
        let y = g.grid_sample(xv, gv)?;
        slice_mut(out, channels * out_height * out_width, "out")?.copy_from_slice(g.value(y).data());
        Ok(())
    })
}
