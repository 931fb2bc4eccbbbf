//! C interface: load a trained checkpoint, embed images and score rankings.
//!
//! Every fallible function returns a [`GamreidStatus`]; on failure the message
//! is kept per thread and can be read with [`gamreid_last_error`]. Models are
//! opaque handles released with [`gamreid_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gamreid::backbone::{count_parameters, Backbone, BackboneConfig};
use gamreid::checkpoint::Checkpoint;
use gamreid::eval::{evaluate, ItemSet};
use gamreid::pipeline::load_model;
use gamreid::tensor::Tensor;
use gamreid::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GamreidStatus {
    Ok = 0,
    NullArgument = 1,
    Shape = 2,
    Config = 3,
    Usage = 4,
    Format = 5,
    Integrity = 6,
    Parse = 7,
    Numeric = 8,
    Io = 9,
    Panic = 10,
}

impl From<&Error> for GamreidStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => GamreidStatus::Shape,
            Error::Config(_) => GamreidStatus::Config,
            Error::Usage(_) => GamreidStatus::Usage,
            Error::Format(_) => GamreidStatus::Format,
            Error::Integrity(_) => GamreidStatus::Integrity,
            Error::Parse(_) => GamreidStatus::Parse,
            Error::Numeric(_) => GamreidStatus::Numeric,
            Error::Io(_) => GamreidStatus::Io,
        }
    }
}

/// A loaded embedding model.
pub struct GamreidModel {
    model: Backbone,
    height: usize,
    width: usize,
}

/// Retrieval scores, fractions in `[0, 1]`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GamreidMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub num_queries: usize,
    /// Queries without any valid gallery match.
    pub num_skipped: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(GamreidStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), format!("error[{}]: {}", e.category(), e.detail()))
    }
}

fn null(what: &str) -> Failure {
    Failure(GamreidStatus::NullArgument, format!("error[usage]: {what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GamreidStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GamreidStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("error[panic]: internal panic".into());
            GamreidStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(GamreidStatus::Usage, format!("error[usage]: {what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn gamreid_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gamreid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Analytic parameter count of a preset. `groups` and `embedding_dim` of 0
/// keep the preset's values.
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out_total` writable.
#[no_mangle]
pub unsafe extern "C" fn gamreid_count_params(
    preset: *const c_char,
    groups: usize,
    embedding_dim: usize,
    out_total: *mut u64,
) -> GamreidStatus {
    guard(|| {
        let preset = str_arg(preset, "preset")?;
        if out_total.is_null() {
            return Err(null("out_total"));
        }
        let nz = |v: usize| (v != 0).then_some(v);
        let cfg = BackboneConfig::preset(preset, nz(groups), nz(embedding_dim))?;
        *out_total = count_parameters(&cfg).total as u64;
        Ok(())
    })
}

/// Load the model stored in a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_model` writable. On
/// success `*out_model` owns a handle for [`gamreid_model_free`].
#[no_mangle]
pub unsafe extern "C" fn gamreid_model_load(path: *const c_char, out_model: *mut *mut GamreidModel) -> GamreidStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out_model.is_null() {
            return Err(null("out_model"));
        }
        *out_model = ptr::null_mut();
        let (config, model) = load_model(&Checkpoint::load(Path::new(path))?)?;
        let handle = GamreidModel { model, height: config.model.height, width: config.model.width };
        *out_model = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`gamreid_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gamreid_model_free(model: *mut GamreidModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding size D of a model, 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gamreid_model_embedding_dim(model: *const GamreidModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().embedding_dim)
}

/// Input height and width the model was trained at.
///
/// # Safety
/// `model` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gamreid_model_input_size(
    model: *const GamreidModel,
    out_height: *mut usize,
    out_width: *mut usize,
) -> GamreidStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_height.is_null() || out_width.is_null() {
            return Err(null("output"));
        }
        *out_height = m.height;
        *out_width = m.width;
        Ok(())
    })
}

/// Embed `n` images laid out as `[n, 3, height, width]` (row-major, values in
/// `[0, 1]`) into `out`, which receives `n * D` unit-length rows.
///
/// # Safety
/// `images` must hold `n * 3 * height * width` values and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn gamreid_model_embed(
    model: *const GamreidModel,
    images: *const f64,
    n: usize,
    height: usize,
    width: usize,
    out: *mut f64,
    out_len: usize,
) -> GamreidStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = m.model.config().embedding_dim;
        if n == 0 {
            return Err(Error::Usage("no images to embed".into()).into());
        }
        if out_len != n * d {
            return Err(Error::Shape(format!("output holds {out_len} values, {n} x {d} needed")).into());
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let pixels = slice_arg(images, n * 3 * height * width, "images")?;
        let batch = Tensor::new(vec![n, 3, height, width], pixels.to_vec())?;
        let emb = m.model.embed(&batch, 64)?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(emb.data());
        Ok(())
    })
}

/// Rank-1/5/10 and mAP of `nq` queries against `ng` gallery items, all with
/// `dim`-wide embedding rows. Same-identity same-camera gallery items and
/// identity `-1` are ignored per query.
///
/// # Safety
/// Each pointer must reference as many elements as its count implies;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gamreid_evaluate(
    query_embeddings: *const f64,
    query_identities: *const i64,
    query_cameras: *const u32,
    nq: usize,
    gallery_embeddings: *const f64,
    gallery_identities: *const i64,
    gallery_cameras: *const u32,
    ng: usize,
    dim: usize,
    out: *mut GamreidMetrics,
) -> GamreidStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let qe = Tensor::new(vec![nq, dim], slice_arg(query_embeddings, nq * dim, "query_embeddings")?.to_vec())?;
        let ge = Tensor::new(vec![ng, dim], slice_arg(gallery_embeddings, ng * dim, "gallery_embeddings")?.to_vec())?;
        let q = ItemSet {
            embeddings: &qe,
            identities: slice_arg(query_identities, nq, "query_identities")?,
            cameras: slice_arg(query_cameras, nq, "query_cameras")?,
        };
        let g = ItemSet {
            embeddings: &ge,
            identities: slice_arg(gallery_identities, ng, "gallery_identities")?,
            cameras: slice_arg(gallery_cameras, ng, "gallery_cameras")?,
        };
        let m = evaluate(&q, &g)?;
        *out = GamreidMetrics {
            rank1: m.rank1,
            rank5: m.rank5,
            rank10: m.rank10,
            map: m.map,
            num_queries: m.num_queries,
            num_skipped: m.num_skipped,
        };
        Ok(())
    })
}
