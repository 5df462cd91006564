//! C interface over the `cldf` core.
//!
//! Every fallible call returns a [`CldfStatus`]; on failure the message is
//! available from [`cldf_last_error`] on the same thread. Handles returned
//! through `out` pointers are owned by the caller and released with the
//! matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cldf::cluster::{infer_mask, kmeans, KMeansConfig};
use cldf::decoder::{decode, supcon_loss_and_grad, ContrastiveBatch, PixelDecoder};
use cldf::fusion::SeedSelection;
use cldf::metrics;
use cldf::raster::{AggregatedFeatures, SegmentationMask};
use cldf::tensor_io::{read_tensor, write_tensor, Layout, TensorContainer, TensorData};
use cldf::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CldfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Compute = 6,
    MissingInput = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CldfLayout {
    Hw = 0,
    Hwc = 1,
    Nhwc = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CldfDtype {
    F32 = 0,
    U8 = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CldfTensorInfo {
    pub layout: CldfLayout,
    pub dtype: CldfDtype,
    pub rank: usize,
    /// Unused trailing entries are zero.
    pub shape: [usize; 4],
    pub len: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CldfKMeansParams {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

/// Opaque `.cldf` tensor.
pub struct CldfTensor(TensorContainer);

/// Opaque trained pixel decoder.
pub struct CldfDecoder(PixelDecoder);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CldfStatus {
    match e.kind() {
        "io" => CldfStatus::Io,
        "bad_magic" | "unsupported_version" | "unsupported_dtype" | "truncated" | "shape_overflow"
        | "invalid_tensor" | "malformed_header" | "csv" => CldfStatus::Format,
        "shape_mismatch" | "dimension_mismatch" | "too_few_points" | "empty_input" => CldfStatus::Shape,
        "invalid_config" | "timestep_out_of_range" => CldfStatus::InvalidArgument,
        "missing_input" => CldfStatus::MissingInput,
        _ => CldfStatus::Compute,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CldfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CldfStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            CldfStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(format!("invalid argument: {msg}"));
            CldfStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CldfStatus::Panic
        }
    }
}

unsafe fn nonnull<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
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

unsafe fn to_path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail::Arg("path is not valid UTF-8".into()))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cldf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn cldf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cldf_tensor_read(path: *const c_char, out: *mut *mut CldfTensor) -> CldfStatus {
    guard(|| {
        let t = read_tensor(to_path(path)?)?;
        emit(out, CldfTensor(t))
    })
}

/// # Safety
/// `tensor` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cldf_tensor_write(tensor: *const CldfTensor, path: *const c_char) -> CldfStatus {
    guard(|| {
        let t = nonnull(tensor, "tensor")?;
        write_tensor(to_path(path)?, &t.0)?;
        Ok(())
    })
}

fn layout_of(l: CldfLayout) -> Layout {
    match l {
        CldfLayout::Hw => Layout::Hw,
        CldfLayout::Hwc => Layout::Hwc,
        CldfLayout::Nhwc => Layout::Nhwc,
    }
}

unsafe fn new_tensor(
    layout: CldfLayout,
    shape: *const usize,
    rank: usize,
    data: TensorData,
    out: *mut *mut CldfTensor,
) -> Result<(), Fail> {
    let layout = layout_of(layout);
    if rank != layout.rank() {
        return Err(Fail::Arg(format!("{layout:?} needs rank {}, got {rank}", layout.rank())));
    }
    let shape = slice(shape, rank, "shape")?.to_vec();
    emit(out, CldfTensor(TensorContainer::new(layout, shape, data)?))
}

/// Copy `len` floats into a new tensor.
///
/// # Safety
/// `shape` must hold `rank` entries and `data` `len` entries.
#[no_mangle]
pub unsafe extern "C" fn cldf_tensor_new_f32(
    layout: CldfLayout,
    shape: *const usize,
    rank: usize,
    data: *const f32,
    len: usize,
    out: *mut *mut CldfTensor,
) -> CldfStatus {
    guard(|| {
        let d = slice(data, len, "data")?.to_vec();
        new_tensor(layout, shape, rank, TensorData::F32(d), out)
    })
}

/// # Safety
/// `shape` must hold `rank` entries and `data` `len` entries.
#[no_mangle]
pub unsafe extern "C" fn cldf_tensor_new_u8(
    layout: CldfLayout,
    shape: *const usize,
    rank: usize,
    data: *const u8,
    len: usize,
    out: *mut *mut CldfTensor,
) -> CldfStatus {
    guard(|| {
        let d = slice(data, len, "data")?.to_vec();
        new_tensor(layout, shape, rank, TensorData::U8(d), out)
    })
}

/// # Safety
/// `tensor` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn cldf_tensor_free(tensor: *mut CldfTensor) {
    if !tensor.is_null() {
        drop(Box::from_raw(tensor));
    }
}

/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cldf_tensor_info(tensor: *const CldfTensor, out: *mut CldfTensorInfo) -> CldfStatus {
    guard(|| {
        let t = &nonnull(tensor, "tensor")?.0;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let mut shape = [0usize; 4];
        shape[..t.shape.len()].copy_from_slice(&t.shape);
        *out = CldfTensorInfo {
            layout: match t.layout {
                Layout::Hw => CldfLayout::Hw,
                Layout::Hwc => CldfLayout::Hwc,
                Layout::Nhwc => CldfLayout::Nhwc,
            },
            dtype: match t.data {
                TensorData::F32(_) => CldfDtype::F32,
                TensorData::U8(_) => CldfDtype::U8,
            },
            rank: t.shape.len(),
            shape,
            len: t.data.len(),
        };
        Ok(())
    })
}

/// Borrow the element buffer of an f32 tensor; valid while the tensor lives.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cldf_tensor_data_f32(
    tensor: *const CldfTensor,
    data: *mut *const f32,
    len: *mut usize,
) -> CldfStatus {
    guard(|| {
        let t = &nonnull(tensor, "tensor")?.0;
        let v = t.as_f32().ok_or_else(|| Fail::Arg("tensor is not f32".into()))?;
        if data.is_null() || len.is_null() {
            return Err(Fail::Null("out"));
        }
        *data = v.as_ptr();
        *len = v.len();
        Ok(())
    })
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cldf_tensor_data_u8(
    tensor: *const CldfTensor,
    data: *mut *const u8,
    len: *mut usize,
) -> CldfStatus {
    guard(|| {
        let t = &nonnull(tensor, "tensor")?.0;
        let v = t.as_u8().ok_or_else(|| Fail::Arg("tensor is not u8".into()))?;
        if data.is_null() || len.is_null() {
            return Err(Fail::Null("out"));
        }
        *data = v.as_ptr();
        *len = v.len();
        Ok(())
    })
}

/// Supervised contrastive loss (sum over anchors) of `n` unit-norm embeddings.
///
/// `grad` may be NULL; otherwise it receives `n * dim` values of dL/dz.
///
/// # Safety
/// `embeddings` holds `n * dim` floats, `labels` holds `n` bytes, `loss` is valid.
#[no_mangle]
pub unsafe extern "C" fn cldf_supcon_loss(
    embeddings: *const f32,
    n: usize,
    dim: usize,
    labels: *const u8,
    tau: f64,
    loss: *mut f64,
    grad: *mut f64,
) -> CldfStatus {
    guard(|| {
        let len = n.checked_mul(dim).ok_or_else(|| Fail::Arg("n * dim overflows".into()))?;
        let z = slice(embeddings, len, "embeddings")?.to_vec();
        let l = slice(labels, n, "labels")?.to_vec();
        if loss.is_null() {
            return Err(Fail::Null("loss"));
        }
        let batch = ContrastiveBatch::new(z, dim, l, true)?;
        let (value, g) = supcon_loss_and_grad(&batch, tau)?;
        *loss = value;
        if !grad.is_null() {
            std::slice::from_raw_parts_mut(grad, len).copy_from_slice(&g);
        }
        Ok(())
    })
}

unsafe fn mask_pair(
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
) -> Result<(SegmentationMask, SegmentationMask), Fail> {
    let len = height
        .checked_mul(width)
        .ok_or_else(|| Fail::Arg("height * width overflows".into()))?;
    let p = SegmentationMask::new(height, width, slice(pred, len, "pred")?.to_vec())?;
    let g = SegmentationMask::new(height, width, slice(gt, len, "gt")?.to_vec())?;
    Ok((p, g))
}

/// # Safety
/// `pred` and `gt` hold `height * width` bytes of 0/1; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn cldf_dice(pred: *const u8, gt: *const u8, height: usize, width: usize, out: *mut f64) -> CldfStatus {
    guard(|| {
        let (p, g) = mask_pair(pred, gt, height, width)?;
        let v = metrics::dice(&p, &g)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = v;
        Ok(())
    })
}

/// # Safety
/// `pred` and `gt` hold `height * width` bytes of 0/1; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn cldf_iou(pred: *const u8, gt: *const u8, height: usize, width: usize, out: *mut f64) -> CldfStatus {
    guard(|| {
        let (p, g) = mask_pair(pred, gt, height, width)?;
        let v = metrics::iou(&p, &g)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = v;
        Ok(())
    })
}

/// Default k-means settings (k = 2, 10 restarts).
#[no_mangle]
pub extern "C" fn cldf_kmeans_default_params() -> CldfKMeansParams {
    let c = KMeansConfig::default();
    CldfKMeansParams {
        k: c.k,
        restarts: c.restarts,
        max_iter: c.max_iter,
        tol: c.tol,
    }
}

fn kmeans_config(p: &CldfKMeansParams) -> KMeansConfig {
    KMeansConfig {
        k: p.k,
        restarts: p.restarts,
        max_iter: p.max_iter,
        tol: p.tol,
    }
}

/// Cluster `n` points of dimension `dim`; writes `n` cluster indices.
///
/// # Safety
/// `points` holds `n * dim` floats, `assignments` has room for `n` entries;
/// `params` and `objective` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn cldf_kmeans(
    points: *const f32,
    n: usize,
    dim: usize,
    params: *const CldfKMeansParams,
    seed: u64,
    assignments: *mut u32,
    objective: *mut f64,
) -> CldfStatus {
    guard(|| {
        let len = n.checked_mul(dim).ok_or_else(|| Fail::Arg("n * dim overflows".into()))?;
        let pts = slice(points, len, "points")?;
        let cfg = params.as_ref().map_or_else(KMeansConfig::default, kmeans_config);
        if assignments.is_null() {
            return Err(Fail::Null("assignments"));
        }
        let r = kmeans(pts, dim, &cfg, seed)?;
        let out = std::slice::from_raw_parts_mut(assignments, n);
        for (o, &a) in out.iter_mut().zip(&r.assignments) {
            *o = a as u32;
        }
        if let Some(obj) = objective.as_mut() {
            *obj = r.objective;
        }
        Ok(())
    })
}

/// Load a checkpoint directory written by the training stage.
///
/// # Safety
/// `dir` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn cldf_decoder_load(dir: *const c_char, out: *mut *mut CldfDecoder) -> CldfStatus {
    guard(|| {
        let net = PixelDecoder::load(&to_path(dir)?)?;
        emit(out, CldfDecoder(net))
    })
}

/// # Safety
/// `decoder` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn cldf_decoder_free(decoder: *mut CldfDecoder) {
    if !decoder.is_null() {
        drop(Box::from_raw(decoder));
    }
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cldf_decoder_dims(
    decoder: *const CldfDecoder,
    input_dim: *mut usize,
    output_dim: *mut usize,
) -> CldfStatus {
    guard(|| {
        let d = &nonnull(decoder, "decoder")?.0;
        *input_dim.as_mut().ok_or(Fail::Null("input_dim"))? = d.input_dim();
        *output_dim.as_mut().ok_or(Fail::Null("output_dim"))? = d.output_dim();
        Ok(())
    })
}

/// Embed every pixel of an HWC feature tensor; returns an HWC embedding tensor.
///
/// # Safety
/// Handles must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cldf_decoder_decode(
    decoder: *const CldfDecoder,
    features: *const CldfTensor,
    out: *mut *mut CldfTensor,
) -> CldfStatus {
    guard(|| {
        let d = &nonnull(decoder, "decoder")?.0;
        let f = AggregatedFeatures::from_container(&nonnull(features, "features")?.0)?;
        let emb = decode(&f, d)?;
        emit(out, CldfTensor(emb.data.to_container()))
    })
}

/// Decode, cluster into two groups and label the group holding the seed
/// foreground. `seeds` is the u8 HW label image (1 foreground, 2 background).
/// `params` may be NULL for the defaults.
///
/// # Safety
/// Handles must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cldf_infer_mask(
    decoder: *const CldfDecoder,
    features: *const CldfTensor,
    seeds: *const CldfTensor,
    params: *const CldfKMeansParams,
    seed: u64,
    out: *mut *mut CldfTensor,
) -> CldfStatus {
    guard(|| {
        let d = &nonnull(decoder, "decoder")?.0;
        let f = AggregatedFeatures::from_container(&nonnull(features, "features")?.0)?;
        let s = SeedSelection::from_container(&nonnull(seeds, "seeds")?.0)?;
        let cfg = params.as_ref().map_or_else(KMeansConfig::default, kmeans_config);
        let mask = infer_mask(&decode(&f, d)?, &s, &cfg, seed)?;
        emit(out, CldfTensor(mask.to_container()))
    })
}
