//! C ABI over the engine: opaque layer and mask handles, batch forward and
//! scoring, and the two detection metrics.
//!
//! Every function returns a [`DiceStatus`]. On failure the message is kept
//! per thread and can be read with [`dice_last_error`]. Panics never cross
//! the boundary; they surface as `DICE_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use dice_ood::model_io::manifest_path;
use dice_ood::{
    auroc, build_mask, compute_contribution, energy_score, forward_batch, fpr_at_tpr, load_tensor,
    msp_score, p_to_k, DiceError, FeatureSet, FinalLayer, Mask, Tensor2D,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiceStatus {
    Ok = 0,
    NullPointer = 1,
    Io = 2,
    Format = 3,
    Data = 4,
    Shape = 5,
    Domain = 6,
    Numerical = 7,
    Config = 8,
    Training = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiceScoreKind {
    Energy = 0,
    Msp = 1,
}

/// Final linear layer (`W` is units × classes, plus a bias per class).
pub struct DiceLayer {
    inner: FinalLayer,
}

/// Binary keep/drop selection over the layer's weights.
pub struct DiceMask {
    inner: Mask,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &DiceError) -> DiceStatus {
    match e {
        DiceError::Io { .. } => DiceStatus::Io,
        DiceError::Format(_) => DiceStatus::Format,
        DiceError::Data(_) => DiceStatus::Data,
        DiceError::Shape(_) => DiceStatus::Shape,
        DiceError::Domain(_) => DiceStatus::Domain,
        DiceError::Numerical(_) => DiceStatus::Numerical,
        DiceError::Config(_) => DiceStatus::Config,
        DiceError::Training(_) => DiceStatus::Training,
    }
}

enum Failure {
    Null(&'static str),
    Engine(DiceError),
}

impl From<DiceError> for Failure {
    fn from(e: DiceError) -> Self {
        Failure::Engine(e)
    }
}

type FfiResult = Result<(), Failure>;

fn guard(f: impl FnOnce() -> FfiResult) -> DiceStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DiceStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            DiceStatus::NullPointer
        }
        Ok(Err(Failure::Engine(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DiceStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either null or a pointer obtained from this library
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn input<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn output<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn put<T>(out: *mut T, value: T, what: &'static str) -> FfiResult {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    // SAFETY: non-null and, by contract, writable
    unsafe { out.write(value) };
    Ok(())
}

fn feature_set(layer: &FinalLayer, data: &[f32], rows: usize) -> Result<FeatureSet, Failure> {
    let t = Tensor2D::new(rows, layer.units(), data.to_vec())?;
    Ok(FeatureSet::unlabeled(t)?)
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn dice_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a layer from a row-major `units × classes` weight array and a
/// `classes`-long bias.
///
/// # Safety
/// `weight` must hold `units * classes` floats, `bias` `classes` floats.
#[no_mangle]
pub unsafe extern "C" fn dice_layer_new(
    weight: *const f32,
    units: usize,
    classes: usize,
    bias: *const f32,
    out: *mut *mut DiceLayer,
) -> DiceStatus {
    guard(|| {
        let total = units
            .checked_mul(classes)
            .ok_or_else(|| DiceError::Shape("layer size overflows".into()))?;
        let w = input(weight, total, "weight")?;
        let b = input(bias, classes, "bias")?;
        let inner = FinalLayer::new(Tensor2D::new(units, classes, w.to_vec())?, b.to_vec())?;
        put(out, Box::into_raw(Box::new(DiceLayer { inner })), "out")
    })
}

/// Reads `W` and `b` from a bundle directory.
///
/// # Safety
/// `dir` must be a nul-terminated path.
#[no_mangle]
pub unsafe extern "C" fn dice_layer_load(
    dir: *const c_char,
    out: *mut *mut DiceLayer,
) -> DiceStatus {
    guard(|| {
        if dir.is_null() {
            return Err(Failure::Null("dir"));
        }
        let dir = CStr::from_ptr(dir)
            .to_str()
            .map_err(|_| DiceError::Config("bundle path is not UTF-8".into()))?;
        let dir = Path::new(dir);
        let w = load_tensor(&manifest_path(dir, "W"))?;
        let b = load_tensor(&manifest_path(dir, "b"))?;
        if b.rows() != 1 {
            return Err(
                DiceError::Shape(format!("b must be 1×C, got {}×{}", b.rows(), b.cols())).into(),
            );
        }
        let inner = FinalLayer::new(w, b.into_data())?;
        put(out, Box::into_raw(Box::new(DiceLayer { inner })), "out")
    })
}

/// # Safety
/// `layer` must be null or come from `dice_layer_new`/`dice_layer_load`,
/// and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dice_layer_free(layer: *mut DiceLayer) {
    if !layer.is_null() {
        drop(Box::from_raw(layer));
    }
}

/// # Safety
/// `layer` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dice_layer_shape(
    layer: *const DiceLayer,
    units: *mut usize,
    classes: *mut usize,
) -> DiceStatus {
    guard(|| {
        let l = &non_null(layer, "layer")?.inner;
        put(units, l.units(), "units")?;
        put(classes, l.classes(), "classes")
    })
}

/// Keeps the `round((1 − p)·units·classes)` weights with the largest mean
/// contribution over `rows` calibration samples (row-major, `units` wide).
///
/// # Safety
/// `layer` must be a live handle; `features` must hold `rows * units` floats.
#[no_mangle]
pub unsafe extern "C" fn dice_mask_fit(
    layer: *const DiceLayer,
    features: *const f32,
    rows: usize,
    p: f64,
    out: *mut *mut DiceMask,
) -> DiceStatus {
    guard(|| {
        let l = &non_null(layer, "layer")?.inner;
        let x = input(features, rows.saturating_mul(l.units()), "features")?;
        let set = feature_set(l, x, rows)?;
        let k = p_to_k(p, l.units(), l.classes())?;
        let inner = build_mask(&compute_contribution(l, &set)?, k)?;
        put(out, Box::into_raw(Box::new(DiceMask { inner })), "out")
    })
}

/// # Safety
/// `mask` must be null or come from `dice_mask_fit`, and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn dice_mask_free(mask: *mut DiceMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// # Safety
/// `mask` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dice_mask_popcount(mask: *const DiceMask, out: *mut usize) -> DiceStatus {
    guard(|| put(out, non_null(mask, "mask")?.inner.popcount(), "out"))
}

/// Copies the mask as `units × classes` bytes (1 = kept), row-major.
///
/// # Safety
/// `mask` must be a live handle; `out` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dice_mask_copy(
    mask: *const DiceMask,
    out: *mut u8,
    len: usize,
) -> DiceStatus {
    guard(|| {
        let m = &non_null(mask, "mask")?.inner;
        let data = m.tensor().data();
        if len != data.len() {
            return Err(DiceError::Shape(format!(
                "mask has {} entries, buffer holds {len}",
                data.len()
            ))
            .into());
        }
        let dst = output(out, len, "out")?;
        for (d, &v) in dst.iter_mut().zip(data) {
            *d = u8::from(v == 1.0);
        }
        Ok(())
    })
}

/// Logits for `rows` samples into `out` (`rows × classes` doubles). A null
/// `mask` gives the dense layer.
///
/// # Safety
/// `layer` must be live, `mask` null or live, `features` `rows * units`
/// floats, `out` `rows * classes` doubles.
#[no_mangle]
pub unsafe extern "C" fn dice_forward(
    layer: *const DiceLayer,
    mask: *const DiceMask,
    features: *const f32,
    rows: usize,
    out: *mut f64,
) -> DiceStatus {
    guard(|| {
        let l = &non_null(layer, "layer")?.inner;
        let m = mask.as_ref().map(|m| &m.inner);
        let x = input(features, rows.saturating_mul(l.units()), "features")?;
        let logits = forward_batch(l, m, &Tensor2D::new(rows, l.units(), x.to_vec())?)?;
        output(out, logits.data().len(), "out")?.copy_from_slice(logits.data());
        Ok(())
    })
}

/// One score per sample into `out` (`rows` doubles); higher means more
/// in-distribution. `kind` is a [`DiceScoreKind`] value.
///
/// # Safety
/// Same as [`dice_forward`], with `out` holding `rows` doubles.
#[no_mangle]
pub unsafe extern "C" fn dice_score(
    layer: *const DiceLayer,
    mask: *const DiceMask,
    kind: u32,
    features: *const f32,
    rows: usize,
    out: *mut f64,
) -> DiceStatus {
    guard(|| {
        let l = &non_null(layer, "layer")?.inner;
        let m = mask.as_ref().map(|m| &m.inner);
        let x = input(features, rows.saturating_mul(l.units()), "features")?;
        let logits = forward_batch(l, m, &Tensor2D::new(rows, l.units(), x.to_vec())?)?;
        let f = match kind {
            k if k == DiceScoreKind::Energy as u32 => energy_score,
            k if k == DiceScoreKind::Msp as u32 => msp_score,
            other => return Err(DiceError::Config(format!("unknown score kind {other}")).into()),
        };
        let dst = output(out, rows, "out")?;
        for (i, d) in dst.iter_mut().enumerate() {
            *d = f(logits.row(i))?;
        }
        Ok(())
    })
}

/// # Safety
/// `id` and `ood` must hold `n_id` and `n_ood` doubles.
#[no_mangle]
pub unsafe extern "C" fn dice_auroc(
    id: *const f64,
    n_id: usize,
    ood: *const f64,
    n_ood: usize,
    out: *mut f64,
) -> DiceStatus {
    guard(|| {
        let value = auroc(input(id, n_id, "id")?, input(ood, n_ood, "ood")?)?;
        put(out, value, "out")
    })
}

/// False-positive rate at the threshold that accepts `tpr` of the ID
/// scores, and that threshold.
///
/// # Safety
/// `id` and `ood` must hold `n_id` and `n_ood` doubles.
#[no_mangle]
pub unsafe extern "C" fn dice_fpr_at_tpr(
    id: *const f64,
    n_id: usize,
    ood: *const f64,
    n_ood: usize,
    tpr: f64,
    fpr: *mut f64,
    threshold: *mut f64,
) -> DiceStatus {
    guard(|| {
        let (f, t) = fpr_at_tpr(input(id, n_id, "id")?, input(ood, n_ood, "ood")?, tpr)?;
        put(fpr, f, "fpr")?;
        put(threshold, t, "threshold")
    })
}
