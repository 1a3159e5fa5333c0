//! C ABI over the segmentation library.
//!
//! Every function returns a [`UneptStatus`]. On failure the message is kept
//! per thread and read with [`unept_last_error_message`]. Panics are caught at
//! the boundary and reported as [`UneptStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use unept::boundary::{distance_transform, BoundaryError, LabelMap};
use unept::cli::{load_model, CliError, RunConfig};
use unept::data::DataError;
use unept::model::{ModelError, Unept};
use unept::numerics::{NumericsError, ParamStore, Tensor};
use unept::training::{confusion_matrix, predicted_labels, TrainingError};

#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UneptStatus {
    Ok = 0,
    NullPointer = -1,
    InvalidArgument = -2,
    Io = -3,
    Format = -4,
    Shape = -5,
    Numeric = -6,
    Panic = -255,
}

/// Trained network loaded from a checkpoint.
pub struct UneptModel {
    model: Unept,
    store: ParamStore,
}

struct Failure {
    status: UneptStatus,
    message: String,
}

impl Failure {
    fn new(status: UneptStatus, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

fn numerics_status(e: &NumericsError) -> UneptStatus {
    match e {
        NumericsError::ShapeMismatch { .. } => UneptStatus::Shape,
        NumericsError::InvalidArgument { .. } => UneptStatus::InvalidArgument,
        NumericsError::NonFinite { .. } | NumericsError::EmptyAxis { .. } | NumericsError::NonScalarLoss(_) => {
            UneptStatus::Numeric
        }
    }
}

fn boundary_status(e: &BoundaryError) -> UneptStatus {
    match e {
        BoundaryError::Shape(_) => UneptStatus::Shape,
        BoundaryError::InvalidArgument(_) => UneptStatus::InvalidArgument,
        BoundaryError::Numerics(n) => numerics_status(n),
    }
}

fn model_status(e: &ModelError) -> UneptStatus {
    match e {
        ModelError::Config(_) => UneptStatus::InvalidArgument,
        ModelError::Input { .. } => UneptStatus::Shape,
        ModelError::Numerics(n) => numerics_status(n),
    }
}

fn data_status(e: &DataError) -> UneptStatus {
    match e {
        DataError::Io(_) => UneptStatus::Io,
        DataError::Format(_) => UneptStatus::Format,
        DataError::Shape(_) => UneptStatus::Shape,
        DataError::Spec(_) => UneptStatus::InvalidArgument,
        DataError::Boundary(b) => boundary_status(b),
    }
}

fn training_status(e: &TrainingError) -> UneptStatus {
    match e {
        TrainingError::Shape(_) => UneptStatus::Shape,
        TrainingError::InvalidArgument(_) | TrainingError::EmptyConfusion => UneptStatus::InvalidArgument,
        TrainingError::NonFiniteLoss { .. } => UneptStatus::Numeric,
        TrainingError::Numerics(n) => numerics_status(n),
        TrainingError::Boundary(b) => boundary_status(b),
        TrainingError::Model(m) => model_status(m),
        TrainingError::Data(d) => data_status(d),
    }
}

fn cli_status(e: &CliError) -> UneptStatus {
    match e {
        CliError::Usage(_) | CliError::Config(_) | CliError::Contract(_) => UneptStatus::InvalidArgument,
        CliError::Checkpoint(_) => UneptStatus::Format,
        CliError::Io { .. } => UneptStatus::Io,
        CliError::GradcheckFailed(_) => UneptStatus::Numeric,
        CliError::Data(d) => data_status(d),
        CliError::Training(t) => training_status(t),
        CliError::Model(m) => model_status(m),
        CliError::Boundary(b) => boundary_status(b),
        CliError::Numerics(n) => numerics_status(n),
    }
}

macro_rules! impl_from {
    ($($ty:ty => $f:ident),*) => {
        $(impl From<$ty> for Failure {
            fn from(e: $ty) -> Self {
                Self::new($f(&e), e.to_string())
            }
        })*
    };
}

impl_from!(CliError => cli_status, TrainingError => training_status, ModelError => model_status, BoundaryError => boundary_status);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: Option<String>) {
    let c = message.map(|m| CString::new(m.replace('\0', " ")).expect("interior nuls replaced"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> UneptStatus {
    let (status, message) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (UneptStatus::Ok, None),
        Ok(Err(e)) => (e.status, Some(e.message)),
        Err(payload) => {
            let text = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            (UneptStatus::Panic, Some(format!("panic: {text}")))
        }
    };
    set_last_error(message);
    status
}

fn null(what: &str) -> Failure {
    Failure::new(UneptStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(UneptStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn map_len(height: usize, width: usize) -> Result<usize, Failure> {
    height
        .checked_mul(width)
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::new(UneptStatus::Shape, format!("bad map size {height}×{width}")))
}

/// Message of the last failure on this thread, or null after a success. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn unept_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a network. `config_path` may be null for the default configuration;
/// it must describe the network the checkpoint was trained with.
///
/// # Safety
/// Paths are nul-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn unept_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut UneptModel,
) -> UneptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_path.is_null() {
            RunConfig::default()
        } else {
            let path = path_arg(config_path, "config_path")?;
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Failure::new(UneptStatus::Io, format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        };
        cfg.validate()?;
        let checkpoint = path_arg(checkpoint_path, "checkpoint_path")?;
        let (model, store, _) = load_model(&cfg, &checkpoint)?;
        *out = Box::into_raw(Box::new(UneptModel { model, store }));
        Ok(())
    })
}

/// Releases a network; null is accepted.
///
/// # Safety
/// `model` comes from [`unept_model_load`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn unept_model_free(model: *mut UneptModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes the network predicts.
///
/// # Safety
/// `model` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn unept_model_classes(model: *const UneptModel, out: *mut usize) -> UneptStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.model.config().classes;
        Ok(())
    })
}

/// Segments an interleaved 8-bit RGB image of `height × width` pixels, both
/// multiples of 32, writing one class id per pixel in row-major order. With
/// `refine` the boundary and direction heads correct the labels.
///
/// # Safety
/// `rgb` holds `3·height·width` bytes and `labels` holds `labels_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn unept_model_segment(
    model: *const UneptModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    refine: bool,
    labels: *mut u8,
    labels_len: usize,
) -> UneptStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let plane = map_len(height, width)?;
        if !height.is_multiple_of(32) || !width.is_multiple_of(32) {
            return Err(Failure::new(UneptStatus::Shape, format!("image is {height}×{width}; both sides must be multiples of 32")));
        }
        if labels_len != plane {
            return Err(Failure::new(UneptStatus::Shape, format!("labels buffer holds {labels_len} bytes, need {plane}")));
        }
        let rgb = slice_arg(rgb, 3 * plane, "rgb")?;
        let labels = slice_mut_arg(labels, labels_len, "labels")?;
        let image = Tensor::from_fn(&[3, height, width], |i| rgb[3 * (i % plane) + i / plane] as f64 / 255.0);
        let pred = m.model.predict(&m.store, &image)?;
        labels.copy_from_slice(predicted_labels(&pred, refine)?.labels());
        Ok(())
    })
}

/// Distance from each pixel to the nearest labelled pixel of another class;
/// infinity where no such pixel exists. Label 255 is ignored.
///
/// # Safety
/// `labels` and `distances` each hold `height·width` elements.
#[no_mangle]
pub unsafe extern "C" fn unept_distance_transform(
    labels: *const u8,
    height: usize,
    width: usize,
    distances: *mut f64,
) -> UneptStatus {
    guard(|| {
        let n = map_len(height, width)?;
        let labels = slice_arg(labels, n, "labels")?;
        let out = slice_mut_arg(distances, n, "distances")?;
        let map = LabelMap::new(height, width, labels.to_vec())?;
        out.copy_from_slice(&distance_transform(&map).values);
        Ok(())
    })
}

/// Mean IoU over the classes present in `truth` and pixel accuracy of `pred`
/// against `truth`; pixels labelled 255 in `truth` are skipped.
///
/// # Safety
/// `pred` and `truth` hold `len` bytes; `miou` and `pix_acc` are writable.
#[no_mangle]
pub unsafe extern "C" fn unept_segmentation_metrics(
    pred: *const u8,
    truth: *const u8,
    len: usize,
    classes: usize,
    miou: *mut f64,
    pix_acc: *mut f64,
) -> UneptStatus {
    guard(|| {
        let n = map_len(1, len)?;
        let pred = LabelMap::new(1, n, slice_arg(pred, n, "pred")?.to_vec())?;
        let truth = LabelMap::new(1, n, slice_arg(truth, n, "truth")?.to_vec())?;
        let miou = miou.as_mut().ok_or_else(|| null("miou"))?;
        let pix_acc = pix_acc.as_mut().ok_or_else(|| null("pix_acc"))?;
        if classes == 0 {
            return Err(Failure::new(UneptStatus::InvalidArgument, "classes must be positive"));
        }
        let m = confusion_matrix(&pred, &truth, classes)?.metrics()?;
        *miou = m.miou;
        *pix_acc = m.pix_acc;
        Ok(())
    })
}
