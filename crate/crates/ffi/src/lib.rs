//! C ABI for capsule-classify.
//!
//! Every fallible function returns a [`CcStatus`]. On failure the message is
//! available from [`cc_last_error`] on the same thread until the next failing
//! call. Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use capsule_classify::data_io::{load_checkpoint, Checkpoint, LabeledManifest, ManifestRecord};
use capsule_classify::ensemble::{ensemble_average, ModelOutputs, OutputKind};
use capsule_classify::image::InputSpec;
use capsule_classify::loss::{focal_loss, focal_loss_grad, FocalConfig, Reduction};
use capsule_classify::metrics::{auc_ovr, combined_score, evaluate};
use capsule_classify::nn::{forward, softmax};
use capsule_classify::sampling::{draw_epoch_indices, SamplerSpec};
use capsule_classify::trainloop::{image_features, pooling_grid};
use capsule_classify::{ClassCatalog, Error, ImageBuffer, Matrix, ModelParams, ProbMatrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    Shape = 6,
    Undefined = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CcAggregateMetrics {
    pub balanced_accuracy: f64,
    pub mean_auc: f64,
    pub combined_score: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub macro_specificity: f64,
}

/// A loaded checkpoint.
pub struct CcModel {
    params: ModelParams,
    input: InputSpec,
    grid: usize,
    class_names: Vec<CString>,
}

/// A seeded balanced sampler over a label vector.
pub struct CcSampler {
    spec: SamplerSpec,
    epoch: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => CcStatus::Io,
            Error::Parse { .. }
            | Error::Decode { .. }
            | Error::UnknownClass { .. }
            | Error::DuplicateImage { .. }
            | Error::Config(_) => CcStatus::Parse,
            Error::CheckpointVersion { .. } | Error::CheckpointIntegrity(_) => CcStatus::Checkpoint,
            Error::Shape(_) => CcStatus::Shape,
            Error::UndefinedAuc(_) => CcStatus::Undefined,
            _ => CcStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(name: &str) -> Failure {
    Failure(CcStatus::NullPointer, format!("{name} is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(CcStatus::InvalidArgument, message.into())
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> CcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CcStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            CcStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn checked_len(rows: usize, cols: usize) -> Result<usize, Failure> {
    rows.checked_mul(cols).ok_or_else(|| invalid("size overflow"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn cc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cc_model_load(path: *const c_char, out: *mut *mut CcModel) -> CcStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let ckpt: Checkpoint = load_checkpoint(Path::new(path))?;
        let params = ckpt.model()?;
        let grid = pooling_grid(params.arch())?;
        let class_names = ckpt
            .catalog
            .names()
            .iter()
            .map(|n| CString::new(n.as_str()).map_err(|_| invalid("class name contains NUL")))
            .collect::<Result<_, _>>()?;
        *out = Box::into_raw(Box::new(CcModel {
            params,
            input: ckpt.input,
            grid,
            class_names,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`cc_model_load`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn cc_model_free(model: *mut CcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cc_model_num_classes(model: *const CcModel) -> usize {
    model.as_ref().map_or(0, |m| m.class_names.len())
}

/// Feature vector length, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cc_model_input_dim(model: *const CcModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.arch().input_dim())
}

/// Name of class `index`, owned by the model; NULL when out of range.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cc_model_class_name(model: *const CcModel, index: usize) -> *const c_char {
    model
        .as_ref()
        .and_then(|m| m.class_names.get(index))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Class probabilities for `rows` feature vectors of `cols` values each
/// (row-major). `out` receives `rows * num_classes` values.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn cc_model_predict_features(
    model: *const CcModel,
    features: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> CcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = input(features, checked_len(rows, cols)?, "features")?;
        let k = m.class_names.len();
        if out_len != checked_len(rows, k)? {
            return Err(invalid(format!("out_len {out_len} != rows * classes {}", rows * k)));
        }
        let probs = softmax(&forward(&m.params, &Matrix::from_vec(rows, cols, x.to_vec())?)?)?;
        output(out, out_len, "out")?.copy_from_slice(probs.matrix().as_slice());
        Ok(())
    })
}

/// Class probabilities for one interleaved RGB image with values in `[0, 1]`,
/// using the checkpoint's evaluation transform. `out` receives `num_classes` values.
///
/// # Safety
/// `rgb` must hold `3 * width * height` values and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn cc_model_predict_image(
    model: *const CcModel,
    rgb: *const f64,
    width: usize,
    height: usize,
    out: *mut f64,
    out_len: usize,
) -> CcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let pixels = input(rgb, checked_len(checked_len(width, height)?, 3)?, "rgb")?;
        if out_len != m.class_names.len() {
            return Err(invalid(format!("out_len {out_len} != classes {}", m.class_names.len())));
        }
        let img = ImageBuffer::from_interleaved(width, height, pixels)?;
        let f = image_features(&img, &m.input, m.grid)?;
        let probs = softmax(&forward(&m.params, &Matrix::from_vec(1, f.len(), f)?)?)?;
        output(out, out_len, "out")?.copy_from_slice(probs.row(0));
        Ok(())
    })
}

/// Multi-class focal loss over `rows` logit vectors of `cols` classes.
/// `alpha` may be NULL (all ones) or hold `cols` weights. `per_sample`
/// (`rows` values) and `grad` (`rows * cols`) are optional. With `mean`
/// nonzero the total and gradient are averaged over rows.
///
/// # Safety
/// Non-NULL buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn cc_focal_loss(
    logits: *const f64,
    rows: usize,
    cols: usize,
    targets: *const usize,
    alpha: *const f64,
    gamma: f64,
    mean: bool,
    total: *mut f64,
    per_sample: *mut f64,
    grad: *mut f64,
) -> CcStatus {
    guard(|| {
        let z = Matrix::from_vec(rows, cols, input(logits, checked_len(rows, cols)?, "logits")?.to_vec())?;
        let t = input(targets, rows, "targets")?;
        let cfg = FocalConfig {
            alpha: if alpha.is_null() {
                vec![1.0; cols]
            } else {
                input(alpha, cols, "alpha")?.to_vec()
            },
            gamma,
            reduction: if mean { Reduction::Mean } else { Reduction::Sum },
        };
        let loss = focal_loss(&z, t, &cfg)?;
        if !total.is_null() {
            *total = loss.total;
        }
        if !per_sample.is_null() {
            output(per_sample, rows, "per_sample")?.copy_from_slice(&loss.per_sample);
        }
        if !grad.is_null() {
            let g = focal_loss_grad(&z, t, &cfg)?;
            output(grad, rows * cols, "grad")?.copy_from_slice(g.as_slice());
        }
        Ok(())
    })
}

/// One-vs-rest ROC AUC with tie-aware ranks. Returns `Undefined` when one
/// side is empty.
///
/// # Safety
/// `scores` and `positive` must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cc_auc(scores: *const f64, positive: *const bool, n: usize, out: *mut f64) -> CcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = input(scores, n, "scores")?;
        let p = input(positive, n, "positive")?;
        match auc_ovr(s, p)? {
            Some(a) => {
                *out = a;
                Ok(())
            }
            None => Err(Failure(
                CcStatus::Undefined,
                "AUC needs both positives and negatives".into(),
            )),
        }
    })
}

/// `(balanced_accuracy + mean_auc) / 2`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cc_combined_score(balanced_accuracy: f64, mean_auc: f64, out: *mut f64) -> CcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = combined_score(balanced_accuracy, mean_auc)?;
        Ok(())
    })
}

fn anonymous_catalog(k: usize) -> Result<ClassCatalog, Failure> {
    Ok(ClassCatalog::new((0..k).map(|i| format!("class{i}")))?)
}

/// Aggregate metrics of a `rows x cols` probability matrix against labels.
///
/// # Safety
/// `probs` must hold `rows * cols` values, `truth` `rows`, and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn cc_evaluate(
    probs: *const f64,
    rows: usize,
    cols: usize,
    truth: *const usize,
    out: *mut CcAggregateMetrics,
) -> CcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = ProbMatrix::new(Matrix::from_vec(
            rows,
            cols,
            input(probs, checked_len(rows, cols)?, "probs")?.to_vec(),
        )?)?;
        let t = input(truth, rows, "truth")?;
        let a = evaluate(&p, t, &anonymous_catalog(cols)?)?.aggregate;
        *out = CcAggregateMetrics {
            balanced_accuracy: a.balanced_accuracy,
            mean_auc: a.mean_auc,
            combined_score: a.combined_score,
            macro_precision: a.macro_precision,
            macro_f1: a.macro_f1,
            macro_specificity: a.macro_specificity,
        };
        Ok(())
    })
}

/// Cell-wise mean of `members` probability matrices, each `rows x cols`,
/// stored back to back. The result does not depend on member order.
///
/// # Safety
/// `probs` must hold `members * rows * cols` values and `out` `rows * cols`.
#[no_mangle]
pub unsafe extern "C" fn cc_ensemble_average(
    probs: *const f64,
    members: usize,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> CcStatus {
    guard(|| {
        let cell = checked_len(rows, cols)?;
        let all = input(probs, checked_len(members, cell)?, "probs")?;
        let ids: Vec<String> = (0..rows).map(|i| i.to_string()).collect();
        let outputs = (0..members)
            .map(|m| {
                let values = Matrix::from_vec(rows, cols, all[m * cell..(m + 1) * cell].to_vec())?;
                ModelOutputs::new("", ids.clone(), values, OutputKind::Probabilities)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let avg = ensemble_average(&outputs)?;
        output(out, cell, "out")?.copy_from_slice(avg.matrix().as_slice());
        Ok(())
    })
}

/// Sampler giving every class with records equal total mass.
///
/// # Safety
/// `labels` must hold `n` values and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn cc_sampler_new(
    labels: *const usize,
    n: usize,
    classes: usize,
    seed: u64,
    out: *mut *mut CcSampler,
) -> CcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let records = input(labels, n, "labels")?
            .iter()
            .enumerate()
            .map(|(i, &label)| ManifestRecord {
                image_id: i.to_string(),
                label,
            })
            .collect();
        let manifest = LabeledManifest::new(records, classes)?;
        let spec = SamplerSpec::balanced(&manifest, classes, seed)?;
        *out = Box::into_raw(Box::new(CcSampler { spec, epoch: 0 }));
        Ok(())
    })
}

/// Draws `n` record indices (with replacement). Successive calls continue
/// a deterministic sequence.
///
/// # Safety
/// `sampler` must be live and `out` hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn cc_sampler_draw(sampler: *mut CcSampler, n: usize, out: *mut usize) -> CcStatus {
    guard(|| {
        let s = sampler.as_mut().ok_or_else(|| null("sampler"))?;
        let seed = s.spec.seed().wrapping_add(s.epoch);
        let indices = draw_epoch_indices(&s.spec.with_seed(seed), n)?;
        output(out, n, "out")?.copy_from_slice(&indices);
        s.epoch += 1;
        Ok(())
    })
}

/// # Safety
/// `sampler` must come from [`cc_sampler_new`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn cc_sampler_free(sampler: *mut CcSampler) {
    if !sampler.is_null() {
        drop(Box::from_raw(sampler));
    }
}
