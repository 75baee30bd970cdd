//! C ABI for the adats calibration toolkit.
//!
//! Every fallible function returns an `AdatsStatus`; on failure a message
//! is available from `adats_last_error` on the same thread. Objects are
//! opaque handles released with their matching `_free` function. Output
//! arrays are allocated by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use adats::cli::evaluate_method;
use adats::dataset::CalibrationDataset;
use adats::tempscale::{self, FitObjective, TemperatureGrid, VanillaScaler};
use adats::{AdaTsModel, Error};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdatsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numerical = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdatsObjective {
    Ece = 0,
    Nll = 1,
}

/// Calibration metrics of one temperature assignment.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdatsMetrics {
    pub accuracy: f64,
    pub ece: f64,
    pub ada_ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub aurra_confidence: f64,
    pub aurra_entropy: f64,
    pub aurra_ds: f64,
    pub mean_temperature: f64,
}

/// Opaque calibration dataset.
pub struct AdatsDataset(CalibrationDataset);

/// Opaque single-temperature scaler.
pub struct AdatsVanilla(VanillaScaler);

/// Opaque sample-adaptive temperature model.
pub struct AdatsModel(AdaTsModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AdatsStatus {
    match e {
        Error::Io { .. } => AdatsStatus::Io,
        Error::InvalidInput(_) | Error::DimensionMismatch { .. } => AdatsStatus::InvalidArgument,
        Error::NonFiniteLoss { .. } => AdatsStatus::Numerical,
        Error::Format(_)
        | Error::Length { .. }
        | Error::SampleValidation { .. }
        | Error::VersionMismatch { .. }
        | Error::Json(_)
        | Error::Csv(_) => AdatsStatus::Format,
    }
}

struct Failure(AdatsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(AdatsStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AdatsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdatsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AdatsStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p).to_str().map(str::to_owned).map_err(|_| {
        Failure(
            AdatsStatus::InvalidArgument,
            "path is not valid UTF-8".into(),
        )
    })
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn in_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn adats_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Reads a CALD file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn adats_dataset_read(
    path: *const c_char,
    out: *mut *mut AdatsDataset,
) -> AdatsStatus {
    guard(|| {
        let path = path_arg(path)?;
        store(out, AdatsDataset(adats::read_dataset(path)?))
    })
}

/// Builds a dataset from row-major arrays: `features` is `n × d`, `logits`
/// is `n × k`, `labels` has `n` entries. Arrays that fail validation give
/// `InvalidArgument`.
///
/// # Safety
/// The arrays must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn adats_dataset_from_arrays(
    n: usize,
    d: usize,
    k: usize,
    features: *const f32,
    logits: *const f32,
    labels: *const u32,
    out: *mut *mut AdatsDataset,
) -> AdatsStatus {
    guard(|| {
        let f = in_slice(features, n * d, "features")?;
        let s = in_slice(logits, n * k, "logits")?;
        let y = in_slice(labels, n, "labels")?;
        let ds = CalibrationDataset::new(
            d,
            k,
            f.iter().map(|&v| f64::from(v)).collect(),
            s.iter().map(|&v| f64::from(v)).collect(),
            y.to_vec(),
        )
        .map_err(|e| Failure(AdatsStatus::InvalidArgument, e.to_string()))?;
        store(out, AdatsDataset(ds))
    })
}

/// Writes the dataset as a CALD file.
///
/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn adats_dataset_write(
    ds: *const AdatsDataset,
    path: *const c_char,
) -> AdatsStatus {
    guard(|| {
        let ds = as_ref(ds, "dataset")?;
        let path = path_arg(path)?;
        Ok(adats::write_dataset(&ds.0, path)?)
    })
}

/// # Safety
/// `ds` must be a live handle; any of the outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn adats_dataset_dims(
    ds: *const AdatsDataset,
    n: *mut usize,
    d: *mut usize,
    k: *mut usize,
) -> AdatsStatus {
    guard(|| {
        let ds = &as_ref(ds, "dataset")?.0;
        for (p, v) in [(n, ds.n()), (d, ds.d()), (k, ds.k())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn adats_dataset_free(ds: *mut AdatsDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Metrics with per-sample `temperatures` (length `n`), or with the single
/// `temperature` when `temperatures` is null.
///
/// # Safety
/// `ds` must be a live handle, `temperatures` null or `n` long, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn adats_evaluate(
    ds: *const AdatsDataset,
    temperatures: *const f64,
    temperature: f64,
    bins: usize,
    out: *mut AdatsMetrics,
) -> AdatsStatus {
    guard(|| {
        let ds = &as_ref(ds, "dataset")?.0;
        if out.is_null() {
            return Err(null("output"));
        }
        let m = if temperatures.is_null() {
            evaluate_method("ffi", ds, temperature, bins)?
        } else {
            let ts = slice::from_raw_parts(temperatures, ds.n());
            evaluate_method("ffi", ds, ts, bins)?
        };
        *out = AdatsMetrics {
            accuracy: m.accuracy,
            ece: m.ece,
            ada_ece: m.ada_ece,
            nll: m.nll,
            brier: m.brier,
            aurra_confidence: m.aurra_confidence,
            aurra_entropy: m.aurra_entropy,
            aurra_ds: m.aurra_ds,
            mean_temperature: m.mean_temperature,
        };
        Ok(())
    })
}

/// `softmax(logits / t)` into `out` (length `k`).
///
/// # Safety
/// `logits` and `out` must hold `k` elements.
#[no_mangle]
pub unsafe extern "C" fn adats_softmax_with_temperature(
    logits: *const f64,
    k: usize,
    t: f64,
    out: *mut f64,
) -> AdatsStatus {
    guard(|| {
        let s = in_slice(logits, k, "logits")?;
        let p = tempscale::softmax_with_temperature(s, t)?;
        out_slice(out, k, "output")?.copy_from_slice(&p);
        Ok(())
    })
}

/// Grid-search fit of a single temperature over `grid_lo:grid_hi:grid_step`.
///
/// # Safety
/// `ds` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn adats_vanilla_fit(
    ds: *const AdatsDataset,
    objective: AdatsObjective,
    grid_lo: f64,
    grid_hi: f64,
    grid_step: f64,
    bins: usize,
    out: *mut *mut AdatsVanilla,
) -> AdatsStatus {
    guard(|| {
        let ds = &as_ref(ds, "dataset")?.0;
        let objective = match objective {
            AdatsObjective::Ece => FitObjective::Ece,
            AdatsObjective::Nll => FitObjective::Nll,
        };
        let grid = TemperatureGrid {
            lo: grid_lo,
            hi: grid_hi,
            step: grid_step,
        };
        store(
            out,
            AdatsVanilla(tempscale::fit_vanilla(ds, objective, grid, bins)?),
        )
    })
}

/// Loads a vanilla scaler from its JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn adats_vanilla_load(
    path: *const c_char,
    out: *mut *mut AdatsVanilla,
) -> AdatsStatus {
    guard(|| {
        let path = path_arg(path)?;
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Failure(AdatsStatus::Io, format!("{path}: {e}")))?;
        store(out, AdatsVanilla(VanillaScaler::from_json(&text)?))
    })
}

/// # Safety
/// `v` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn adats_vanilla_temperature(
    v: *const AdatsVanilla,
    out: *mut f64,
) -> AdatsStatus {
    guard(|| {
        let v = as_ref(v, "scaler")?;
        *out_slice(out, 1, "output")?.first_mut().expect("len 1") = v.0.temperature;
        Ok(())
    })
}

/// # Safety
/// `v` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn adats_vanilla_free(v: *mut AdatsVanilla) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// Loads an adaptive model from its JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn adats_model_load(
    path: *const c_char,
    out: *mut *mut AdatsModel,
) -> AdatsStatus {
    guard(|| {
        let path = path_arg(path)?;
        store(out, AdatsModel(adats::load_model(path)?))
    })
}

/// # Safety
/// `m` must be a live handle; any of the outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn adats_model_dims(
    m: *const AdatsModel,
    d: *mut usize,
    k: *mut usize,
    latent_dim: *mut usize,
) -> AdatsStatus {
    guard(|| {
        let m = &as_ref(m, "model")?.0;
        for (p, v) in [(d, m.d()), (k, m.k()), (latent_dim, m.latent_dim())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Inference-time temperature of one feature vector of length `d`.
///
/// # Safety
/// `m` must be a live handle, `features` hold `d` elements, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn adats_model_predict_temperature(
    m: *const AdatsModel,
    features: *const f64,
    d: usize,
    out: *mut f64,
) -> AdatsStatus {
    guard(|| {
        let m = &as_ref(m, "model")?.0;
        let phi = in_slice(features, d, "features")?;
        let t = m.predict_temperature(phi)?;
        *out_slice(out, 1, "output")?.first_mut().expect("len 1") = t;
        Ok(())
    })
}

/// Per-sample temperatures (`n`) and calibrated probabilities (`n × k`,
/// row-major). Either output may be null.
///
/// # Safety
/// Handles must be live and non-null outputs sized as stated.
#[no_mangle]
pub unsafe extern "C" fn adats_model_calibrate(
    m: *const AdatsModel,
    ds: *const AdatsDataset,
    temperatures: *mut f64,
    probabilities: *mut f64,
) -> AdatsStatus {
    guard(|| {
        let m = &as_ref(m, "model")?.0;
        let ds = &as_ref(ds, "dataset")?.0;
        let (t, p) = adats::calibrate(m, ds)?;
        if !temperatures.is_null() {
            out_slice(temperatures, t.len(), "temperatures")?.copy_from_slice(&t);
        }
        if !probabilities.is_null() {
            out_slice(probabilities, p.len(), "probabilities")?.copy_from_slice(&p);
        }
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn adats_model_free(m: *mut AdatsModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
