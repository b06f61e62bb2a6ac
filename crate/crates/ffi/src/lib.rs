//! C ABI over the `ddcrnn` library.
//!
//! Every fallible function returns a [`DdcrnnStatus`]. On failure the
//! message is available from [`ddcrnn_last_error`] on the same thread until
//! the next failing call. Handles are opaque and must be released with the
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use libc::{c_char, size_t};

use ddcrnn::baselines::{Baseline, LinearARParams, LINEAR_AR_KIND};
use ddcrnn::checkpoint::Checkpoint;
use ddcrnn::evaluation;
use ddcrnn::graph::pearson_adjacency;
use ddcrnn::ingest::TrafficPanel;
use ddcrnn::model::{ModelState, MODEL_KIND};
use ddcrnn::pipeline::Forecaster;
use ddcrnn::{Error, Matrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdcrnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Validation = 4,
    Shape = 5,
    Numeric = 6,
    Checkpoint = 7,
    Io = 8,
    /// The metric is undefined for this input (constant series, every
    /// observation below the floor). Outputs are left untouched.
    Undefined = 9,
    Panic = 10,
}

/// A traffic panel read from CSV.
pub struct DdcrnnPanel {
    panel: TrafficPanel,
    ids: Vec<CString>,
}

/// A trained network or fitted linear AR baseline loaded from a checkpoint.
pub struct DdcrnnModel {
    forecaster: Forecaster,
    input_horizon: usize,
    output_horizon: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn status_of(err: &Error) -> DdcrnnStatus {
    match err {
        Error::Parse { .. } => DdcrnnStatus::Parse,
        Error::Validation(_) => DdcrnnStatus::Validation,
        Error::Shape { .. } => DdcrnnStatus::Shape,
        Error::Numeric(_) => DdcrnnStatus::Numeric,
        Error::Checkpoint(_) => DdcrnnStatus::Checkpoint,
        Error::Io { .. } => DdcrnnStatus::Io,
    }
}

struct Fail(DdcrnnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DdcrnnStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(DdcrnnStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DdcrnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DdcrnnStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DdcrnnStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn checked_len(rows: usize, cols: usize) -> Result<usize, Fail> {
    rows.checked_mul(cols).ok_or_else(|| invalid("dimensions overflow"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ddcrnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the most recent failure on this thread, or an empty string.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn ddcrnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Reads a panel CSV into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ddcrnn_panel_read(path: *const c_char, out: *mut *mut DdcrnnPanel) -> DdcrnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let panel = TrafficPanel::read_csv(&path_arg(path)?)?;
        let ids = panel
            .node_ids
            .iter()
            .map(|s| CString::new(s.as_str()).map_err(|_| invalid("node id contains NUL")))
            .collect::<Result<_, _>>()?;
        *out = Box::into_raw(Box::new(DdcrnnPanel { panel, ids }));
        Ok(())
    })
}

/// Time steps and node count of a panel.
///
/// # Safety
/// `panel` must be a live handle; `rows` and `cols` writable pointers.
#[no_mangle]
pub unsafe extern "C" fn ddcrnn_panel_dims(
    panel: *const DdcrnnPanel,
    rows: *mut size_t,
    cols: *mut size_t,
) -> DdcrnnStatus {
    guard(|| {
        let p = panel.as_ref().ok_or_else(|| null("panel"))?;
        if rows.is_null() || cols.is_null() {
            return Err(null("rows/cols"));
        }
        *rows = p.panel.len();
        *cols = p.panel.num_nodes();
        Ok(())
    })
}

/// Copies the row-major `rows × cols` values into `buf`, which must hold
/// exactly `len = rows * cols` doubles.
///
/// # Safety
/// `panel` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ddcrnn_panel_values(panel: *const DdcrnnPanel, buf: *mut f64, len: size_t) -> DdcrnnStatus {
    guard(|| {
        let p = panel.as_ref().ok_or_else(|| null("panel"))?;
        let data = p.panel.values.data();
        if len != data.len() {
            return Err(invalid(format!("buffer holds {len} values, panel has {}", data.len())));
        }
        out_slice(buf, len, "buf")?.copy_from_slice(data);
        Ok(())
    })
}

/// Borrowed id of node `index`, or null when out of range. Valid while the
/// panel lives.
///
/// # Safety
/// `panel` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ddcrnn_panel_node_id(panel: *const DdcrnnPanel, index: size_t) -> *const c_char {
    match panel.as_ref().and_then(|p| p.ids.get(index)) {
        Some(s) => s.as_ptr(),
        None => std::ptr::null(),
    }
}

/// # Safety
/// `panel` must be null or a handle from [`ddcrnn_panel_read`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ddcrnn_panel_free(panel: *mut DdcrnnPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// Loads a model or linear AR checkpoint into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ddcrnn_model_load(path: *const c_char, out: *mut *mut DdcrnnModel) -> DdcrnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::load(&path_arg(path)?)?;
        let model = match ck.kind() {
            MODEL_KIND => {
                let m = ModelState::from_checkpoint(&ck)?;
                if m.scaler.is_none() {
                    return Err(Fail(DdcrnnStatus::Checkpoint, "checkpoint has no scaler".into()));
                }
                DdcrnnModel {
                    input_horizon: m.hyper.input_horizon,
                    output_horizon: m.hyper.output_horizon,
                    forecaster: Forecaster::Model(m),
                }
            }
            LINEAR_AR_KIND => {
                let p = LinearARParams::from_checkpoint(&ck)?;
                DdcrnnModel {
                    input_horizon: p.order,
                    output_horizon: 0,
                    forecaster: Forecaster::Baseline(Baseline::LinearAr(p)),
                }
            }
            other => {
                return Err(Fail(
                    DdcrnnStatus::Checkpoint,
                    format!("unsupported checkpoint kind {other:?}"),
                ))
            }
        };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Input window length and native output horizon. An output horizon of 1
/// marks a recursive model and 0 a baseline; both accept any horizon.
///
/// # Safety
/// `model` must be a live handle; `input` and `output` writable pointers.
#[no_mangle]
pub unsafe extern "C" fn ddcrnn_model_horizons(
    model: *const DdcrnnModel,
    input: *mut size_t,
    output: *mut size_t,
) -> DdcrnnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if input.is_null() || output.is_null() {
            return Err(null("input/output"));
        }
        *input = m.input_horizon;
        *output = m.output_horizon;
        Ok(())
    })
}

/// Forecasts `horizon` steps from a row-major `rows × nodes` window in
/// original units. `out` receives `horizon × nodes` values row-major.
///
/// # Safety
/// `model` must be a live handle, `inputs` valid for `rows * nodes` reads
/// and `out` valid for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn ddcrnn_model_forecast(
    model: *const DdcrnnModel,
    inputs: *const f64,
    rows: size_t,
    nodes: size_t,
    horizon: size_t,
    out: *mut f64,
    out_len: size_t,
) -> DdcrnnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if horizon == 0 {
            return Err(invalid("horizon must be positive"));
        }
        let need = checked_len(horizon, nodes)?;
        if out_len != need {
            return Err(invalid(format!("output buffer holds {out_len} values, need {need}")));
        }
        let x = Matrix::from_vec(rows, nodes, slice_arg(inputs, checked_len(rows, nodes)?, "inputs")?.to_vec())?;
        let pred = m.forecaster.forecast(&x, horizon)?;
        out_slice(out, out_len, "out")?.copy_from_slice(pred.data());
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`ddcrnn_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ddcrnn_model_free(model: *mut DdcrnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Pearson correlation of the columns of a row-major `rows × cols` window,
/// written to `out` as `cols × cols`.
///
/// # Safety
/// `window` valid for `rows * cols` reads, `out` for `cols * cols` writes.
#[no_mangle]
pub unsafe extern "C" fn ddcrnn_pearson_adjacency(
    window: *const f64,
    rows: size_t,
    cols: size_t,
    out: *mut f64,
) -> DdcrnnStatus {
    guard(|| {
        let w = Matrix::from_vec(rows, cols, slice_arg(window, checked_len(rows, cols)?, "window")?.to_vec())?;
        let adj = pearson_adjacency(&w, None)?;
        out_slice(out, checked_len(cols, cols)?, "out")?.copy_from_slice(adj.weights.data());
        Ok(())
    })
}

fn write_lags(values: Option<Vec<f64>>, out: &mut [f64]) -> Result<(), Fail> {
    match values {
        Some(v) => {
            out.copy_from_slice(&v);
            Ok(())
        }
        None => Err(Fail(DdcrnnStatus::Undefined, "series is constant".into())),
    }
}

/// Autocorrelation at lags `1..=lags`, written to `out[0..lags]`.
///
/// # Safety
/// `series` valid for `n` reads, `out` for `lags` writes.
#[no_mangle]
pub unsafe extern "C" fn ddcrnn_acf(series: *const f64, n: size_t, lags: size_t, out: *mut f64) -> DdcrnnStatus {
    guard(|| {
        let r = evaluation::acf(slice_arg(series, n, "series")?, lags)?;
        write_lags(r, out_slice(out, lags, "out")?)
    })
}

/// Partial autocorrelation at lags `1..=lags`, written to `out[0..lags]`.
///
/// # Safety
/// `series` valid for `n` reads, `out` for `lags` writes.
#[no_mangle]
pub unsafe extern "C" fn ddcrnn_pacf(series: *const f64, n: size_t, lags: size_t, out: *mut f64) -> DdcrnnStatus {
    guard(|| {
        let r = evaluation::pacf(slice_arg(series, n, "series")?, lags)?;
        write_lags(r, out_slice(out, lags, "out")?)
    })
}

/// Mean absolute percentage error over entries with `|obs| >= floor`.
/// `excluded` (may be null) receives the number of skipped entries.
///
/// # Safety
/// `obs` and `pred` valid for `n` reads; `value` writable.
#[no_mangle]
pub unsafe extern "C" fn ddcrnn_mape(
    obs: *const f64,
    pred: *const f64,
    n: size_t,
    floor: f64,
    value: *mut f64,
    excluded: *mut size_t,
) -> DdcrnnStatus {
    guard(|| {
        if value.is_null() {
            return Err(null("value"));
        }
        let m = evaluation::mape(slice_arg(obs, n, "obs")?, slice_arg(pred, n, "pred")?, floor)?;
        if !excluded.is_null() {
            *excluded = m.excluded;
        }
        *value = m
            .value
            .ok_or_else(|| Fail(DdcrnnStatus::Undefined, "every observation is below the floor".into()))?;
        Ok(())
    })
}

/// Coefficient of determination of `pred` against `obs`.
///
/// # Safety
/// `obs` and `pred` valid for `n` reads; `value` writable.
#[no_mangle]
pub unsafe extern "C" fn ddcrnn_r_squared(
    obs: *const f64,
    pred: *const f64,
    n: size_t,
    value: *mut f64,
) -> DdcrnnStatus {
    guard(|| {
        if value.is_null() {
            return Err(null("value"));
        }
        let r = evaluation::r_squared(slice_arg(obs, n, "obs")?, slice_arg(pred, n, "pred")?)?;
        *value = r.ok_or_else(|| Fail(DdcrnnStatus::Undefined, "observations are constant".into()))?;
        Ok(())
    })
}
