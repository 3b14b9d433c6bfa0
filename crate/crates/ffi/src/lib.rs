//! C interface to the `ctista` library.
//!
//! Scenarios, models and parameter sets are opaque handles created by
//! `*_new`/`*_load` functions and released with the matching `*_free`.
//! Every fallible function returns a [`CtistaStatus`]; on failure the
//! message is available from [`ctista_last_error`] on the same thread.
//! Complex vectors cross the boundary as interleaved `(re, im)` doubles,
//! the layout of C99 `double complex` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ctista::recovery::{zf_detect, CtistaModel as Model, CtistaParams as Params};
use ctista::scenarios::{eval_stream, Scenario, ScenarioConfig};
use ctista::training::{incremental_train, load_params, save_params, ParamsMeta};
use ctista::{Error, C64};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtistaStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    InvalidArgument = 3,
    RankDeficient = 4,
    Divergence = 5,
    Config = 6,
    ParamFile = 7,
    Io = 8,
    Internal = 9,
}

/// A scenario with its sensing matrix drawn and noise calibrated.
pub struct CtistaScenario(Scenario);

/// The frozen problem context of the unrolled recursion.
pub struct CtistaModel(Model);

/// The `3T` trainable scalars.
pub struct CtistaParams(Params);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("nul bytes removed"));
}

fn status_of(err: &Error) -> CtistaStatus {
    match err {
        Error::Dimension(_) => CtistaStatus::Dimension,
        Error::InvalidArgument(_) | Error::NearNonSmooth(_) => CtistaStatus::InvalidArgument,
        Error::RankDeficient(_) => CtistaStatus::RankDeficient,
        Error::Divergence { .. } | Error::TrainingDiverged { .. } => CtistaStatus::Divergence,
        Error::Config(_) => CtistaStatus::Config,
        Error::ParamFile(_) => CtistaStatus::ParamFile,
        Error::Io { .. } => CtistaStatus::Io,
        _ => CtistaStatus::Internal,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (CtistaStatus, String)>) -> CtistaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            CtistaStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            CtistaStatus::Internal
        }
    }
}

fn lib(err: Error) -> (CtistaStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (CtistaStatus, String) {
    (CtistaStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (CtistaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        (
            CtistaStatus::InvalidArgument,
            format!("{what} is not UTF-8"),
        )
    })
}

/// # Safety
/// `p` must be null or point to `2·len` readable doubles.
unsafe fn complex_in<'a>(
    p: *const f64,
    len: usize,
    what: &str,
) -> Result<&'a [C64], (CtistaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    // Complex<f64> is repr(C) {re, im}
    Ok(std::slice::from_raw_parts(p.cast::<C64>(), len))
}

/// # Safety
/// `p` must be null or point to `2·len` writable doubles.
unsafe fn complex_out<'a>(
    p: *mut f64,
    len: usize,
    what: &str,
) -> Result<&'a mut [C64], (CtistaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p.cast::<C64>(), len))
}

/// # Safety
/// `h` must be null or a live handle of type `T`.
unsafe fn handle<'a, T>(h: *const T, what: &str) -> Result<&'a T, (CtistaStatus, String)> {
    h.as_ref().ok_or_else(|| null(what))
}

fn emit<T>(out: *mut *mut T, value: T) -> Result<(), (CtistaStatus, String)> {
    if out.is_null() {
        return Err(null("output handle pointer"));
    }
    // SAFETY: checked non-null; the caller provides a writable slot.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failed call on this thread (empty after success).
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ctista_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a scenario from TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn ctista_scenario_from_toml(
    toml: *const c_char,
    out: *mut *mut CtistaScenario,
) -> CtistaStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        let cfg = ScenarioConfig::from_toml_str(text).map_err(lib)?;
        emit(out, CtistaScenario(Scenario::build(cfg).map_err(lib)?))
    })
}

/// Builds a scenario from a TOML file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn ctista_scenario_load(
    path: *const c_char,
    out: *mut *mut CtistaScenario,
) -> CtistaStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let cfg = ScenarioConfig::load(Path::new(path)).map_err(lib)?;
        emit(out, CtistaScenario(Scenario::build(cfg).map_err(lib)?))
    })
}

/// Releases a scenario; null is ignored.
///
/// # Safety
/// `scenario` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ctista_scenario_free(scenario: *mut CtistaScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Writes `n`, `m`, the layer count `T` and the noise variance.
///
/// # Safety
/// `scenario` must be a live handle; each output pointer must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctista_scenario_dims(
    scenario: *const CtistaScenario,
    n: *mut usize,
    m: *mut usize,
    layers: *mut usize,
    sigma2: *mut f64,
) -> CtistaStatus {
    guard(|| {
        let s = &handle(scenario, "scenario")?.0;
        if n.is_null() || m.is_null() || layers.is_null() || sigma2.is_null() {
            return Err(null("output pointer"));
        }
        *n = s.config().n;
        *m = s.config().m;
        *layers = s.config().layers;
        *sigma2 = s.sigma2();
        Ok(())
    })
}

/// Draws evaluation instance `trial`: writes `x` (`2n` doubles) and
/// `y` (`2m` doubles).
///
/// # Safety
/// `scenario` must be a live handle; `x` and `y` must hold `2n` and `2m`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ctista_scenario_generate(
    scenario: *const CtistaScenario,
    trial: u64,
    x: *mut f64,
    y: *mut f64,
) -> CtistaStatus {
    guard(|| {
        let s = &handle(scenario, "scenario")?.0;
        let (n, m) = (s.config().n, s.config().m);
        let x_out = complex_out(x, n, "x")?;
        let y_out = complex_out(y, m, "y")?;
        let (xv, yv) = s
            .generate_instance(&mut s.rng(eval_stream(trial)))
            .map_err(lib)?;
        x_out.copy_from_slice(&xv);
        y_out.copy_from_slice(&yv);
        Ok(())
    })
}

/// Prepares the recursion (pseudo-inverse, trace) for a scenario.
///
/// # Safety
/// `scenario` must be a live handle and `out` a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn ctista_model_new(
    scenario: *const CtistaScenario,
    out: *mut *mut CtistaModel,
) -> CtistaStatus {
    guard(|| {
        let s = &handle(scenario, "scenario")?.0;
        emit(out, CtistaModel(s.model().map_err(lib)?))
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ctista_model_free(model: *mut CtistaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Initial parameters `β = 1`, `a = sigma2`, `b = 1` for `layers` layers.
///
/// # Safety
/// `out` must be a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn ctista_params_init(
    layers: usize,
    sigma2: f64,
    out: *mut *mut CtistaParams,
) -> CtistaStatus {
    guard(|| {
        if layers == 0 || !sigma2.is_finite() {
            return Err((
                CtistaStatus::InvalidArgument,
                "need layers >= 1 and finite sigma2".into(),
            ));
        }
        emit(out, CtistaParams(Params::init(layers, Some(sigma2))))
    })
}

/// Initial parameters for `model`: `β = 1`, `b = 1` and `a` equal to
/// `sigma2` carried through the zero-forcing map (`sigma2·‖W‖²_F/n`), the
/// starting point used by training.
///
/// # Safety
/// `model` must come from [`ctista_model_new`]; `out` must be a writable
/// pointer slot.
#[no_mangle]
pub unsafe extern "C" fn ctista_model_init_params(
    model: *const CtistaModel,
    sigma2: f64,
    out: *mut *mut CtistaParams,
) -> CtistaStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err((
                CtistaStatus::InvalidArgument,
                "sigma2 must be finite and >= 0".into(),
            ));
        }
        emit(out, CtistaParams(m.init_params(Some(sigma2))))
    })
}

/// Parameters from explicit arrays of length `layers`.
///
/// # Safety
/// `beta`, `a` and `b` must each hold `layers` readable doubles; `out` must
/// be a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn ctista_params_new(
    layers: usize,
    beta: *const f64,
    a: *const f64,
    b: *const f64,
    out: *mut *mut CtistaParams,
) -> CtistaStatus {
    guard(|| {
        if beta.is_null() || a.is_null() || b.is_null() {
            return Err(null("parameter array"));
        }
        let read = |p: *const f64| std::slice::from_raw_parts(p, layers).to_vec();
        let params = Params::new(read(beta), read(a), read(b)).map_err(lib)?;
        emit(out, CtistaParams(params))
    })
}

/// Releases parameters; null is ignored.
///
/// # Safety
/// `params` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ctista_params_free(params: *mut CtistaParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Number of layers `T` of a parameter set (0 for null).
///
/// # Safety
/// `params` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctista_params_layers(params: *const CtistaParams) -> usize {
    params.as_ref().map_or(0, |p| p.0.layers())
}

/// Copies the parameters into arrays of length `layers`, which must equal
/// the parameter count.
///
/// # Safety
/// `params` must be a live handle; `beta`, `a`, `b` must each hold `layers`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ctista_params_get(
    params: *const CtistaParams,
    layers: usize,
    beta: *mut f64,
    a: *mut f64,
    b: *mut f64,
) -> CtistaStatus {
    guard(|| {
        let p = &handle(params, "params")?.0;
        if layers != p.layers() {
            return Err((
                CtistaStatus::Dimension,
                format!("parameters have {} layers, not {layers}", p.layers()),
            ));
        }
        if beta.is_null() || a.is_null() || b.is_null() {
            return Err(null("parameter array"));
        }
        std::slice::from_raw_parts_mut(beta, layers).copy_from_slice(&p.beta);
        std::slice::from_raw_parts_mut(a, layers).copy_from_slice(&p.a);
        std::slice::from_raw_parts_mut(b, layers).copy_from_slice(&p.b);
        Ok(())
    })
}

/// Reads a trained-parameter JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn ctista_params_load(
    path: *const c_char,
    out: *mut *mut CtistaParams,
) -> CtistaStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let (params, _) = load_params(Path::new(path)).map_err(lib)?;
        emit(out, CtistaParams(params))
    })
}

/// Writes parameters as JSON, tagged with the scenario's digest and seed.
///
/// # Safety
/// `params` and `scenario` must be live handles and `path` a NUL-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn ctista_params_save(
    params: *const CtistaParams,
    scenario: *const CtistaScenario,
    path: *const c_char,
) -> CtistaStatus {
    guard(|| {
        let p = &handle(params, "params")?.0;
        let s = &handle(scenario, "scenario")?.0;
        let path = str_arg(path, "path")?;
        let meta = ParamsMeta {
            scenario_digest: s.config().digest(),
            seed: s.config().seed,
        };
        save_params(p, &meta, Path::new(path)).map_err(lib)
    })
}

/// Runs the configured incremental training and returns the parameters.
///
/// # Safety
/// `scenario` and `model` must be live handles built from the same
/// scenario; `out` must be a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn ctista_train(
    scenario: *const CtistaScenario,
    model: *const CtistaModel,
    out: *mut *mut CtistaParams,
) -> CtistaStatus {
    guard(|| {
        let s = &handle(scenario, "scenario")?.0;
        let m = &handle(model, "model")?.0;
        let report = incremental_train(s, m).map_err(lib)?;
        emit(out, CtistaParams(report.params))
    })
}

/// C-TISTA estimate `x` (`2n` doubles) from `y` (`2m` doubles).
///
/// # Safety
/// `model` and `params` must be live handles; `y` must hold `2m` readable
/// doubles and `x` `2n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ctista_forward(
    model: *const CtistaModel,
    params: *const CtistaParams,
    y: *const f64,
    x: *mut f64,
) -> CtistaStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let p = &handle(params, "params")?.0;
        let (rows, cols) = m.dims();
        let y = complex_in(y, rows, "y")?;
        let x = complex_out(x, cols, "x")?;
        let (est, _) = ctista::recovery::ctista_forward(m, p, y).map_err(lib)?;
        x.copy_from_slice(&est);
        Ok(())
    })
}

/// Zero-forcing estimate `x = W y`.
///
/// # Safety
/// As for [`ctista_forward`].
#[no_mangle]
pub unsafe extern "C" fn ctista_zero_forcing(
    model: *const CtistaModel,
    y: *const f64,
    x: *mut f64,
) -> CtistaStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let (rows, cols) = m.dims();
        let y = complex_in(y, rows, "y")?;
        let x = complex_out(x, cols, "x")?;
        x.copy_from_slice(&zf_detect(m.w(), y).map_err(lib)?);
        Ok(())
    })
}
