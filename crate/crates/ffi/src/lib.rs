//! C interface to the deepkrig library.
//!
//! Every fallible call returns a [`DkStatus`]; on failure a message for
//! the calling thread is available from [`dk_last_error`]. Objects are
//! opaque handles created by `*_new`, `*_fit` or `*_load` and released by
//! the matching `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use deepkrig::cokriging::CokrigingModel;
use deepkrig::config::RunConfig;
use deepkrig::covariance::CovarianceModel;
use deepkrig::deepkriging::DeepKrigingModel;
use deepkrig::spatial::{BivariateObservations, Site, SiteSet};
use deepkrig::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numeric = 4,
    Io = 5,
    Format = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DkStatus {
    match e {
        _ if e.is_numeric() => DkStatus::Numeric,
        Error::Argument(_) => DkStatus::InvalidArgument,
        Error::Config(_) | Error::Schema(_) => DkStatus::Config,
        Error::Io(_) => DkStatus::Io,
        _ => DkStatus::Format,
    }
}

struct Fail(DkStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DkStatus::NullPointer, format!("{what} is null"))
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> DkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DkStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            DkStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DkStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_ptr<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn sites_from(x: *const f64, y: *const f64, n: usize) -> Result<SiteSet, Fail> {
    let (xs, ys) = (slice(x, n, "x")?, slice(y, n, "y")?);
    let sites = xs.iter().zip(ys).map(|(&a, &b)| Site::new(a, b)).collect::<Result<Vec<_>, _>>()?;
    Ok(SiteSet::new(sites)?)
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Wendland taper at scaled distance `d`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `double`.
#[no_mangle]
pub unsafe extern "C" fn dk_wendland(d: f64, out: *mut f64) -> DkStatus {
    guard(|| {
        let v = deepkrig::basis::wendland(d)?;
        *slice_mut(out, 1, "out")?.first_mut().unwrap() = v;
        Ok(())
    })
}

/// Matérn correlation at lag `h` with smoothness `nu` and range `alpha`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `double`.
#[no_mangle]
pub unsafe extern "C" fn dk_matern_corr(h: f64, nu: f64, alpha: f64, out: *mut f64) -> DkStatus {
    guard(|| {
        let v = deepkrig::covariance::matern_corr(h, nu, alpha)?;
        slice_mut(out, 1, "out")?[0] = v;
        Ok(())
    })
}

/// Tukey g-and-h transform of `z`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `double`.
#[no_mangle]
pub unsafe extern "C" fn dk_tukey_gh(z: f64, g: f64, h: f64, out: *mut f64) -> DkStatus {
    guard(|| {
        let v = deepkrig::simulate::tukey_gh(z, g, h)?;
        slice_mut(out, 1, "out")?[0] = v;
        Ok(())
    })
}

/// Bivariate observations at `n` sites.
pub struct DkObservations(BivariateObservations);

/// Copies `n` rows of coordinates and values.
///
/// # Safety
/// Each array must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dk_observations_new(
    x: *const f64,
    y: *const f64,
    z1: *const f64,
    z2: *const f64,
    n: usize,
    out: *mut *mut DkObservations,
) -> DkStatus {
    guard(|| {
        let sites = sites_from(x, y, n)?;
        let obs = BivariateObservations::new(sites, slice(z1, n, "z1")?.to_vec(), slice(z2, n, "z2")?.to_vec())?;
        out_ptr(out, DkObservations(obs))
    })
}

/// Reads an `x,y,z1,z2` CSV file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dk_observations_read(path: *const c_char, out: *mut *mut DkObservations) -> DkStatus {
    guard(|| {
        let obs = deepkrig::spatial::read_observations_file(&PathBuf::from(text(path, "path")?))?;
        out_ptr(out, DkObservations(obs))
    })
}

/// Number of sites, or 0 for a null handle.
///
/// # Safety
/// `obs` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dk_observations_len(obs: *const DkObservations) -> usize {
    obs.as_ref().map_or(0, |o| o.0.len())
}

/// # Safety
/// `obs` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dk_observations_free(obs: *mut DkObservations) {
    if !obs.is_null() {
        drop(Box::from_raw(obs));
    }
}

/// A trained network model.
pub struct DkModel(DeepKrigingModel);

/// Trains on `obs` with a TOML run configuration (the `[basis]` and
/// `[deepkriging]` sections and `seed` are used). Null selects defaults.
///
/// # Safety
/// `obs` must be a live handle, `config_toml` null or NUL-terminated, and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dk_model_fit(
    obs: *const DkObservations,
    config_toml: *const c_char,
    out: *mut *mut DkModel,
) -> DkStatus {
    guard(|| {
        let obs = obs.as_ref().ok_or_else(|| null("observations"))?;
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_toml(text(config_toml, "config")?)?
        };
        let (model, _) = deepkrig::deepkriging::fit(&obs.0, None, &cfg.fit_config()?)?;
        out_ptr(out, DkModel(model))
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dk_model_load(path: *const c_char, out: *mut *mut DkModel) -> DkStatus {
    guard(|| {
        let m = DeepKrigingModel::load(&PathBuf::from(text(path, "path")?))?;
        out_ptr(out, DkModel(m))
    })
}

/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dk_model_save(model: *const DkModel, path: *const c_char) -> DkStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        m.0.save(&PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

/// Predicts both variables at `n` sites into `z1_out` and `z2_out`.
///
/// # Safety
/// Input arrays hold `n` doubles; output arrays have room for `n`.
#[no_mangle]
pub unsafe extern "C" fn dk_model_predict(
    model: *const DkModel,
    x: *const f64,
    y: *const f64,
    n: usize,
    z1_out: *mut f64,
    z2_out: *mut f64,
) -> DkStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let sites = sites_from(x, y, n)?;
        let (o1, o2) = (slice_mut(z1_out, n, "z1_out")?, slice_mut(z2_out, n, "z2_out")?);
        if n == 0 {
            return Ok(());
        }
        let p = m.0.predict(&sites, None)?;
        o1.copy_from_slice(&p.z1);
        o2.copy_from_slice(&p.z2);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dk_model_free(model: *mut DkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// A cokriging predictor conditioned on training data.
pub struct DkCokriging(CokrigingModel);

/// Conditions on `obs` under a covariance model given as JSON, e.g.
/// `{"family":"matern","sigma2_1":1,...,"nugget":[0,0]}`.
///
/// # Safety
/// `obs` must be a live handle, `covariance_json` NUL-terminated, `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dk_cokriging_fit(
    obs: *const DkObservations,
    covariance_json: *const c_char,
    out: *mut *mut DkCokriging,
) -> DkStatus {
    guard(|| {
        let obs = obs.as_ref().ok_or_else(|| null("observations"))?;
        let cov: CovarianceModel = serde_json::from_str(text(covariance_json, "covariance")?)
            .map_err(|e| Fail(DkStatus::Format, format!("covariance: {e}")))?;
        out_ptr(out, DkCokriging(CokrigingModel::fit(&cov, &obs.0, None)?))
    })
}

/// Predictive means and variances of both variables at `n` sites. The
/// variance pointers may be null.
///
/// # Safety
/// Input arrays hold `n` doubles; non-null outputs have room for `n`.
#[no_mangle]
pub unsafe extern "C" fn dk_cokriging_predict(
    model: *const DkCokriging,
    x: *const f64,
    y: *const f64,
    n: usize,
    mean1: *mut f64,
    mean2: *mut f64,
    var1: *mut f64,
    var2: *mut f64,
) -> DkStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let sites = sites_from(x, y, n)?;
        let (m1, m2) = (slice_mut(mean1, n, "mean1")?, slice_mut(mean2, n, "mean2")?);
        if n == 0 {
            return Ok(());
        }
        let p = m.0.predict(&sites, None)?;
        for i in 0..n {
            m1[i] = p.mean[i][0];
            m2[i] = p.mean[i][1];
        }
        for (u, v) in [(0, var1), (1, var2)] {
            if !v.is_null() {
                let dst = slice_mut(v, n, "var")?;
                for i in 0..n {
                    dst[i] = p.cov[i][u][u];
                }
            }
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dk_cokriging_free(model: *mut DkCokriging) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
