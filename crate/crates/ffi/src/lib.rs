//! C ABI for the vanishlab oracle and engines.
//!
//! Every fallible function returns a `VL_*` status code and writes results
//! through out-pointers. On failure the message is available from
//! [`vl_last_error`] on the same thread. Objects are opaque handles released
//! with their `*_free` function; strings returned by the library are released
//! with [`vl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use vanishlab::chain::ChainParams;
use vanishlab::harness::{self, ExperimentSpec};
use vanishlab::init::{ActivationKind, InitScheme};
use vanishlab::mlp::{self, DataModel, Dataset, HessianMethod, MlpState};
use vanishlab::rng::stream;
use vanishlab::theory::{self, MomentState};
use vanishlab::Error;

pub const VL_OK: i32 = 0;
pub const VL_ERR_DOMAIN: i32 = 1;
pub const VL_ERR_INVALID_ARGUMENT: i32 = 2;
pub const VL_ERR_UNSUPPORTED: i32 = 3;
pub const VL_ERR_SHAPE: i32 = 4;
pub const VL_ERR_STALE_CACHE: i32 = 5;
pub const VL_ERR_SIZE_LIMIT: i32 = 6;
pub const VL_ERR_CONFIG: i32 = 7;
pub const VL_ERR_IO: i32 = 8;
pub const VL_ERR_NULL_POINTER: i32 = 9;
pub const VL_ERR_BUFFER_TOO_SMALL: i32 = 10;
pub const VL_ERR_PANIC: i32 = 11;

pub const VL_ACTIVATION_LINEAR: i32 = 0;
pub const VL_ACTIVATION_RELU: i32 = 1;

/// Initialisation scheme handle.
pub struct VlScheme(InitScheme);

/// Scalar chain handle: weights plus dataset.
pub struct VlChain(ChainParams);

/// MLP handle: network plus the dataset it is evaluated on.
pub struct VlMlp {
    state: MlpState,
    data: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> i32 {
    match e {
        Error::Domain(_) => VL_ERR_DOMAIN,
        Error::InvalidArgument(_) => VL_ERR_INVALID_ARGUMENT,
        Error::Unsupported(_) => VL_ERR_UNSUPPORTED,
        Error::Shape(_) => VL_ERR_SHAPE,
        Error::StaleCache(_) => VL_ERR_STALE_CACHE,
        Error::SizeLimit(_) => VL_ERR_SIZE_LIMIT,
        Error::Config(_) => VL_ERR_CONFIG,
        Error::Io(_) => VL_ERR_IO,
    }
}

/// Failure inside the shim itself.
struct Fail(i32, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type Res<T> = std::result::Result<T, Fail>;

fn guard(f: impl FnOnce() -> Res<()>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            VL_OK
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            VL_ERR_PANIC
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(VL_ERR_NULL_POINTER, format!("{what} is null"))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Res<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T) -> Res<&'a T> {
    p.as_ref().ok_or_else(|| null("handle"))
}

unsafe fn text<'a>(p: *const c_char) -> Res<&'a str> {
    if p.is_null() {
        return Err(null("string"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(VL_ERR_INVALID_ARGUMENT, "string is not UTF-8".into()))
}

unsafe fn slice<'a>(p: *const f64, len: usize) -> Res<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null("array"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copy `values` to `buf`, which must hold at least `values.len()` doubles.
unsafe fn fill(values: &[f64], buf: *mut f64, len: usize) -> Res<()> {
    if len < values.len() {
        return Err(Fail(VL_ERR_BUFFER_TOO_SMALL, format!("buffer holds {len} values, {} needed", values.len())));
    }
    if buf.is_null() {
        return Err(null("buffer"));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
    Ok(())
}

fn activation(code: i32) -> Res<ActivationKind> {
    match code {
        VL_ACTIVATION_LINEAR => Ok(ActivationKind::Linear),
        VL_ACTIVATION_RELU => Ok(ActivationKind::Relu),
        _ => Err(Fail(VL_ERR_INVALID_ARGUMENT, format!("unknown activation code {code}"))),
    }
}

/// Message of the last failure on this thread; empty after a success.
/// Valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn vl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn vl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by the library.
///
/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn vl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Initialisation schemes

/// Parse a scheme such as `uniform:he` or `gaussian:var=0.25`.
///
/// # Safety
/// `spec` must be a NUL-terminated string; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vl_scheme_parse(spec: *const c_char, result: *mut *mut VlScheme) -> i32 {
    guard(|| {
        let r = out(result, "out")?;
        let s: InitScheme = text(spec)?.parse()?;
        *r = Box::into_raw(Box::new(VlScheme(s)));
        Ok(())
    })
}

/// # Safety
/// `s` must come from [`vl_scheme_parse`] or be null.
#[no_mangle]
pub unsafe extern "C" fn vl_scheme_free(s: *mut VlScheme) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Variance, fourth moment and kurtosis of the entry law at `fan_in`.
///
/// # Safety
/// `s` must be a live handle; the out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn vl_scheme_profile(s: *const VlScheme, fan_in: usize, sigma2: *mut f64, mu4: *mut f64, kappa: *mut f64) -> i32 {
    guard(|| {
        let p = handle(s)?.0.profile(fan_in)?;
        *out(sigma2, "sigma2")? = p.sigma2;
        *out(mu4, "mu4")? = p.mu4;
        *out(kappa, "kappa")? = p.kappa;
        Ok(())
    })
}

/// Draw `count` iid entries at `fan_in` from the stream of `seed`.
///
/// # Safety
/// `s` must be a live handle; `buf` must hold `count` doubles.
#[no_mangle]
pub unsafe extern "C" fn vl_scheme_sample(s: *const VlScheme, fan_in: usize, seed: u64, buf: *mut f64, count: usize) -> i32 {
    guard(|| {
        let v = handle(s)?.0.sample_entries(fan_in, count, &mut stream(seed))?;
        fill(&v, buf, count)
    })
}

// ---------------------------------------------------------------------------
// Chains

/// Chain with the given weights and `n` data pairs `(xs[i], ys[i])`.
///
/// # Safety
/// Arrays must hold the stated lengths; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vl_chain_new(weights: *const f64, depth: usize, xs: *const f64, ys: *const f64, n: usize, result: *mut *mut VlChain) -> i32 {
    guard(|| {
        let r = out(result, "out")?;
        let w = slice(weights, depth)?.to_vec();
        let data = slice(xs, n)?.iter().copied().zip(slice(ys, n)?.iter().copied()).collect();
        *r = Box::into_raw(Box::new(VlChain(ChainParams::new(w, data)?)));
        Ok(())
    })
}

/// Chain with weights iid `U(-tau, tau)` from the stream of `seed` and the
/// single data pair `(x, y)`.
///
/// # Safety
/// `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vl_chain_sample(depth: usize, tau: f64, x: f64, y: f64, seed: u64, result: *mut *mut VlChain) -> i32 {
    guard(|| {
        let r = out(result, "out")?;
        let c = ChainParams::sample(depth, tau, vec![(x, y)], &mut stream(seed))?;
        *r = Box::into_raw(Box::new(VlChain(c)));
        Ok(())
    })
}

/// # Safety
/// `c` must come from a chain constructor or be null.
#[no_mangle]
pub unsafe extern "C" fn vl_chain_free(c: *mut VlChain) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// # Safety
/// `c` must be a live handle; `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vl_chain_loss(c: *const VlChain, loss: *mut f64) -> i32 {
    guard(|| {
        *out(loss, "loss")? = handle(c)?.0.loss();
        Ok(())
    })
}

/// Gradient into `buf` (at least `depth` doubles).
///
/// # Safety
/// `c` must be a live handle; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vl_chain_gradient(c: *const VlChain, buf: *mut f64, len: usize) -> i32 {
    guard(|| fill(&handle(c)?.0.gradient(), buf, len))
}

/// Hessian into `buf`, row-major (at least `depth * depth` doubles).
///
/// # Safety
/// `c` must be a live handle; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vl_chain_hessian(c: *const VlChain, buf: *mut f64, len: usize) -> i32 {
    guard(|| {
        let h = handle(c)?.0.hessian();
        fill(h.transpose().as_slice(), buf, len)
    })
}

// ---------------------------------------------------------------------------
// MLPs

/// Random MLP of `depth` hidden `width x width` layers drawn with `scheme`,
/// with `n` Gaussian inputs and teacher targets. Zero `d_in` or `d_out`
/// means the width.
///
/// # Safety
/// `scheme` must be a live handle; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vl_mlp_random(
    depth: usize,
    width: usize,
    activation_code: i32,
    scheme: *const VlScheme,
    n: usize,
    d_in: usize,
    d_out: usize,
    seed: u64,
    result: *mut *mut VlMlp,
) -> i32 {
    guard(|| {
        let r = out(result, "out")?;
        let dim = |v: usize| (v > 0).then_some(v);
        let model = DataModel { n, d_in: dim(d_in), d_out: dim(d_out) };
        let (state, data) = mlp::random_problem(depth, width, activation(activation_code)?, handle(scheme)?.0, model, &mut stream(seed))?;
        *r = Box::into_raw(Box::new(VlMlp { state, data }));
        Ok(())
    })
}

/// # Safety
/// `m` must come from [`vl_mlp_random`] or be null.
#[no_mangle]
pub unsafe extern "C" fn vl_mlp_free(m: *mut VlMlp) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of hidden-layer parameters `L d^2`.
///
/// # Safety
/// `m` must be a live handle; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vl_mlp_num_params(m: *const VlMlp, count: *mut usize) -> i32 {
    guard(|| {
        *out(count, "count")? = handle(m)?.state.num_params();
        Ok(())
    })
}

/// # Safety
/// `m` must be a live handle; `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vl_mlp_loss(m: *const VlMlp, loss: *mut f64) -> i32 {
    guard(|| {
        let h = handle(m)?;
        *out(loss, "loss")? = h.state.loss(&h.data)?;
        Ok(())
    })
}

/// Gradient over the hidden layers, layer by layer, each row-major.
///
/// # Safety
/// `m` must be a live handle; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vl_mlp_gradient(m: *const VlMlp, buf: *mut f64, len: usize) -> i32 {
    guard(|| {
        let h = handle(m)?;
        fill(&h.state.gradient_flat(&h.data)?, buf, len)
    })
}

/// Analytic Hessian over the hidden layers, row-major, in the parameter
/// order of [`vl_mlp_gradient`].
///
/// # Safety
/// `m` must be a live handle; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vl_mlp_hessian(m: *mut VlMlp, buf: *mut f64, len: usize) -> i32 {
    guard(|| {
        let h = m.as_mut().ok_or_else(|| null("handle"))?;
        let hess = h.state.hessian(&h.data, HessianMethod::Analytic)?;
        fill(hess.transpose().as_slice(), buf, len)
    })
}

// ---------------------------------------------------------------------------
// Closed forms

/// `P(Erlang(shape, 1) <= xi)`.
///
/// # Safety
/// `value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vl_erlang_cdf(shape: usize, xi: f64, value: *mut f64) -> i32 {
    guard(|| {
        if shape == 0 {
            return Err(Fail(VL_ERR_DOMAIN, "shape must be at least 1".into()));
        }
        *out(value, "value")? = theory::erlang_cdf(shape, xi);
        Ok(())
    })
}

/// `E[v^order]` for the chain product `v` with weights `U(-tau, tau)`.
///
/// # Safety
/// `value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vl_chain_moment(tau: f64, depth: usize, order: u32, value: *mut f64) -> i32 {
    guard(|| {
        *out(value, "value")? = theory::chain_moment(tau, depth, order)?;
        Ok(())
    })
}

/// Bracket on the median of `|v|`.
///
/// # Safety
/// `lo` and `hi` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vl_chain_median_bounds(tau: f64, depth: usize, lo: *mut f64, hi: *mut f64) -> i32 {
    guard(|| {
        let (a, b) = theory::chain_median_bounds(tau, depth)?;
        *out(lo, "lo")? = a;
        *out(hi, "hi")? = b;
        Ok(())
    })
}

/// Propagate `(E||x||^2, E||x||^4, E||x||_4^4)` through `k` layers.
/// `state` holds three doubles on input and output.
///
/// # Safety
/// `state` must point to three writable doubles.
#[no_mangle]
pub unsafe extern "C" fn vl_forward_moments(state: *mut f64, d: usize, sigma2: f64, kappa: f64, p: f64, k: usize) -> i32 {
    guard(|| {
        let s = slice(state, 3)?;
        let m = theory::forward_moments(MomentState::new(s[0], s[1], s[2])?, d, sigma2, kappa, p, k)?;
        fill(&[m.m2, m.m4_2, m.m4_4], state, 3)
    })
}

/// Smallest width whose median squared gain stays within `1 +- alpha`.
///
/// # Safety
/// `width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vl_min_width_for_median(alpha: f64, depth: usize, width: *mut u64) -> i32 {
    guard(|| {
        *out(width, "width")? = theory::min_width_for_median(alpha, depth)?;
        Ok(())
    })
}

/// Upper bound on the symmetric chain flow at time `t`.
///
/// # Safety
/// `value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vl_gradient_flow_bound(w0: f64, depth: usize, y: f64, t: f64, value: *mut f64) -> i32 {
    guard(|| {
        *out(value, "value")? = theory::gradient_flow_bound(w0, depth, y, t)?;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Experiment specs

/// Run a JSON experiment spec with `threads` workers (0: default) and return
/// its CSV (or JSON for `predict`) in `result`, to be released with
/// [`vl_string_free`]. Nothing is written to disk. For `verify`, `passed`
/// receives 1 if every check passed and 0 otherwise; it may be null.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vl_run_spec(spec_json: *const c_char, threads: usize, result: *mut *mut c_char, passed: *mut i32) -> i32 {
    guard(|| {
        let r = out(result, "out")?;
        let mut spec = ExperimentSpec::from_json(text(spec_json)?)?;
        spec.output = None;
        let run = harness::run(&spec, (threads > 0).then_some(threads))?;
        let body = match &run.prediction {
            Some(doc) => doc.to_string(),
            None => harness::csv_string(&run.rows)?,
        };
        if let Some(p) = passed.as_mut() {
            *p = i32::from(run.passed());
        }
        *r = CString::new(body).map_err(|e| Fail(VL_ERR_IO, e.to_string()))?.into_raw();
        Ok(())
    })
}
