//! C ABI over the certattack core.
//!
//! Models are opaque `CaModel` handles owned by the caller and released with
//! `ca_model_free`. Every fallible call returns a `CaStatus`; on failure the
//! message is kept per thread and read with `ca_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use certattack::attacks::{caa_attack, CaaConfig, Certifier, IbpCertifier};
use certattack::autodiff::Tensor;
use certattack::ibp::ibp_radius;
use certattack::model::{Classifier, Head};
use certattack::rng::derive_seed;
use certattack::smoothing::{Smoothed, SmoothingConfig};
use certattack::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    DomainViolation = 4,
    NonFinite = 5,
    Io = 6,
    Format = 7,
    BufferTooSmall = 8,
    Panic = 9,
    Internal = 10,
}

/// Opaque model handle.
pub struct CaModel {
    inner: Classifier,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct CaVerdict {
    pub class_index: u32,
    pub radius: f64,
}

/// Noise level, sample count, confidence and seed of a smoothed classifier.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CaSmoothingParams {
    pub sigma: f64,
    pub n_samples: u32,
    pub alpha: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CaCaaParams {
    pub eps_min: f64,
    pub eps_max: f64,
    pub delta_grow: f64,
    pub delta_shrink: f64,
    pub max_iters: u32,
    pub max_confirm: u32,
    /// Judge sample count as a multiple of the attacker's.
    pub judge_factor: u32,
    pub seed: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct CaAttackOutcome {
    pub success: bool,
    pub confident: bool,
    pub original_class: u32,
    /// Meaningless unless `success`.
    pub adv_class: u32,
    pub clean_radius: f64,
    pub adv_radius: f64,
    pub norm: f64,
    pub iterations: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CaStatus {
    match e {
        Error::InvalidArgument(_) => CaStatus::InvalidArgument,
        Error::ShapeMismatch { .. } => CaStatus::ShapeMismatch,
        Error::DomainViolation { .. } => CaStatus::DomainViolation,
        Error::NonFinite(_) | Error::Diverged { .. } => CaStatus::NonFinite,
        Error::Io { .. } => CaStatus::Io,
        Error::Format { .. } | Error::Serde(_) => CaStatus::Format,
        _ => CaStatus::Internal,
    }
}

struct Fail(CaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CaStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside certattack".into());
            CaStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(CaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(m: *const CaModel) -> Result<&'a Classifier, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn input<'a>(model: &Classifier, x: *const f64, len: usize) -> Result<&'a [f64], Fail> {
    if x.is_null() {
        return Err(null("input"));
    }
    if len != model.input_dim() {
        return Err(Fail(
            CaStatus::ShapeMismatch,
            format!("input has {len} values, the model expects {}", model.input_dim()),
        ));
    }
    Ok(std::slice::from_raw_parts(x, len))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn smoothing(p: &CaSmoothingParams) -> Result<SmoothingConfig, Fail> {
    Ok(SmoothingConfig::new(p.sigma, p.n_samples as usize, p.alpha, p.seed)?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ca_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length, 0 when there is none.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ca_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Loads a JSON checkpoint from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ca_model_load(path: *const c_char, out: *mut *mut CaModel) -> CaStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m = Classifier::load(c_str(path, "path")?)?;
        *out = Box::into_raw(Box::new(CaModel { inner: m }));
        Ok(())
    })
}

/// Parses a JSON checkpoint held in memory.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ca_model_from_json(json: *const c_char, out: *mut *mut CaModel) -> CaStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m = Classifier::from_checkpoint_json(c_str(json, "json")?)?;
        *out = Box::into_raw(Box::new(CaModel { inner: m }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ca_model_free(model: *mut CaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ca_model_input_dim(model: *const CaModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_dim())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ca_model_num_classes(model: *const CaModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_classes())
}

/// Base classifier prediction at `x` (`len` values in `[0,1]`).
///
/// # Safety
/// Pointers must be valid; `x` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ca_predict(model: *const CaModel, x: *const f64, len: usize, out_class: *mut u32) -> CaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = input(m, x, len)?;
        let out = out_class.as_mut().ok_or_else(|| null("out_class"))?;
        let t = Tensor::new(m.input_shape().to_vec(), x.to_vec())?;
        *out = m.predict(&t)? as u32;
        Ok(())
    })
}

/// Smoothed prediction and certified ℓ2 radius at `x`. Radius 0 means the
/// smoothed classifier abstains.
///
/// # Safety
/// Pointers must be valid; `x` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ca_certify(
    model: *const CaModel,
    x: *const f64,
    len: usize,
    params: *const CaSmoothingParams,
    out: *mut CaVerdict,
) -> CaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = input(m, x, len)?;
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let s = Smoothed::new(m, smoothing(p)?, Head::default())?;
        let v = s.certify(x, &[])?;
        *out = CaVerdict {
            class_index: v.top_class as u32,
            radius: v.radius,
        };
        Ok(())
    })
}

/// Largest ℓ∞ radius verified by interval bound propagation, to within `tol`.
///
/// # Safety
/// Pointers must be valid; `x` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ca_ibp_radius(
    model: *const CaModel,
    x: *const f64,
    len: usize,
    tol: f64,
    out_radius: *mut f64,
) -> CaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = input(m, x, len)?;
        let out = out_radius.as_mut().ok_or_else(|| null("out_radius"))?;
        *out = ibp_radius(m, x, tol)?;
        Ok(())
    })
}

/// Runs the certification-aware attack against the smoothed model. On
/// success the adversarial point is written to `x_adv` when it is non-null
/// (`x_adv_len` must then equal the input dimension).
///
/// # Safety
/// Pointers must be valid; `x` must hold `len` values and `x_adv`, when
/// non-null, `x_adv_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ca_caa_attack(
    model: *const CaModel,
    x: *const f64,
    len: usize,
    smoothing_params: *const CaSmoothingParams,
    attack_params: *const CaCaaParams,
    out: *mut CaAttackOutcome,
    x_adv: *mut f64,
    x_adv_len: usize,
) -> CaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = input(m, x, len)?;
        let sp = smoothing_params.as_ref().ok_or_else(|| null("smoothing_params"))?;
        let ap = attack_params.as_ref().ok_or_else(|| null("attack_params"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if !x_adv.is_null() && x_adv_len != len {
            return Err(Fail(
                CaStatus::BufferTooSmall,
                format!("x_adv holds {x_adv_len} values, need {len}"),
            ));
        }
        if ap.judge_factor == 0 {
            return Err(Fail(CaStatus::InvalidArgument, "judge_factor must be at least 1".into()));
        }
        let att_cfg = smoothing(sp)?;
        let judge_cfg = att_cfg.with_samples(att_cfg.n_samples * ap.judge_factor as usize);
        let judge_cfg = SmoothingConfig {
            seed: derive_seed(att_cfg.seed, &[0x6a75646765]),
            ..judge_cfg
        };
        let attacker = Smoothed::new(m, att_cfg, Head::default())?;
        let judge = Smoothed::new(m, judge_cfg, Head::default())?;
        let cfg = CaaConfig {
            eps_min: ap.eps_min,
            eps_max: ap.eps_max,
            delta_grow: ap.delta_grow,
            delta_shrink: ap.delta_shrink,
            max_iters: ap.max_iters as usize,
            max_confirm: ap.max_confirm as usize,
            seed: ap.seed,
        };
        let r = caa_attack(&attacker as &dyn Certifier, &judge as &dyn Certifier, x, &cfg)?;
        *out = CaAttackOutcome {
            success: r.success,
            confident: r.confident,
            original_class: r.original_class as u32,
            adv_class: r.adv_class.unwrap_or(r.original_class) as u32,
            clean_radius: r.clean_radius,
            adv_radius: r.adv_radius,
            norm: r.norm,
            iterations: r.iterations as u32,
        };
        if let (Some(adv), false) = (&r.x_adv, x_adv.is_null()) {
            std::ptr::copy_nonoverlapping(adv.as_ptr(), x_adv, len);
        }
        Ok(())
    })
}

/// IBP-certified class at `x` together with its ℓ∞ radius.
///
/// # Safety
/// Pointers must be valid; `x` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ca_ibp_certify(
    model: *const CaModel,
    x: *const f64,
    len: usize,
    tol: f64,
    out: *mut CaVerdict,
) -> CaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = input(m, x, len)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let v = IbpCertifier::new(m, tol).certify(x, &[])?;
        *out = CaVerdict {
            class_index: v.class as u32,
            radius: v.radius,
        };
        Ok(())
    })
}
