//! C interface to `zpg-core`.
//!
//! Every function returns a [`ZpgStatus`]; on failure the message is kept
//! per thread and read with [`zpg_last_error_message`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use zpg_core::cli::ExperimentConfig;
use zpg_core::decomposition::{
    g2, mean_photon_number, parity, photon_number_distribution, threshold_statistics, PhotonNumberDistribution,
};
use zpg_core::dynamics::{square_pulse, PropagationSettings};
use zpg_core::zpg::{EmitterNetwork, SourceSpec};
use zpg_core::ZpgError;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZpgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NumericalFailure = 3,
    GuardRefused = 4,
    Panic = 5,
}

/// Propagation settings; pass NULL for defaults.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ZpgSettings {
    pub t0: f64,
    /// NaN picks the end of the last pulse plus 15 lifetimes of the slowest emitter.
    pub t1: f64,
    pub rtol: f64,
    pub atol: f64,
    /// 0 uses the global thread pool.
    pub workers: usize,
}

/// An emitter network with its circuit.
pub struct ZpgNetwork(EmitterNetwork);

/// A photon-number distribution.
pub struct ZpgDistribution(PhotonNumberDistribution);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &ZpgError) -> ZpgStatus {
    match e {
        ZpgError::Shape(_) | ZpgError::InvalidArgument(_) => ZpgStatus::InvalidArgument,
        ZpgError::GuardRefused { .. } => ZpgStatus::GuardRefused,
        _ => ZpgStatus::NumericalFailure,
    }
}

struct Failure(ZpgStatus, String);

impl From<ZpgError> for Failure {
    fn from(e: ZpgError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(ZpgStatus::NullPointer, format!("{what} is null"))
}

fn guarded(f: impl FnOnce() -> Result<(), Failure>) -> ZpgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ZpgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            ZpgStatus::Panic
        }
    }
}

unsafe fn network<'a>(net: *const ZpgNetwork) -> Result<&'a EmitterNetwork, Failure> {
    net.as_ref().map(|n| &n.0).ok_or_else(|| null("network"))
}

unsafe fn settings_for(network: &EmitterNetwork, settings: *const ZpgSettings) -> Result<PropagationSettings, Failure> {
    let mut s = PropagationSettings::for_network(network);
    if let Some(c) = settings.as_ref() {
        let t1 = if c.t1.is_nan() { s.t1 } else { c.t1 };
        s = s.with_horizon(c.t0, t1).with_tolerances(c.rtol, c.atol);
        s.workers = (c.workers > 0).then_some(c.workers);
    }
    s.validate()?;
    Ok(s)
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

unsafe fn write_handle<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(Box::into_raw(Box::new(value)));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn zpg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Default settings (horizon chosen per network).
#[no_mangle]
pub extern "C" fn zpg_settings_default() -> ZpgSettings {
    let d = PropagationSettings::default();
    ZpgSettings { t0: 0.0, t1: f64::NAN, rtol: d.rtol, atol: d.atol, workers: 0 }
}

/// Single two-level emitter under a square pulse of area `theta` and length `tau`
/// (no pulse when `tau <= 0`), starting in the ground state.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn zpg_network_new_two_level(
    gamma: f64,
    theta: f64,
    tau: f64,
    detuning: f64,
    out: *mut *mut ZpgNetwork,
) -> ZpgStatus {
    guarded(|| {
        let mut b = SourceSpec::two_level(gamma).with_detuning(detuning);
        if tau > 0.0 {
            b = b.with_pulse(&square_pulse(theta, tau, 0.0)?);
        }
        let net = EmitterNetwork::single(b.build()?)?;
        write_handle(out, ZpgNetwork(net))
    })
}

/// Network from the `sources` and `circuit` tables of a TOML experiment config.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zpg_network_from_toml(config_toml: *const c_char, out: *mut *mut ZpgNetwork) -> ZpgStatus {
    guarded(|| {
        if config_toml.is_null() {
            return Err(null("config"));
        }
        let text = CStr::from_ptr(config_toml)
            .to_str()
            .map_err(|e| Failure(ZpgStatus::InvalidArgument, format!("config is not UTF-8: {e}")))?;
        let net = ExperimentConfig::from_toml(text)
            .and_then(|c| c.build_network())
            .map_err(|e| Failure(ZpgStatus::InvalidArgument, e.to_string()))?;
        write_handle(out, ZpgNetwork(net))
    })
}

/// # Safety
/// `net` must be NULL or a handle from a `zpg_network_*` constructor, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn zpg_network_free(net: *mut ZpgNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// # Safety
/// `net` must be a live network handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zpg_network_num_modes(net: *const ZpgNetwork, out: *mut usize) -> ZpgStatus {
    guarded(|| write_out(out, network(net)?.num_modes()))
}

/// Photon-number distribution on a Fourier grid with `len` truncations.
///
/// # Safety
/// `truncations` must point to `len` values; `settings` may be NULL; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zpg_pn_distribution(
    net: *const ZpgNetwork,
    truncations: *const usize,
    len: usize,
    settings: *const ZpgSettings,
    out: *mut *mut ZpgDistribution,
) -> ZpgStatus {
    guarded(|| {
        let net = network(net)?;
        if truncations.is_null() {
            return Err(null("truncations"));
        }
        let t = std::slice::from_raw_parts(truncations, len);
        let dist = photon_number_distribution(net, t, &settings_for(net, settings)?)?;
        write_handle(out, ZpgDistribution(dist))
    })
}

/// # Safety
/// `dist` must be NULL or a handle from [`zpg_pn_distribution`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn zpg_distribution_free(dist: *mut ZpgDistribution) {
    if !dist.is_null() {
        drop(Box::from_raw(dist));
    }
}

/// Number of stored probabilities (product of the truncations).
///
/// # Safety
/// `dist` must be a live distribution handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zpg_distribution_len(dist: *const ZpgDistribution, out: *mut usize) -> ZpgStatus {
    guarded(|| {
        let d = dist.as_ref().ok_or_else(|| null("distribution"))?;
        write_out(out, d.0.probs().len())
    })
}

/// Copies the probabilities, row-major with the last detector fastest.
///
/// # Safety
/// `out` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn zpg_distribution_probabilities(
    dist: *const ZpgDistribution,
    out: *mut f64,
    len: usize,
) -> ZpgStatus {
    guarded(|| {
        let d = dist.as_ref().ok_or_else(|| null("distribution"))?;
        if out.is_null() {
            return Err(null("output buffer"));
        }
        let probs = d.0.probs();
        if len < probs.len() {
            return Err(Failure(
                ZpgStatus::InvalidArgument,
                format!("buffer holds {len} values, distribution has {}", probs.len()),
            ));
        }
        ptr::copy_nonoverlapping(probs.as_ptr(), out, probs.len());
        Ok(())
    })
}

/// Inversion residue and tail mass of a distribution.
///
/// # Safety
/// `dist` must be live; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn zpg_distribution_diagnostics(
    dist: *const ZpgDistribution,
    residue: *mut f64,
    tail_mass: *mut f64,
) -> ZpgStatus {
    guarded(|| {
        let d = dist.as_ref().ok_or_else(|| null("distribution"))?;
        write_out(residue, d.0.residue())?;
        write_out(tail_mass, d.0.tail_mass())
    })
}

/// Click probabilities `β(m)` for the `2^M` patterns, first detector as the most significant bit.
///
/// # Safety
/// `out` must have room for `len` doubles; `settings` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn zpg_threshold_probabilities(
    net: *const ZpgNetwork,
    settings: *const ZpgSettings,
    out: *mut f64,
    len: usize,
) -> ZpgStatus {
    guarded(|| {
        let net = network(net)?;
        if out.is_null() {
            return Err(null("output buffer"));
        }
        let th = threshold_statistics(net, &settings_for(net, settings)?)?;
        let probs = th.probs();
        if len < probs.len() {
            return Err(Failure(
                ZpgStatus::InvalidArgument,
                format!("buffer holds {len} values, need {}", probs.len()),
            ));
        }
        ptr::copy_nonoverlapping(probs.as_ptr(), out, probs.len());
        Ok(())
    })
}

/// Mean photon number at detector efficiency `eta`, by finite differences.
///
/// # Safety
/// `out` must be writable; `settings` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn zpg_mean_photon_number(
    net: *const ZpgNetwork,
    eta: f64,
    settings: *const ZpgSettings,
    out: *mut f64,
) -> ZpgStatus {
    guarded(|| {
        let net = network(net)?;
        let mu = mean_photon_number(net, eta, 1e-3, &settings_for(net, settings)?)?;
        write_out(out, mu.value)
    })
}

/// Second-order correlation `g2` by finite differences.
///
/// # Safety
/// `out` must be writable; `settings` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn zpg_g2(net: *const ZpgNetwork, settings: *const ZpgSettings, out: *mut f64) -> ZpgStatus {
    guarded(|| {
        let net = network(net)?;
        write_out(out, g2(net, 1e-2, &settings_for(net, settings)?)?.value)
    })
}

/// Photon-number parity `Σ (−1)^n p(n)`.
///
/// # Safety
/// `out` must be writable; `settings` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn zpg_parity(net: *const ZpgNetwork, settings: *const ZpgSettings, out: *mut f64) -> ZpgStatus {
    guarded(|| {
        let net = network(net)?;
        write_out(out, parity(net, &settings_for(net, settings)?)?)
    })
}
