//! C ABI over the core library.
//!
//! Conventions: models are opaque handles created by `cktgen_model_load`
//! and released with `cktgen_model_free`; structured data crosses the
//! boundary as JSON strings that the caller must release with
//! `cktgen_string_free`; every fallible call returns a status code and
//! leaves a message retrievable via `cktgen_last_error` on failure.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cktgen::circuit::Circuit;
use cktgen::dataset::{BinnedSpecification, DatasetProfile};
use cktgen::decoder::Sampler;
use cktgen::evaluator::encode_specs;
use cktgen::model::{load_checkpoint, ModelState};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const CKTGEN_OK: i32 = 0;
/// A required pointer argument was null.
pub const CKTGEN_ERR_NULL: i32 = 1;
/// A string argument was not valid UTF-8.
pub const CKTGEN_ERR_UTF8: i32 = 2;
/// JSON or checkpoint bytes failed to parse.
pub const CKTGEN_ERR_PARSE: i32 = 3;
/// Arguments were well-formed but inconsistent with the data or profile.
pub const CKTGEN_ERR_DATA: i32 = 4;
/// A numeric failure (non-finite values) occurred.
pub const CKTGEN_ERR_NUMERIC: i32 = 5;
/// An internal invariant failed.
pub const CKTGEN_ERR_INTERNAL: i32 = 6;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<Vec<u8>>) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn fail(code: i32, msg: impl Into<Vec<u8>>) -> i32 {
    set_last_error(msg);
    code
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cktgen_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map(|c| c.as_ptr())
            .unwrap_or(ptr::null())
    })
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn cktgen_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Releases a string returned by this library. Null is a no-op.
#[no_mangle]
pub extern "C" fn cktgen_string_free(s: *mut c_char) {
    if !s.is_null() {
        unsafe { drop(CString::from_raw(s)) };
    }
}

/// Opaque trained-model handle.
pub struct CktgenModel {
    state: ModelState,
}

unsafe fn utf8_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (i32, String)> {
    if p.is_null() {
        return Err((CKTGEN_ERR_NULL, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CKTGEN_ERR_UTF8, format!("{what} is not valid UTF-8")))
}

fn out_string(out: *mut *mut c_char, text: String) -> i32 {
    if out.is_null() {
        return fail(CKTGEN_ERR_NULL, "output pointer is null");
    }
    match CString::new(text) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            CKTGEN_OK
        }
        Err(_) => fail(CKTGEN_ERR_INTERNAL, "output contained a NUL byte"),
    }
}

fn guarded(body: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => code,
        Err(_) => fail(CKTGEN_ERR_INTERNAL, "panic inside cktgen"),
    }
}

/// Loads a model checkpoint; returns null on failure (see
/// `cktgen_last_error`).
///
/// # Safety
/// `path` must be a valid NUL-terminated string or null.
#[no_mangle]
pub unsafe extern "C" fn cktgen_model_load(path: *const c_char) -> *mut CktgenModel {
    let mut handle: *mut CktgenModel = ptr::null_mut();
    guarded(|| {
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err((code, msg)) => return fail(code, msg),
        };
        match load_checkpoint(Path::new(path)) {
            Ok((state, _, _)) => {
                handle = Box::into_raw(Box::new(CktgenModel { state }));
                CKTGEN_OK
            }
            Err(e) => fail(CKTGEN_ERR_PARSE, e.to_string()),
        }
    });
    handle
}

/// Releases a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be a pointer from `cktgen_model_load`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cktgen_model_free(model: *mut CktgenModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes `{"profile", "latent_dim", "n_max", "gain_categories",
/// "bw_categories", "pm_categories"}` as JSON.
///
/// # Safety
/// `model` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cktgen_model_info(
    model: *const CktgenModel,
    out_json: *mut *mut c_char,
) -> i32 {
    guarded(|| {
        if model.is_null() {
            return fail(CKTGEN_ERR_NULL, "model is null");
        }
        let state = &(*model).state;
        let info = serde_json::json!({
            "profile": state.profile.name,
            "latent_dim": state.config.d_latent,
            "n_max": state.profile.n_max,
            "gain_categories": state.profile.gain_categories,
            "bw_categories": state.profile.bw_categories,
            "pm_categories": state.profile.pm_categories,
        });
        out_string(out_json, info.to_string())
    })
}

fn generate_from_latent(
    state: &ModelState,
    z: &[f64],
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Circuit {
    let sampler = if temperature > 0.0 {
        Sampler::Categorical { temperature }
    } else {
        Sampler::Greedy
    };
    state.decoder.generate(
        &state.store,
        &state.profile,
        z,
        state.profile.n_max,
        sampler,
        rng,
    )
}

/// Decodes one circuit conditioned on binned specification categories.
/// `temperature <= 0` selects greedy decoding. The result JSON is a circuit
/// record: `{"nodes": [...], "edges": [[j, i], ...]}` with 0-based indices.
///
/// # Safety
/// `model` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cktgen_model_generate(
    model: *const CktgenModel,
    gain_cat: u16,
    bw_cat: u16,
    pm_cat: u16,
    temperature: f64,
    seed: u64,
    out_json: *mut *mut c_char,
) -> i32 {
    guarded(|| {
        if model.is_null() {
            return fail(CKTGEN_ERR_NULL, "model is null");
        }
        let state = &(*model).state;
        let spec = BinnedSpecification::new(gain_cat, bw_cat, pm_cat);
        if !state.profile.spec_in_range(&spec) {
            return fail(
                CKTGEN_ERR_DATA,
                format!("specification {spec:?} outside profile {}", state.profile.name),
            );
        }
        let (mu, lv) = match encode_specs(state, &[spec]) {
            Ok(pair) => pair,
            Err(e) => return fail(CKTGEN_ERR_NUMERIC, e.to_string()),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..state.config.d_latent)
            .map(|k| {
                let eps: f64 = rng.sample(rand_distr::StandardNormal);
                mu[[0, k]] + (0.5 * lv[[0, k]]).exp() * eps
            })
            .collect();
        let circuit = generate_from_latent(state, &z, temperature, &mut rng);
        match serde_json::to_string(&circuit) {
            Ok(text) => out_string(out_json, text),
            Err(e) => fail(CKTGEN_ERR_INTERNAL, e.to_string()),
        }
    })
}

/// Decodes one circuit from a standard-normal latent draw.
///
/// # Safety
/// `model` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cktgen_model_generate_unconditional(
    model: *const CktgenModel,
    temperature: f64,
    seed: u64,
    out_json: *mut *mut c_char,
) -> i32 {
    guarded(|| {
        if model.is_null() {
            return fail(CKTGEN_ERR_NULL, "model is null");
        }
        let state = &(*model).state;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..state.config.d_latent)
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        let circuit = generate_from_latent(state, &z, temperature, &mut rng);
        match serde_json::to_string(&circuit) {
            Ok(text) => out_string(out_json, text),
            Err(e) => fail(CKTGEN_ERR_INTERNAL, e.to_string()),
        }
    })
}

fn parse_circuit_and_profile(
    circuit_json: &str,
    profile: &str,
) -> Result<(Circuit, DatasetProfile), (i32, String)> {
    let circuit: Circuit = serde_json::from_str(circuit_json)
        .map_err(|e| (CKTGEN_ERR_PARSE, format!("bad circuit JSON: {e}")))?;
    let profile = DatasetProfile::resolve(profile)
        .map_err(|e| (CKTGEN_ERR_DATA, e.to_string()))?;
    Ok((circuit, profile))
}

/// Validates a circuit record against a profile's conventions and writes
/// the per-rule report as JSON.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings; `out_json` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn cktgen_circuit_validate(
    circuit_json: *const c_char,
    profile: *const c_char,
    out_json: *mut *mut c_char,
) -> i32 {
    guarded(|| {
        let circuit_json = match utf8_arg(circuit_json, "circuit_json") {
            Ok(s) => s,
            Err((code, msg)) => return fail(code, msg),
        };
        let profile = match utf8_arg(profile, "profile") {
            Ok(s) => s,
            Err((code, msg)) => return fail(code, msg),
        };
        match parse_circuit_and_profile(circuit_json, profile) {
            Ok((circuit, profile)) => {
                let report = circuit.validate(&profile.convention);
                match serde_json::to_string(&report) {
                    Ok(text) => out_string(out_json, text),
                    Err(e) => fail(CKTGEN_ERR_INTERNAL, e.to_string()),
                }
            }
            Err((code, msg)) => fail(code, msg),
        }
    })
}

/// Writes the canonical topology digest of a circuit as a hex string.
/// Circuits that differ only in device parameters share a digest.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings; `out_hex` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cktgen_circuit_hash(
    circuit_json: *const c_char,
    profile: *const c_char,
    out_hex: *mut *mut c_char,
) -> i32 {
    guarded(|| {
        let circuit_json = match utf8_arg(circuit_json, "circuit_json") {
            Ok(s) => s,
            Err((code, msg)) => return fail(code, msg),
        };
        let profile = match utf8_arg(profile, "profile") {
            Ok(s) => s,
            Err((code, msg)) => return fail(code, msg),
        };
        match parse_circuit_and_profile(circuit_json, profile) {
            Ok((circuit, profile)) => {
                let digest = circuit.canonical_hash(&profile.convention);
                out_string(out_hex, digest.to_string())
            }
            Err((code, msg)) => fail(code, msg),
        }
    })
}
