//! C interface. Every fallible function returns a [`GradStatus`]; on failure
//! `grad_last_error` describes the most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use grad_core::env::{compute_rtg, STATE_DIM};
use grad_core::eval::{cpc_cr, online_reward, penalty};
use grad_core::model::TokenInput;
use grad_core::oracle::{solve_bruteforce, solve_threshold, BiddingInstance, MAX_BRUTEFORCE};
use grad_core::train::Checkpoint;
use grad_core::GradError;

/// Width of one state vector.
pub const GRAD_STATE_DIM: usize = 16;
const _: () = assert!(GRAD_STATE_DIM == STATE_DIM);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Panic = 5,
}

/// A loaded checkpoint. Opaque to C.
pub struct GradModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &GradError) -> GradStatus {
    match err {
        GradError::Io(_) => GradStatus::Io,
        GradError::Checkpoint { .. }
        | GradError::ParameterShape { .. }
        | GradError::MissingParameter(_) => GradStatus::Checkpoint,
        _ => GradStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (GradStatus, String)>) -> GradStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GradStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GradStatus::Panic
        }
    }
}

fn core(err: GradError) -> (GradStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (GradStatus, String) {
    (GradStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (GradStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, (GradStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (GradStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn grad_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads the checkpoint directory `path` into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn grad_model_load(path: *const c_char, out: *mut *mut GradModel) -> GradStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = string(path, "path")?;
        let checkpoint = Checkpoint::load(Path::new(path)).map_err(core)?;
        *out = Box::into_raw(Box::new(GradModel { checkpoint }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from `grad_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn grad_model_free(model: *mut GradModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Context window of the model in steps.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn grad_model_seq_len(model: *const GradModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.checkpoint.manifest.model.seq_len)
}

/// Return-to-go a rollout should start from.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn grad_model_target_return(model: *const GradModel) -> f64 {
    model
        .as_ref()
        .map_or(f64::NAN, |m| m.checkpoint.manifest.target_return)
}

/// Action for the most recent of `len` steps, oldest first. `rtg` and
/// `prev_actions` hold `len` values and `states` holds `len * GRAD_STATE_DIM`,
/// all in raw units.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn grad_model_predict(
    model: *const GradModel,
    rtg: *const f64,
    states: *const f64,
    prev_actions: *const f64,
    len: usize,
    out: *mut f64,
) -> GradStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if len == 0 {
            return Err((GradStatus::InvalidArgument, "empty window".into()));
        }
        let rtg = input(rtg, len, "rtg")?;
        let states = input(states, len * STATE_DIM, "states")?;
        let prev = input(prev_actions, len, "prev_actions")?;
        let window: Vec<TokenInput> = (0..len)
            .map(|i| TokenInput {
                rtg: rtg[i],
                state: states[i * STATE_DIM..(i + 1) * STATE_DIM]
                    .try_into()
                    .expect("slice of STATE_DIM"),
                prev_action: prev[i],
            })
            .collect();
        let c = &m.checkpoint;
        *out = c
            .model
            .predict(&window, &c.manifest.normalizer)
            .map_err(core)?;
        Ok(())
    })
}

/// Undiscounted suffix sums of `rewards` into `out` (both of length `len`).
///
/// # Safety
/// Both pointers must reference `len` values.
#[no_mangle]
pub unsafe extern "C" fn grad_compute_rtg(rewards: *const f64, len: usize, out: *mut f64) -> GradStatus {
    guard(|| {
        let r = input(rewards, len, "rewards")?;
        if len > 0 && out.is_null() {
            return Err(null("out"));
        }
        for (i, g) in compute_rtg(r).into_iter().enumerate() {
            *out.add(i) = g;
        }
        Ok(())
    })
}

/// Constraint penalty `min((limit / (cost / max(count, 1)))^beta, 1)`, 1
/// without cost.
#[no_mangle]
pub extern "C" fn grad_penalty(cost: f64, count: f64, limit: f64, beta: f64) -> f64 {
    penalty(cost, count, limit, beta)
}

/// Percentage of periods with CPC at most `gamma_tol * target`.
///
/// # Safety
/// `cpcs` must reference `len` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn grad_cpc_cr(
    cpcs: *const f64,
    len: usize,
    target: f64,
    gamma_tol: f64,
    out: *mut f64,
) -> GradStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = cpc_cr(input(cpcs, len, "cpcs")?, target, gamma_tol).map_err(core)?;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn grad_online_reward(ctr: f64, cpc: f64, theta: f64, p_max: f64, active: bool) -> f64 {
    online_reward(ctr, cpc, theta, p_max, active)
}

/// Solves a JSON instance (brute force up to the size limit, greedy beyond)
/// and writes the JSON solution to `*out`, to be released with
/// `grad_string_free`.
///
/// # Safety
/// `instance_json` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn grad_oracle_solve_json(instance_json: *const c_char, out: *mut *mut c_char) -> GradStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = string(instance_json, "instance_json")?;
        let inst: BiddingInstance = serde_json::from_str(text)
            .map_err(|e| (GradStatus::InvalidArgument, format!("bad instance: {e}")))?;
        let sol = if inst.len() <= MAX_BRUTEFORCE {
            solve_bruteforce(&inst)
        } else {
            solve_threshold(&inst)
        }
        .map_err(core)?;
        let json = serde_json::to_string(&sol).expect("solution serializes");
        *out = CString::new(json).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn grad_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
