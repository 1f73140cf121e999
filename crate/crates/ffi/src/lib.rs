//! C ABI over `prefdyn`.
//!
//! Tasks and policies are opaque handles created by `pd_*_new*` and released
//! with the matching `pd_*_free`. Every fallible call returns a [`PdStatus`];
//! on failure, `pd_last_error` describes the most recent error on the calling
//! thread. Strings returned through `char **` are owned by the caller and must
//! be released with `pd_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use prefdyn::dynamics::prob_update_dpo;
use prefdyn::experiments::{run_experiment, TrainConfig};
use prefdyn::losses::{LossKind, LossSpec, PairInput};
use prefdyn::oracles::{run_suite, Suite};
use prefdyn::policy::PolicyTable;
use prefdyn::rng::seeded;
use prefdyn::task::PreferenceTask;
use prefdyn::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    MaskedPair = 3,
    DegeneratePair = 4,
    Numeric = 5,
    Io = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Loss value, `kappa = exp(-loss)` and log-probability gradients.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PdLossEval {
    pub value: f64,
    pub kappa: f64,
    pub grad_w: f64,
    pub grad_l: f64,
}

/// Opaque preference task.
pub struct PdTask {
    inner: PreferenceTask,
}

/// Opaque tabular softmax policy.
pub struct PdPolicy {
    inner: PolicyTable,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> PdStatus {
    match err {
        Error::Parameter(_) | Error::EmptyTask | Error::Domain(_) | Error::InsufficientData(_) => {
            PdStatus::InvalidArgument
        }
        Error::MaskedPair { .. } => PdStatus::MaskedPair,
        Error::DegeneratePair(_) => PdStatus::DegeneratePair,
        Error::Numeric(_) => PdStatus::Numeric,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) => PdStatus::Io,
    }
}

fn fail(status: PdStatus, msg: impl Into<String>) -> PdStatus {
    set_error(msg);
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), PdStatus>) -> PdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PdStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(PdStatus::Panic, "internal panic"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, PdStatus>;
}

impl<T> OrStatus<T> for prefdyn::Result<T> {
    fn or_status(self) -> Result<T, PdStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), PdStatus> {
    if p.is_null() {
        Err(fail(PdStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, PdStatus> {
    non_null(p, name)?;
    CStr::from_ptr(p).to_str().map_err(|_| {
        fail(
            PdStatus::InvalidArgument,
            format!("{name} is not valid UTF-8"),
        )
    })
}

unsafe fn matrix(
    data: *const f64,
    rows: usize,
    cols: usize,
    name: &str,
) -> Result<Vec<Vec<f64>>, PdStatus> {
    non_null(data, name)?;
    let flat = std::slice::from_raw_parts(data, rows * cols);
    Ok(flat.chunks(cols.max(1)).map(<[f64]>::to_vec).collect())
}

unsafe fn give_string(s: String, out: *mut *mut c_char) -> Result<(), PdStatus> {
    non_null(out, "out")?;
    let c = CString::new(s).map_err(|_| fail(PdStatus::Io, "output contains a NUL byte"))?;
    *out = c.into_raw();
    Ok(())
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn pd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Tasks

/// Toy task: prompts and responses labeled `1..=n`, utility `exp(-alpha (y-x)^2)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_task_new_toy(
    n_prompts: usize,
    n_responses: usize,
    alpha: f64,
    out: *mut *mut PdTask,
) -> PdStatus {
    guard(|| {
        non_null(out, "out")?;
        let inner = PreferenceTask::toy(n_prompts, n_responses, alpha).or_status()?;
        *out = Box::into_raw(Box::new(PdTask { inner }));
        Ok(())
    })
}

/// Task from a row-major `n_prompts x n_responses` utility matrix.
///
/// # Safety
/// `utility` must point to `n_prompts * n_responses` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_task_from_utilities(
    utility: *const f64,
    n_prompts: usize,
    n_responses: usize,
    out: *mut *mut PdTask,
) -> PdStatus {
    guard(|| {
        non_null(out, "out")?;
        let u = matrix(utility, n_prompts, n_responses, "utility")?;
        let inner = PreferenceTask::from_utilities(u, None).or_status()?;
        *out = Box::into_raw(Box::new(PdTask { inner }));
        Ok(())
    })
}

/// New task with a fraction `rate` of cells masked out, chosen by `seed`.
///
/// # Safety
/// `task` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_task_mask(
    task: *const PdTask,
    rate: f64,
    seed: u64,
    out: *mut *mut PdTask,
) -> PdStatus {
    guard(|| {
        non_null(task, "task")?;
        non_null(out, "out")?;
        let inner = (*task)
            .inner
            .apply_mask(rate, &mut seeded(seed))
            .or_status()?;
        *out = Box::into_raw(Box::new(PdTask { inner }));
        Ok(())
    })
}

/// # Safety
/// `task` must be NULL or a live handle, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn pd_task_free(task: *mut PdTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// # Safety
/// `task` must be a live handle; the outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_task_shape(
    task: *const PdTask,
    n_prompts: *mut usize,
    n_responses: *mut usize,
) -> PdStatus {
    guard(|| {
        non_null(task, "task")?;
        non_null(n_prompts, "n_prompts")?;
        non_null(n_responses, "n_responses")?;
        *n_prompts = (*task).inner.n_prompts();
        *n_responses = (*task).inner.n_responses();
        Ok(())
    })
}

/// Bradley-Terry probability that `y1` is preferred to `y2` for prompt `x`.
///
/// # Safety
/// `task` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_task_preference_probability(
    task: *const PdTask,
    x: usize,
    y1: usize,
    y2: usize,
    out: *mut f64,
) -> PdStatus {
    guard(|| {
        non_null(task, "task")?;
        non_null(out, "out")?;
        let t = &(*task).inner;
        if x >= t.n_prompts() || y1 >= t.n_responses() || y2 >= t.n_responses() {
            return Err(fail(PdStatus::InvalidArgument, "index out of range"));
        }
        *out = t.preference_probability(x, y1, y2).or_status()?;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Policies

/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_policy_new_uniform(
    n_prompts: usize,
    n_responses: usize,
    out: *mut *mut PdPolicy,
) -> PdStatus {
    guard(|| {
        non_null(out, "out")?;
        if n_prompts == 0 || n_responses == 0 {
            return Err(fail(
                PdStatus::InvalidArgument,
                "policy needs at least one prompt and response",
            ));
        }
        let inner = PolicyTable::uniform(n_prompts, n_responses);
        *out = Box::into_raw(Box::new(PdPolicy { inner }));
        Ok(())
    })
}

/// Policy from a row-major `n_prompts x n_responses` logit matrix.
///
/// # Safety
/// `logits` must point to `n_prompts * n_responses` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_policy_from_logits(
    logits: *const f64,
    n_prompts: usize,
    n_responses: usize,
    out: *mut *mut PdPolicy,
) -> PdStatus {
    guard(|| {
        non_null(out, "out")?;
        let l = matrix(logits, n_prompts, n_responses, "logits")?;
        let inner = PolicyTable::new(l).or_status()?;
        *out = Box::into_raw(Box::new(PdPolicy { inner }));
        Ok(())
    })
}

/// Writes the response distribution of prompt `x` into `buf`.
///
/// # Safety
/// `policy` must be a live handle; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pd_policy_probs(
    policy: *const PdPolicy,
    x: usize,
    buf: *mut f64,
    len: usize,
) -> PdStatus {
    guard(|| {
        non_null(policy, "policy")?;
        non_null(buf, "buf")?;
        let p = &(*policy).inner;
        if x >= p.n_prompts() {
            return Err(fail(PdStatus::InvalidArgument, "prompt index out of range"));
        }
        if len < p.n_responses() {
            return Err(fail(
                PdStatus::BufferTooSmall,
                format!("buffer holds {len}, need {}", p.n_responses()),
            ));
        }
        let probs = p.probs(x);
        std::slice::from_raw_parts_mut(buf, probs.len()).copy_from_slice(&probs);
        Ok(())
    })
}

/// # Safety
/// `policy` must be NULL or a live handle, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn pd_policy_free(policy: *mut PdPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

// ---------------------------------------------------------------------------
// Losses and dynamics

/// Evaluates a named loss (`dpo`, `nbdpo-sym`, `bdpo`, ...) on one pair.
///
/// # Safety
/// `loss` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_loss_eval(
    loss: *const c_char,
    beta: f64,
    clip_max: f64,
    logp_w: f64,
    logp_l: f64,
    ref_logp_w: f64,
    ref_logp_l: f64,
    out: *mut PdLossEval,
) -> PdStatus {
    guard(|| {
        non_null(out, "out")?;
        let kind: LossKind = c_str(loss, "loss")?.parse().or_status()?;
        let spec = LossSpec::new(kind, beta, clip_max).or_status()?;
        let e = spec
            .evaluate(&PairInput::new(logp_w, logp_l, ref_logp_w, ref_logp_l))
            .or_status()?;
        *out = PdLossEval {
            value: e.value,
            kappa: e.kappa,
            grad_w: e.grad_w,
            grad_l: e.grad_l,
        };
        Ok(())
    })
}

/// Closed-form one-epoch DPO probability change `gamma p_i (w_i - sum_j w_j p_j)`.
///
/// # Safety
/// `probs`, `w` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn pd_prob_update(
    probs: *const f64,
    w: *const f64,
    n: usize,
    gamma: f64,
    out: *mut f64,
) -> PdStatus {
    guard(|| {
        non_null(probs, "probs")?;
        non_null(w, "w")?;
        non_null(out, "out")?;
        let dp = prob_update_dpo(
            std::slice::from_raw_parts(probs, n),
            std::slice::from_raw_parts(w, n),
            gamma,
        );
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&dp);
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Experiments and checks

/// Runs one training experiment. `config_json` is a JSON training config;
/// missing fields take their defaults, so `"{}"` is valid. The report JSON is
/// written to `*out`.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_train(config_json: *const c_char, out: *mut *mut c_char) -> PdStatus {
    guard(|| {
        non_null(out, "out")?;
        let text = c_str(config_json, "config_json")?;
        let config: TrainConfig = serde_json::from_str(text)
            .map_err(|e| fail(PdStatus::InvalidArgument, format!("invalid config: {e}")))?;
        config.validate().or_status()?;
        let report = run_experiment(&config).or_status()?;
        let json = serde_json::to_string(&report).map_err(|e| fail(PdStatus::Io, e.to_string()))?;
        give_string(json, out)
    })
}

/// Runs an inequality-check suite and writes a JSON array of reports to
/// `*out`. `*all_passed` is set to 1 when every check passed, else 0.
///
/// # Safety
/// `suite` must be a NUL-terminated string; `out` and `all_passed` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_verify(
    suite: *const c_char,
    trials: usize,
    seed: u64,
    out: *mut *mut c_char,
    all_passed: *mut i32,
) -> PdStatus {
    guard(|| {
        non_null(out, "out")?;
        non_null(all_passed, "all_passed")?;
        let suite: Suite = c_str(suite, "suite")?.parse().or_status()?;
        let reports = run_suite(suite, trials, seed).or_status()?;
        *all_passed = i32::from(reports.iter().all(|r| r.passed));
        let json =
            serde_json::to_string(&reports).map_err(|e| fail(PdStatus::Io, e.to_string()))?;
        give_string(json, out)
    })
}
