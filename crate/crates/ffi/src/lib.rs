//! C ABI over the peaklab library.
//!
//! Every fallible function returns a [`PeaklabStatus`]; on failure the
//! message is kept per thread and can be copied out with
//! [`peaklab_last_error_message`]. Models are opaque handles created by
//! [`peaklab_model_load`] and released with [`peaklab_model_free`]. Matrices
//! are row-major `double` arrays. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use peaklab::metrics::{aggregate_additivity, format_percent, probability_changes, ranking_forgetting, ranking_noise, AnswerProbe};
use peaklab::microlm::{answer_logprob, load_delta, load_model, Matrix, ModelParams, Token};
use peaklab::editors::rank_one_update_with;
use peaklab::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeaklabStatus {
    Ok = 0,
    Config = 1,
    Input = 2,
    Numerical = 3,
    Training = 4,
    Degenerate = 5,
    Corrupt = 6,
    Validation = 7,
    Rejected = 8,
    Usage = 9,
    Io = 10,
    Parse = 11,
    NullPointer = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

impl From<&Error> for PeaklabStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => PeaklabStatus::Config,
            Error::Input(_) => PeaklabStatus::Input,
            Error::NonFiniteTerm { .. } | Error::NonFiniteStep { .. } => PeaklabStatus::Numerical,
            Error::Diverged { .. } => PeaklabStatus::Training,
            Error::Degenerate(_) => PeaklabStatus::Degenerate,
            Error::Corrupt { .. } => PeaklabStatus::Corrupt,
            Error::Validation(_) => PeaklabStatus::Validation,
            Error::Rejected(_) => PeaklabStatus::Rejected,
            Error::Usage(_) => PeaklabStatus::Usage,
            Error::Io { .. } => PeaklabStatus::Io,
            Error::Parse { .. } => PeaklabStatus::Parse,
        }
    }
}

/// Opaque trained or edited model.
pub struct PeaklabModel {
    params: ModelParams,
}

/// Architecture of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PeaklabModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

/// Additivity of one prompt, all values in `[0, 1]` except the ratios.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PeaklabAdditivity {
    pub rff: f64,
    pub rnf: f64,
    pub cpc: f64,
    pub fpc: f64,
    pub aff: f64,
    pub anf: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Failure {
    Lib(Error),
    Null(&'static str),
    Small(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PeaklabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            PeaklabStatus::Ok
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(format!("{} ({})", e, e.code()));
            PeaklabStatus::from(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            PeaklabStatus::NullPointer
        }
        Ok(Err(Failure::Small(need))) => {
            set_error(format!("buffer too small: {need} bytes needed"));
            PeaklabStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic".into());
            PeaklabStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or(Failure::Null(what))
}

unsafe fn path<'a>(ptr: *const c_char) -> Result<&'a Path, Failure> {
    if ptr.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Error::Input("path is not valid UTF-8".into()))?;
    Ok(Path::new(s))
}

/// Copies `text` plus a NUL into `buf`; `required` receives the full size.
unsafe fn copy_out(text: &str, buf: *mut c_char, cap: usize, required: *mut usize) -> Result<(), Failure> {
    let need = text.len() + 1;
    if let Some(r) = required.as_mut() {
        *r = need;
    }
    if cap < need {
        return Err(Failure::Small(need));
    }
    if buf.is_null() {
        return Err(Failure::Null("buf"));
    }
    std::ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
    *buf.add(text.len()) = 0;
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap`). Returns the untruncated size including
/// the NUL; an empty message means the last call succeeded.
///
/// # Safety
/// `buf` must be valid for `cap` bytes or null with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn peaklab_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

/// Static, NUL-terminated name of a status (`"E_CONFIG"` style).
#[no_mangle]
pub extern "C" fn peaklab_status_name(status: PeaklabStatus) -> *const c_char {
    let s: &'static CStr = match status {
        PeaklabStatus::Ok => c"OK",
        PeaklabStatus::Config => c"E_CONFIG",
        PeaklabStatus::Input => c"E_INPUT",
        PeaklabStatus::Numerical => c"E_NUMERICAL",
        PeaklabStatus::Training => c"E_TRAINING",
        PeaklabStatus::Degenerate => c"E_DEGENERATE",
        PeaklabStatus::Corrupt => c"E_CORRUPT",
        PeaklabStatus::Validation => c"E_VALIDATION",
        PeaklabStatus::Rejected => c"E_REJECTED",
        PeaklabStatus::Usage => c"E_USAGE",
        PeaklabStatus::Io => c"E_IO",
        PeaklabStatus::Parse => c"E_PARSE",
        PeaklabStatus::NullPointer => c"E_NULL_POINTER",
        PeaklabStatus::BufferTooSmall => c"E_BUFFER_TOO_SMALL",
        PeaklabStatus::Panic => c"E_PANIC",
    };
    s.as_ptr()
}

/// Loads a model file and verifies its checksum.
///
/// # Safety
/// `path` must be a NUL-terminated string; `model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn peaklab_model_load(path_: *const c_char, model: *mut *mut PeaklabModel) -> PeaklabStatus {
    guard(|| {
        let slot = out(model, "model")?;
        let params = load_model(path(path_)?)?;
        *slot = Box::into_raw(Box::new(PeaklabModel { params }));
        Ok(())
    })
}

/// Loads a weight delta and applies it to `base`, producing a new handle.
///
/// # Safety
/// `base` must be a live handle, `path` NUL-terminated, `edited` writable.
#[no_mangle]
pub unsafe extern "C" fn peaklab_model_apply_delta(
    base: *const PeaklabModel,
    path_: *const c_char,
    edited: *mut *mut PeaklabModel,
) -> PeaklabStatus {
    guard(|| {
        let base = base.as_ref().ok_or(Failure::Null("base"))?;
        let slot = out(edited, "edited")?;
        let params = load_delta(path(path_)?)?.apply(&base.params)?;
        *slot = Box::into_raw(Box::new(PeaklabModel { params }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn peaklab_model_free(model: *mut PeaklabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `config` writable.
#[no_mangle]
pub unsafe extern "C" fn peaklab_model_config(model: *const PeaklabModel, config: *mut PeaklabModelConfig) -> PeaklabStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        let c = &m.params.config;
        *out(config, "config")? = PeaklabModelConfig {
            vocab_size: c.vocab_size,
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            max_seq_len: c.max_seq_len,
        };
        Ok(())
    })
}

/// Hex SHA-256 of the parameters (65 bytes with the NUL).
///
/// # Safety
/// `model` must be a live handle; `buf` valid for `cap` bytes; `required`
/// writable or null.
#[no_mangle]
pub unsafe extern "C" fn peaklab_model_checksum(
    model: *const PeaklabModel,
    buf: *mut c_char,
    cap: usize,
    required: *mut usize,
) -> PeaklabStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        copy_out(&m.params.checksum(), buf, cap, required)
    })
}

/// `log P(answer | prompt)` summed over the answer's tokens.
///
/// # Safety
/// `model` must be a live handle; token arrays valid for their lengths;
/// `logprob` writable.
#[no_mangle]
pub unsafe extern "C" fn peaklab_answer_logprob(
    model: *const PeaklabModel,
    prompt: *const u32,
    prompt_len: usize,
    answer: *const u32,
    answer_len: usize,
    logprob: *mut f64,
) -> PeaklabStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        let p: Vec<Token> = slice(prompt, prompt_len, "prompt")?.to_vec();
        let a: Vec<Token> = slice(answer, answer_len, "answer")?.to_vec();
        *out(logprob, "logprob")? = answer_logprob(&m.params, &p, &a, None)?;
        Ok(())
    })
}

fn probes(ps: &[f64]) -> Vec<AnswerProbe> {
    ps.iter().map(|&p| AnswerProbe::with_probability(p)).collect()
}

/// RFF of correct-answer probabilities against the best false probability.
///
/// # Safety
/// `correct` valid for `n`; `value` writable.
#[no_mangle]
pub unsafe extern "C" fn peaklab_ranking_forgetting(correct: *const f64, n: usize, false_max: f64, value: *mut f64) -> PeaklabStatus {
    guard(|| {
        let c = probes(slice(correct, n, "correct")?);
        *out(value, "value")? = ranking_forgetting(&c, false_max)?;
        Ok(())
    })
}

/// RNF of false-answer probabilities against the worst correct probability.
///
/// # Safety
/// `false_probs` valid for `n`; `value` writable.
#[no_mangle]
pub unsafe extern "C" fn peaklab_ranking_noise(false_probs: *const f64, n: usize, correct_min: f64, value: *mut f64) -> PeaklabStatus {
    guard(|| {
        let f = probes(slice(false_probs, n, "false_probs")?);
        *out(value, "value")? = ranking_noise(&f, correct_min)?;
        Ok(())
    })
}

/// Full additivity of one prompt from pre- and post-edit probabilities. The
/// ranking thresholds are the post-edit best false and worst correct
/// probabilities.
///
/// # Safety
/// Each array valid for its length; `result` writable.
#[no_mangle]
pub unsafe extern "C" fn peaklab_additivity(
    pre_correct: *const f64,
    post_correct: *const f64,
    n_correct: usize,
    pre_false: *const f64,
    post_false: *const f64,
    n_false: usize,
    result: *mut PeaklabAdditivity,
) -> PeaklabStatus {
    guard(|| {
        let pre_c = probes(slice(pre_correct, n_correct, "pre_correct")?);
        let post_c = probes(slice(post_correct, n_correct, "post_correct")?);
        let pre_f = probes(slice(pre_false, n_false, "pre_false")?);
        let post_f = probes(slice(post_false, n_false, "post_false")?);
        let false_max = post_f.iter().map(|p| p.probability).fold(f64::NEG_INFINITY, f64::max);
        let correct_min = post_c.iter().map(|p| p.probability).fold(f64::INFINITY, f64::min);
        let rff = ranking_forgetting(&post_c, false_max)?;
        let rnf = ranking_noise(&post_f, correct_min)?;
        let (cpc, fpc) = probability_changes(&pre_c, &post_c, &pre_f, &post_f)?;
        let (aff, anf) = aggregate_additivity(rff, rnf, cpc, fpc);
        *out(result, "result")? = PeaklabAdditivity {
            rff,
            rnf,
            cpc,
            fpc,
            aff,
            anf,
        };
        Ok(())
    })
}

/// `Ŵ = W + Λ (C⁻¹k)ᵀ` with `Λ = (v − W k) / ((C⁻¹k)ᵀ k)`. `w` and `w_hat`
/// are `rows × cols`, `c` is `cols × cols`; `w_hat` may alias `w`.
///
/// # Safety
/// Arrays valid for the sizes implied by `rows` and `cols`.
#[no_mangle]
pub unsafe extern "C" fn peaklab_rank_one_update(
    w: *const f64,
    rows: usize,
    cols: usize,
    k: *const f64,
    v: *const f64,
    c: *const f64,
    w_hat: *mut f64,
) -> PeaklabStatus {
    guard(|| {
        let wm = Matrix::from_vec(rows, cols, slice(w, rows * cols, "w")?.to_vec())?;
        let cm = Matrix::from_vec(cols, cols, slice(c, cols * cols, "c")?.to_vec())?;
        let k = slice(k, cols, "k")?;
        let v = slice(v, rows, "v")?;
        let updated = rank_one_update_with(&wm, k, v, &cm)?;
        if w_hat.is_null() {
            return Err(Failure::Null("w_hat"));
        }
        std::ptr::copy(updated.data.as_ptr(), w_hat, rows * cols);
        Ok(())
    })
}

/// Percentage with two decimals, ties to even (`0.123456 → "12.35"`).
///
/// # Safety
/// `buf` valid for `cap` bytes; `required` writable or null.
#[no_mangle]
pub unsafe extern "C" fn peaklab_format_percent(fraction: f64, buf: *mut c_char, cap: usize, required: *mut usize) -> PeaklabStatus {
    guard(|| copy_out(&format_percent(fraction), buf, cap, required))
}

/// Static, NUL-terminated library version.
#[no_mangle]
pub extern "C" fn peaklab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
