//! C ABI over the cogsym core.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`CogsymStatus`]; the message of the last failure on the calling
//! thread is available from [`cogsym_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cogsym::eval::evaluate;
use cogsym::lingua::{generate_language_suite, render_eval_set, LanguageSuite, Role, Task, WORD_TRANSLATION_SHOTS};
use cogsym::model::{ModelConfig, ModelState};
use cogsym::rank::{hill_alpha, HillConfig};
use cogsym::{checkpoint, sweep, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CogsymStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Plan = 6,
    Numeric = 7,
    State = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Model architecture passed by value.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CogsymModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub tie_embeddings: bool,
}

/// Opaque model handle.
pub struct CogsymModel(ModelState<f32>);

/// Opaque language suite handle.
pub struct CogsymSuite(LanguageSuite);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CogsymStatus {
    match e {
        Error::Config(_) => CogsymStatus::Config,
        Error::Input(_) => CogsymStatus::InvalidArgument,
        Error::Plan(_) | Error::Spec(_) => CogsymStatus::Plan,
        Error::Format { .. } | Error::Json(_) => CogsymStatus::Format,
        Error::Io(_) => CogsymStatus::Io,
        Error::DegenerateBatch(_) | Error::DegenerateSpectrum(_) => CogsymStatus::Numeric,
        _ => CogsymStatus::State,
    }
}

struct Fail(CogsymStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CogsymStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CogsymStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CogsymStatus::Ok,
        Ok(Err(Fail(s, m))) => {
            set_error(&m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            CogsymStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CogsymStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Message of the last failed call on this thread; empty when none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cogsym_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Architecture of the default toy model.
#[no_mangle]
pub extern "C" fn cogsym_toy_config() -> CogsymModelConfig {
    let c = ModelConfig::toy();
    CogsymModelConfig {
        n_layers: c.n_layers,
        d_model: c.d_model,
        n_heads: c.n_heads,
        d_ffn: c.d_ffn,
        vocab_size: c.vocab_size,
        context_len: c.context_len,
        tie_embeddings: c.tie_embeddings,
    }
}

/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn cogsym_model_new(config: CogsymModelConfig, seed: u64, out: *mut *mut CogsymModel) -> CogsymStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ModelConfig {
            n_layers: config.n_layers,
            d_model: config.d_model,
            n_heads: config.n_heads,
            d_ffn: config.d_ffn,
            vocab_size: config.vocab_size,
            context_len: config.context_len,
            tie_embeddings: config.tie_embeddings,
        };
        let m = ModelState::<f32>::init(&cfg, seed)?;
        *out = Box::into_raw(Box::new(CogsymModel(m)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` as in [`cogsym_model_new`].
#[no_mangle]
pub unsafe extern "C" fn cogsym_model_load(path: *const c_char, out: *mut *mut CogsymModel) -> CogsymStatus {
    guard(|| {
        let p = text(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = checkpoint::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(CogsymModel(ck.model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cogsym_model_save(model: *const CogsymModel, path: *const c_char) -> CogsymStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let p = text(path, "path")?;
        checkpoint::save(Path::new(p), &m.0, None, 0)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cogsym_model_free(model: *mut CogsymModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cogsym_model_config(model: *const CogsymModel, out: *mut CogsymModelConfig) -> CogsymStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = &m.0.config;
        *out = CogsymModelConfig {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ffn: c.d_ffn,
            vocab_size: c.vocab_size,
            context_len: c.context_len,
            tie_embeddings: c.tie_embeddings,
        };
        Ok(())
    })
}

/// Next-token logits after `tokens`, written to `logits` (capacity `cap`,
/// at least the vocabulary size).
///
/// # Safety
/// `tokens` must point to `n_tokens` ids and `logits` to `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn cogsym_model_next_logits(
    model: *const CogsymModel,
    tokens: *const u32,
    n_tokens: usize,
    logits: *mut f32,
    cap: usize,
) -> CogsymStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let t = slice(tokens, n_tokens, "tokens")?;
        let v = m.0.config.vocab_size;
        if logits.is_null() {
            return Err(null("logits"));
        }
        if cap < v {
            return Err(Fail(CogsymStatus::BufferTooSmall, format!("need {v} floats, got {cap}")));
        }
        let out = m.0.last_logits(&[t.to_vec()])?;
        std::ptr::copy_nonoverlapping(out[0].as_ptr(), logits, v);
        Ok(())
    })
}

/// Suite of `n_known` known languages `k0..` and `n_unknown` unknown ones `u0..`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cogsym_suite_new(
    seed: u64,
    concept_count: usize,
    n_known: usize,
    n_unknown: usize,
    vocab_size: usize,
    out: *mut *mut CogsymSuite,
) -> CogsymStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let names: Vec<(String, Role)> = (0..n_known)
            .map(|i| (format!("k{i}"), Role::Known))
            .chain((0..n_unknown).map(|i| (format!("u{i}"), Role::Unknown)))
            .collect();
        let specs: Vec<(&str, Role)> = names.iter().map(|(n, r)| (n.as_str(), *r)).collect();
        let s = generate_language_suite(seed, concept_count, &specs, vocab_size)?;
        *out = Box::into_raw(Box::new(CogsymSuite(s)));
        Ok(())
    })
}

/// # Safety
/// `suite` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cogsym_suite_free(suite: *mut CogsymSuite) {
    if !suite.is_null() {
        drop(Box::from_raw(suite));
    }
}

/// Token of `concept` in language `language`.
///
/// # Safety
/// `suite` must be a live handle, `language` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cogsym_suite_token(
    suite: *const CogsymSuite,
    language: *const c_char,
    concept: usize,
    out: *mut u32,
) -> CogsymStatus {
    guard(|| {
        let s = suite.as_ref().ok_or_else(|| null("suite"))?;
        let name = text(language, "language")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let lang = s.0.language(name)?;
        if concept >= lang.lexicon.len() {
            return Err(Fail(
                CogsymStatus::InvalidArgument,
                format!("concept {concept} out of range 0..{}", lang.lexicon.len()),
            ));
        }
        *out = lang.token(concept);
        Ok(())
    })
}

/// Few-shot word-translation accuracy of `model` from `source` to `target`.
///
/// # Safety
/// Handles must be live, names NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cogsym_eval_word_translation(
    model: *const CogsymModel,
    suite: *const CogsymSuite,
    source: *const c_char,
    target: *const c_char,
    n_items: usize,
    seed: u64,
    out: *mut f64,
) -> CogsymStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let s = suite.as_ref().ok_or_else(|| null("suite"))?;
        let (src, tgt) = (text(source, "source")?, text(target, "target")?);
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let set = render_eval_set(&s.0, Task::WordTranslation, src, tgt, WORD_TRANSLATION_SHOTS, seed, n_items)?;
        *out = evaluate(&m.0, &set, Some(m.0.config.context_len), "ffi")?.value;
        Ok(())
    })
}

/// Layers of the CogSym plan for `n_layers` and `fraction`, ascending.
/// `*n_out` receives the count even when `cap` is too small.
///
/// # Safety
/// `layers` must point to `cap` writable slots; `n_out` writable.
#[no_mangle]
pub unsafe extern "C" fn cogsym_plan_layers(
    n_layers: usize,
    fraction: f64,
    layers: *mut usize,
    cap: usize,
    n_out: *mut usize,
) -> CogsymStatus {
    guard(|| {
        let n_out = n_out.as_mut().ok_or_else(|| null("n_out"))?;
        let plan = sweep::cogsym_plan(n_layers, fraction)?;
        let l = plan.layers();
        *n_out = l.len();
        if cap < l.len() {
            return Err(Fail(CogsymStatus::BufferTooSmall, format!("need {} slots, got {cap}", l.len())));
        }
        if !l.is_empty() {
            if layers.is_null() {
                return Err(null("layers"));
            }
            std::ptr::copy_nonoverlapping(l.as_ptr(), layers, l.len());
        }
        Ok(())
    })
}

/// Hill tail-index estimate over the top `tail_fraction` of `eigs`.
///
/// # Safety
/// `eigs` must point to `n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cogsym_hill_alpha(eigs: *const f64, n: usize, tail_fraction: f64, out: *mut f64) -> CogsymStatus {
    guard(|| {
        let e = slice(eigs, n, "eigs")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = hill_alpha(e, &HillConfig { tail_fraction })?;
        Ok(())
    })
}
