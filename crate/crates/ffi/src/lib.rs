//! C ABI over the `glab` library.
//!
//! Every function returns a [`GlabStatus`]. On failure a message is kept in
//! thread-local storage and can be read with [`glab_last_error`]. Models are
//! opaque handles created by `glab_model_*` constructors and released with
//! [`glab_model_free`].

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use glab::analysis::{fixture_dir, paper_fixture_report_from, spearman, spearman_p_value};
use glab::garfa::GarfaParams;
use glab::lslora::{llama_table_comparison, LoraAdapter, LoraSpec};
use glab::model::{checkpoint, Model, ModelConfig};
use glab::GlabError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numeric = 4,
    BufferTooSmall = 5,
    Internal = 6,
}

/// Opaque model handle.
pub struct GlabModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes stripped"));
}

fn status_of(e: &GlabError) -> GlabStatus {
    match e {
        GlabError::Io { .. } | GlabError::Parse { .. } => GlabStatus::Io,
        GlabError::NumericDomain(_)
        | GlabError::Degenerate(_)
        | GlabError::UndefinedCorrelation(_)
        | GlabError::NonFiniteGradient { .. } => GlabStatus::Numeric,
        GlabError::Shape(_) | GlabError::Config(_) | GlabError::Input(_) => GlabStatus::InvalidArgument,
        GlabError::Contract(_) => GlabStatus::Internal,
    }
}

/// Run `f`, turning errors and panics into a status plus last-error message.
fn guard(f: impl FnOnce() -> Result<(), (GlabStatus, String)>) -> GlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GlabStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GlabStatus::Internal
        }
    }
}

fn lib<T>(r: glab::Result<T>) -> Result<T, (GlabStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (GlabStatus, String) {
    (GlabStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (GlabStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (GlabStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (GlabStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model_ref<'a>(m: *const GlabModel) -> Result<&'a GlabModel, (GlabStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Message for the most recent failure on this thread; empty after success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn glab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Create the small built-in model, initialized from `seed`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn glab_model_new_toy(seed: u64, out: *mut *mut GlabModel) -> GlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = lib(Model::init(&ModelConfig::toy(), seed))?;
        *out = Box::into_raw(Box::new(GlabModel { inner }));
        Ok(())
    })
}

/// Load a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn glab_model_load(dir: *const c_char, out: *mut *mut GlabModel) -> GlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = lib(checkpoint::load(&path_arg(dir)?))?;
        *out = Box::into_raw(Box::new(GlabModel { inner }));
        Ok(())
    })
}

/// Write a checkpoint directory.
///
/// # Safety
/// `model` must come from a `glab_model_*` constructor; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn glab_model_save(model: *const GlabModel, dir: *const c_char) -> GlabStatus {
    guard(|| {
        let m = model_ref(model)?;
        lib(checkpoint::save(&m.inner, &path_arg(dir)?)).map(drop)
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn glab_model_free(model: *mut GlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size and layer count of a model.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn glab_model_dims(
    model: *const GlabModel,
    vocab_size: *mut usize,
    n_layers: *mut usize,
) -> GlabStatus {
    guard(|| {
        let m = model_ref(model)?;
        if vocab_size.is_null() || n_layers.is_null() {
            return Err(null("out"));
        }
        *vocab_size = m.inner.config.vocab_size;
        *n_layers = m.inner.config.n_layers;
        Ok(())
    })
}

/// Attach zero-initialized LoRA (rank 4, all projections) and identity RoPE
/// scaling to the given layers. Either list may be empty.
///
/// # Safety
/// `model` must be a live handle; each list must hold `len` entries.
#[no_mangle]
pub unsafe extern "C" fn glab_model_attach(
    model: *mut GlabModel,
    lora_layers: *const usize,
    n_lora: usize,
    garfa_layers: *const usize,
    n_garfa: usize,
    seed: u64,
) -> GlabStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let lora: BTreeSet<usize> = slice_arg(lora_layers, n_lora, "lora_layers")?.iter().copied().collect();
        let garfa: BTreeSet<usize> = slice_arg(garfa_layers, n_garfa, "garfa_layers")?
            .iter()
            .copied()
            .collect();
        if !lora.is_empty() {
            let spec = LoraSpec {
                layers: lora,
                ..LoraSpec::default()
            };
            let adapter = lib(LoraAdapter::inject(&spec, &m.inner.config, seed))?;
            lib(m.inner.attach_lora(adapter))?;
        }
        if !garfa.is_empty() {
            let g = lib(GarfaParams::init_identity(&garfa, m.inner.config.n_kv_heads))?;
            lib(m.inner.attach_garfa(g))?;
        }
        Ok(())
    })
}

/// Run a forward pass. Logits are written row-major as `[len, vocab]`;
/// `logits_cap` must be at least `len * vocab`.
///
/// # Safety
/// `tokens` must hold `len` entries and `logits` `logits_cap` writable slots.
#[no_mangle]
pub unsafe extern "C" fn glab_model_forward(
    model: *const GlabModel,
    tokens: *const usize,
    len: usize,
    logits: *mut f64,
    logits_cap: usize,
) -> GlabStatus {
    guard(|| {
        let m = model_ref(model)?;
        let tokens = slice_arg(tokens, len, "tokens")?;
        let need = len * m.inner.config.vocab_size;
        if logits_cap < need {
            return Err((
                GlabStatus::BufferTooSmall,
                format!("need {need} slots, got {logits_cap}"),
            ));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        let trace = lib(m.inner.forward(tokens))?;
        std::slice::from_raw_parts_mut(logits, need).copy_from_slice(&trace.logits.data);
        Ok(())
    })
}

/// Spearman correlation of two equal-length series and its two-sided p-value.
///
/// # Safety
/// `x` and `y` must hold `n` entries; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn glab_spearman(
    x: *const f64,
    y: *const f64,
    n: usize,
    r_s: *mut f64,
    p_value: *mut f64,
) -> GlabStatus {
    guard(|| {
        let (x, y) = (slice_arg(x, n, "x")?, slice_arg(y, n, "y")?);
        if r_s.is_null() || p_value.is_null() {
            return Err(null("out"));
        }
        let r = lib(spearman(x, y))?;
        let p = lib(spearman_p_value(r, n))?;
        *r_s = r;
        *p_value = p.p;
        Ok(())
    })
}

/// Co-localization statistics of the bundled 32-layer profiles
/// (directory from `GLAB_FIXTURES` when set).
///
/// # Safety
/// Out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn glab_fixture_stats(r_s: *mut f64, p_value: *mut f64, overlap: *mut usize) -> GlabStatus {
    guard(|| {
        if r_s.is_null() || p_value.is_null() || overlap.is_null() {
            return Err(null("out"));
        }
        let report = lib(paper_fixture_report_from(&fixture_dir()))?;
        *r_s = report.r_s;
        *p_value = report.p_value;
        *overlap = report.overlap.len();
        Ok(())
    })
}

/// Rank-64 LoRA parameter count on all seven projections of ten layers of an
/// 8B-class GQA model, computed from the projection shapes, next to the
/// commonly quoted figure.
///
/// # Safety
/// Out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn glab_lora_param_counts(direct: *mut u64, published: *mut u64) -> GlabStatus {
    guard(|| {
        if direct.is_null() || published.is_null() {
            return Err(null("out"));
        }
        let c = llama_table_comparison();
        *direct = c.direct as u64;
        *published = c.published as u64;
        Ok(())
    })
}
