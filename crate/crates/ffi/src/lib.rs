//! C ABI for the spafit engine.
//!
//! Models are opaque `SpafitModel` handles owned by the caller and released
//! with `spafit_model_free`. Every fallible call returns a `SpafitStatus`; on
//! failure `spafit_last_error` describes the most recent error on the calling
//! thread. Strings are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use spafit::metrics::{accuracy, f1_binary, matthews_corr, pearson_corr, MetricError};
use spafit::model::{
    build_model, load_checkpoint, predict, save_checkpoint, Batch, CheckpointError, ModelConfig,
    ModelError, ParamStore,
};
use spafit::plan::{
    attach_lora, compile_plan, count_trainable, export_adapter, swap_adapter, PlanError, PlanSpec,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpafitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Malformed plan spec or out-of-range stratification.
    SpecError = 3,
    /// Adapter does not match the model or its plan.
    Incompatible = 4,
    Io = 5,
    /// Corrupt or unreadable container contents.
    Format = 6,
    Internal = 7,
}

/// Model dimensions; mirrors the engine's configuration.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpafitModelConfig {
    pub num_layers: u32,
    pub hidden: u32,
    pub num_heads: u32,
    pub ffn_size: u32,
    pub vocab_size: u32,
    pub max_positions: u32,
    pub type_vocab: u32,
    pub lora_rank: u32,
    pub lora_alpha: u32,
    pub dropout_p: f64,
    pub num_labels: u32,
}

impl From<&ModelConfig> for SpafitModelConfig {
    fn from(c: &ModelConfig) -> Self {
        SpafitModelConfig {
            num_layers: c.num_layers as u32,
            hidden: c.hidden as u32,
            num_heads: c.num_heads as u32,
            ffn_size: c.ffn_size as u32,
            vocab_size: c.vocab_size as u32,
            max_positions: c.max_positions as u32,
            type_vocab: c.type_vocab as u32,
            lora_rank: c.lora_rank as u32,
            lora_alpha: c.lora_alpha as u32,
            dropout_p: c.dropout_p,
            num_labels: c.num_labels as u32,
        }
    }
}

impl From<&SpafitModelConfig> for ModelConfig {
    fn from(c: &SpafitModelConfig) -> Self {
        ModelConfig {
            num_layers: c.num_layers as usize,
            hidden: c.hidden as usize,
            num_heads: c.num_heads as usize,
            ffn_size: c.ffn_size as usize,
            vocab_size: c.vocab_size as usize,
            max_positions: c.max_positions as usize,
            type_vocab: c.type_vocab as usize,
            lora_rank: c.lora_rank as usize,
            lora_alpha: c.lora_alpha as usize,
            dropout_p: c.dropout_p,
            num_labels: c.num_labels as usize,
        }
    }
}

/// Opaque model handle.
pub struct SpafitModel {
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(SpafitStatus, String);

type FfiResult<T = ()> = Result<T, Failure>;

fn fail<T>(status: SpafitStatus, msg: impl Into<String>) -> FfiResult<T> {
    Err(Failure(status, msg.into()))
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let status = match e {
            CheckpointError::Io(_) => SpafitStatus::Io,
            CheckpointError::WrongKind { .. }
            | CheckpointError::UnknownTensor(_)
            | CheckpointError::ShapeMismatch { .. } => SpafitStatus::Incompatible,
            _ => SpafitStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

impl From<PlanError> for Failure {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::Syntax(_) | PlanError::Bounds { .. } => {
                Failure(SpafitStatus::SpecError, e.to_string())
            }
            PlanError::Incompatible(_) => Failure(SpafitStatus::Incompatible, e.to_string()),
            PlanError::Checkpoint(c) => c.into(),
            other => Failure(SpafitStatus::InvalidArgument, other.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure(SpafitStatus::InvalidArgument, e.to_string())
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        Failure(SpafitStatus::InvalidArgument, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, records any failure or panic, and clears the message on success.
fn guard(f: impl FnOnce() -> FfiResult) -> SpafitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            SpafitStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            SpafitStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(SpafitStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(SpafitStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const SpafitModel) -> FfiResult<&'a SpafitModel> {
    m.as_ref()
        .map_or_else(|| fail(SpafitStatus::NullPointer, "model is null"), Ok)
}

unsafe fn model_mut<'a>(m: *mut SpafitModel) -> FfiResult<&'a mut SpafitModel> {
    m.as_mut()
        .map_or_else(|| fail(SpafitStatus::NullPointer, "model is null"), Ok)
}

unsafe fn out_ptr<'a, T>(p: *mut T) -> FfiResult<&'a mut T> {
    p.as_mut()
        .map_or_else(|| fail(SpafitStatus::NullPointer, "output pointer is null"), Ok)
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> FfiResult<&'a [T]> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(SpafitStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn parse_spec(s: &str) -> FfiResult<PlanSpec> {
    Ok(s.parse::<PlanSpec>()?)
}

fn emit_model(out: *mut *mut SpafitModel, store: ParamStore) -> FfiResult {
    let out = unsafe { out_ptr(out)? };
    *out = Box::into_raw(Box::new(SpafitModel { store }));
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next spafit call on the same thread.
#[no_mangle]
pub extern "C" fn spafit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn spafit_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Fill `out` with a named preset: `"toy"` or `"bert-large"`.
///
/// # Safety
/// `name` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spafit_config_preset(
    name: *const c_char,
    out: *mut SpafitModelConfig,
) -> SpafitStatus {
    guard(|| {
        let cfg = match str_arg(name, "name")? {
            "toy" => ModelConfig::toy(),
            "bert-large" => ModelConfig::bert_large(),
            other => return fail(SpafitStatus::InvalidArgument, format!("unknown preset `{other}`")),
        };
        *out_ptr(out)? = SpafitModelConfig::from(&cfg);
        Ok(())
    })
}

/// Build a randomly initialised model. Release it with `spafit_model_free`.
///
/// # Safety
/// `config` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spafit_model_new(
    config: *const SpafitModelConfig,
    seed: u64,
    out: *mut *mut SpafitModel,
) -> SpafitStatus {
    guard(|| {
        let cfg = config
            .as_ref()
            .map_or_else(|| fail(SpafitStatus::NullPointer, "config is null"), Ok)?;
        emit_model(out, build_model(&ModelConfig::from(cfg), seed)?)
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn spafit_model_free(model: *mut SpafitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spafit_model_config(
    model: *const SpafitModel,
    out: *mut SpafitModelConfig,
) -> SpafitStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out_ptr(out)? = SpafitModelConfig::from(m.store.config());
        Ok(())
    })
}

/// Compile `spec` against the model and attach it, creating LoRA factors from `seed`.
///
/// # Safety
/// `model` must be a live handle and `spec` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn spafit_model_attach_plan(
    model: *mut SpafitModel,
    spec: *const c_char,
    seed: u64,
) -> SpafitStatus {
    guard(|| {
        let m = model_mut(model)?;
        let spec = parse_spec(str_arg(spec, "spec")?)?;
        let plan = compile_plan(&spec, m.store.config())?;
        attach_lora(&mut m.store, &plan, seed)?;
        Ok(())
    })
}

/// Trainable parameters of `spec` on `config`, without building weights.
///
/// # Safety
/// `config` must be readable, `spec` a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spafit_count_trainable(
    config: *const SpafitModelConfig,
    spec: *const c_char,
    include_head: bool,
    out: *mut u64,
) -> SpafitStatus {
    guard(|| {
        let cfg = config
            .as_ref()
            .map_or_else(|| fail(SpafitStatus::NullPointer, "config is null"), Ok)?;
        let spec = parse_spec(str_arg(spec, "spec")?)?;
        let plan = compile_plan(&spec, &ModelConfig::from(cfg))?;
        *out_ptr(out)? = count_trainable(&plan, include_head);
        Ok(())
    })
}

/// Trainable parameters of the attached plan.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spafit_model_count_trainable(
    model: *const SpafitModel,
    include_head: bool,
    out: *mut u64,
) -> SpafitStatus {
    guard(|| {
        let m = model_ref(model)?;
        let Some(spec) = m.store.plan() else {
            return fail(SpafitStatus::InvalidArgument, "no plan attached");
        };
        let plan = compile_plan(spec, m.store.config())?;
        *out_ptr(out)? = count_trainable(&plan, include_head);
        Ok(())
    })
}

/// Eval-mode logits for a `batch × seq` block of token ids.
///
/// `type_ids` and `mask` may be null (all zeros and all ones). `out` receives
/// `batch × num_labels` values and `out_len` must be at least that.
///
/// # Safety
/// Non-null arrays must hold `batch × seq` elements; `out` must hold `out_len`.
#[no_mangle]
pub unsafe extern "C" fn spafit_model_forward(
    model: *const SpafitModel,
    token_ids: *const u32,
    type_ids: *const u32,
    mask: *const u8,
    batch: usize,
    seq: usize,
    out: *mut f64,
    out_len: usize,
) -> SpafitStatus {
    guard(|| {
        let m = model_ref(model)?;
        let n = batch
            .checked_mul(seq)
            .ok_or_else(|| Failure(SpafitStatus::InvalidArgument, "batch × seq overflows".into()))?;
        if n == 0 {
            return fail(SpafitStatus::InvalidArgument, "empty batch");
        }
        let tokens = slice_arg(token_ids, n, "token_ids")?;
        let types = if type_ids.is_null() {
            vec![0; n]
        } else {
            slice_arg(type_ids, n, "type_ids")?.iter().map(|&t| t as usize).collect()
        };
        let mask = if mask.is_null() {
            None
        } else {
            Some(slice_arg(mask, n, "mask")?.iter().map(|&b| b != 0).collect())
        };
        let b = Batch::new(
            tokens.iter().map(|&t| t as usize).collect(),
            types,
            mask,
            batch,
            seq,
        )?;
        let need = batch * m.store.config().num_labels;
        if out_len < need {
            return fail(
                SpafitStatus::InvalidArgument,
                format!("output holds {out_len} values, need {need}"),
            );
        }
        if out.is_null() {
            return fail(SpafitStatus::NullPointer, "output pointer is null");
        }
        let logits = predict(&m.store, &b)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(logits.data());
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn spafit_model_save(
    model: *const SpafitModel,
    path: *const c_char,
) -> SpafitStatus {
    guard(|| {
        let m = model_ref(model)?;
        save_checkpoint(&m.store, &PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spafit_model_load(
    path: *const c_char,
    out: *mut *mut SpafitModel,
) -> SpafitStatus {
    guard(|| {
        let store = load_checkpoint(&PathBuf::from(str_arg(path, "path")?))?;
        emit_model(out, store)
    })
}

/// Write the trainable tensors of the attached plan as an adapter file.
///
/// # Safety
/// `model` must be a live handle and `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn spafit_model_export_adapter(
    model: *const SpafitModel,
    path: *const c_char,
) -> SpafitStatus {
    guard(|| {
        let m = model_ref(model)?;
        export_adapter(&m.store, &PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Replace the trainable tensors with an adapter's. The model is unchanged on failure.
///
/// # Safety
/// `model` must be a live handle and `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn spafit_model_swap_adapter(
    model: *mut SpafitModel,
    path: *const c_char,
) -> SpafitStatus {
    guard(|| {
        let m = model_mut(model)?;
        swap_adapter(&mut m.store, &PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

unsafe fn class_metric(
    pred: *const u32,
    gold: *const u32,
    n: usize,
    out: *mut f64,
    f: fn(&[usize], &[usize]) -> Result<f64, MetricError>,
) -> SpafitStatus {
    guard(|| {
        let p: Vec<usize> = slice_arg(pred, n, "pred")?.iter().map(|&v| v as usize).collect();
        let g: Vec<usize> = slice_arg(gold, n, "gold")?.iter().map(|&v| v as usize).collect();
        *out_ptr(out)? = f(&p, &g)?;
        Ok(())
    })
}

/// # Safety
/// `pred` and `gold` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spafit_accuracy(
    pred: *const u32,
    gold: *const u32,
    n: usize,
    out: *mut f64,
) -> SpafitStatus {
    class_metric(pred, gold, n, out, accuracy)
}

/// Binary F1 with class 1 positive.
///
/// # Safety
/// `pred` and `gold` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spafit_f1(
    pred: *const u32,
    gold: *const u32,
    n: usize,
    out: *mut f64,
) -> SpafitStatus {
    class_metric(pred, gold, n, out, f1_binary)
}

/// # Safety
/// `pred` and `gold` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spafit_mcc(
    pred: *const u32,
    gold: *const u32,
    n: usize,
    out: *mut f64,
) -> SpafitStatus {
    class_metric(pred, gold, n, out, matthews_corr)
}

/// # Safety
/// `pred` and `gold` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spafit_pearson(
    pred: *const f64,
    gold: *const f64,
    n: usize,
    out: *mut f64,
) -> SpafitStatus {
    guard(|| {
        let p = slice_arg(pred, n, "pred")?;
        let g = slice_arg(gold, n, "gold")?;
        *out_ptr(out)? = pearson_corr(p, g)?;
        Ok(())
    })
}
