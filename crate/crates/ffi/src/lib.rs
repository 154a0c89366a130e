//! C interface to `dlrm-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! style functions and released with the matching `*_free`. Every fallible
//! call returns a [`DlrmStatus`]; on failure the message is kept per thread
//! and can be copied out with [`dlrm_last_error_message`]. Panics are caught
//! at the boundary and reported as [`DlrmStatus::Panic`].
//!
//! Sizes and counts are `size_t`, access ids are `uint64_t`, and matrices are
//! dense row-major `double` buffers.
//!
//! # Safety
//!
//! For every function: pointer arguments are either null (reported as
//! [`DlrmStatus::NullPointer`] where a value is required) or valid for the
//! stated number of elements; handles come from this library and are not
//! used after being freed; a handle is not used from two threads at once.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use dlrm_core::datagen::{
    adjust_distribution, default_first_touch_threshold, generate_trace, lru_hit_rate, profile_trace,
    total_variation, TraceProfile,
};
use dlrm_core::embedding::offsets_from_lengths;
use dlrm_core::model::Interaction;
use dlrm_core::profile::Profiler;
use dlrm_core::{checkpoint, train, Batch, DlrmConfig, Error, Matrix, ModelOptimizer, Optimizer, RngStream, SparseBatch};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DlrmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    ShapeMismatch = 4,
    IndexOutOfRange = 5,
    Io = 6,
    Parse = 7,
    /// A call needed state the handle does not have yet, such as training
    /// without an optimizer.
    InvalidState = 8,
    Panic = 99,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DlrmOptimizerKind {
    Sgd = 0,
    Adagrad = 1,
}

/// Model shape. Arrays are borrowed for the duration of the call only.
#[repr(C)]
pub struct DlrmConfigDesc {
    pub embedding_sizes: *const usize,
    pub num_tables: usize,
    pub sparse_dim: usize,
    /// Bottom MLP widths including the dense input width.
    pub bottom_mlp: *const usize,
    pub bottom_len: usize,
    /// Top MLP layer widths; the input width is derived. Must end in 1.
    pub top_mlp: *const usize,
    pub top_len: usize,
    pub seed: u64,
}

/// One table's lookups for a batch: `batch + 1` offsets into `indices`.
#[repr(C)]
pub struct DlrmSparseInput {
    pub offsets: *const usize,
    pub offsets_len: usize,
    pub indices: *const usize,
    pub indices_len: usize,
}

/// A model plus, once configured, its optimizer state.
pub struct DlrmModel {
    model: dlrm_core::DlrmModel,
    optimizer: Option<ModelOptimizer>,
}

pub struct DlrmTraceProfile {
    profile: TraceProfile,
}

struct Failure {
    status: DlrmStatus,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            status: status_of(&e),
            message: e.to_string(),
        }
    }
}

fn fail(status: DlrmStatus, message: impl Into<String>) -> Failure {
    Failure {
        status,
        message: message.into(),
    }
}

fn status_of(e: &Error) -> DlrmStatus {
    match e {
        Error::Stage { source, .. } | Error::Device { source, .. } => status_of(source),
        Error::ShapeMismatch { .. } | Error::LengthMismatch { .. } => DlrmStatus::ShapeMismatch,
        Error::IndexOutOfRange { .. } => DlrmStatus::IndexOutOfRange,
        Error::InvalidBatch(_) | Error::InvalidArgument(_) => DlrmStatus::InvalidArgument,
        Error::Config(_) => DlrmStatus::InvalidConfig,
        Error::StaleCache(_) => DlrmStatus::InvalidState,
        Error::Parse { .. } => DlrmStatus::Parse,
        Error::Io { .. } => DlrmStatus::Io,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_last_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DlrmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(String::new());
            DlrmStatus::Ok
        }
        Ok(Err(failure)) => {
            set_last_error(failure.message);
            failure.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(format!("panic: {msg}"));
            DlrmStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(DlrmStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(DlrmStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(DlrmStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(DlrmStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(DlrmStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path_in(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(DlrmStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DlrmStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn config_in(desc: *const DlrmConfigDesc) -> Result<DlrmConfig, Failure> {
    let d = handle(desc, "config")?;
    let config = DlrmConfig {
        embedding_sizes: slice_in(d.embedding_sizes, d.num_tables, "embedding_sizes")?.to_vec(),
        sparse_dim: d.sparse_dim,
        bottom_mlp: slice_in(d.bottom_mlp, d.bottom_len, "bottom_mlp")?.to_vec(),
        top_mlp: slice_in(d.top_mlp, d.top_len, "top_mlp")?.to_vec(),
        interaction: Interaction::Dot,
        seed: d.seed,
    };
    config.validate()?;
    Ok(config)
}

unsafe fn batch_in(
    model: &dlrm_core::DlrmModel,
    dense: *const f64,
    batch_size: usize,
    sparse: *const DlrmSparseInput,
    num_tables: usize,
    labels: Option<*const f64>,
) -> Result<Batch, Failure> {
    let dim = model.config.dense_dim();
    let dense = Matrix::new(batch_size, dim, slice_in(dense, batch_size * dim, "dense")?.to_vec())?;
    let mut tables = Vec::with_capacity(num_tables);
    for (t, s) in slice_in(sparse, num_tables, "sparse")?.iter().enumerate() {
        let offsets = slice_in(s.offsets, s.offsets_len, "offsets")?.to_vec();
        let indices = slice_in(s.indices, s.indices_len, "indices")?.to_vec();
        let b = SparseBatch::new(offsets, indices, None)?;
        b.validate(t, model.config.embedding_sizes.get(t).copied().unwrap_or(0))?;
        tables.push(b);
    }
    let labels = match labels {
        Some(p) => slice_in(p, batch_size, "labels")?.to_vec(),
        None => vec![0.0; batch_size],
    };
    Ok(Batch {
        dense,
        sparse: tables,
        labels,
    })
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to fit) and returns the full message length in
/// bytes, excluding the terminator. Pass a null `buf` to query the length.
/// The message is empty after a successful call.
#[no_mangle]
pub unsafe extern "C" fn dlrm_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Writes `n + 1` prefix sums of `lengths` (leading 0) to `offsets_out`.
#[no_mangle]
pub unsafe extern "C" fn dlrm_offsets_from_lengths(
    lengths: *const usize,
    n: usize,
    offsets_out: *mut usize,
) -> DlrmStatus {
    guard(|| {
        let lengths = slice_in(lengths, n, "lengths")?;
        let out = slice_out(offsets_out, n + 1, "offsets_out")?;
        out.copy_from_slice(&offsets_from_lengths(lengths));
        Ok(())
    })
}

/// Parameter count of a configuration, computed from the shapes alone.
#[no_mangle]
pub unsafe extern "C" fn dlrm_config_param_count(config: *const DlrmConfigDesc, out: *mut u64) -> DlrmStatus {
    guard(|| {
        let c = config_in(config)?;
        *out_ref(out, "out")? = c.param_count();
        Ok(())
    })
}

/// Embedding parameters only, computed from the shapes alone.
#[no_mangle]
pub unsafe extern "C" fn dlrm_config_embedding_param_count(
    config: *const DlrmConfigDesc,
    out: *mut u64,
) -> DlrmStatus {
    guard(|| {
        let c = config_in(config)?;
        *out_ref(out, "out")? = dlrm_core::model::embedding_param_count(&c);
        Ok(())
    })
}

/// Randomly initialized model from `config`.
#[no_mangle]
pub unsafe extern "C" fn dlrm_model_new(config: *const DlrmConfigDesc, out: *mut *mut DlrmModel) -> DlrmStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let model = dlrm_core::DlrmModel::new(config_in(config)?)?;
        *out = Box::into_raw(Box::new(DlrmModel {
            model,
            optimizer: None,
        }));
        Ok(())
    })
}

/// Reads a checkpoint written by [`dlrm_model_save`] or the `dlrm` binary.
#[no_mangle]
pub unsafe extern "C" fn dlrm_model_load(path: *const c_char, out: *mut *mut DlrmModel) -> DlrmStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let model = checkpoint::load(path_in(path)?)?;
        *out = Box::into_raw(Box::new(DlrmModel {
            model,
            optimizer: None,
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dlrm_model_save(model: *const DlrmModel, path: *const c_char) -> DlrmStatus {
    guard(|| {
        let m = handle(model, "model")?;
        checkpoint::save(&m.model, path_in(path)?)?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dlrm_model_free(model: *mut DlrmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn dlrm_model_param_count(model: *const DlrmModel, out: *mut u64) -> DlrmStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out_ref(out, "out")? = m.model.param_count() as u64;
        Ok(())
    })
}

/// Width of the dense input each sample must provide.
#[no_mangle]
pub unsafe extern "C" fn dlrm_model_dense_dim(model: *const DlrmModel, out: *mut usize) -> DlrmStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out_ref(out, "out")? = m.model.config.dense_dim();
        Ok(())
    })
}

/// Copies every parameter (bottom MLP, top MLP, then tables) into `out`,
/// which must hold exactly the parameter count.
#[no_mangle]
pub unsafe extern "C" fn dlrm_model_params(model: *const DlrmModel, out: *mut f64, len: usize) -> DlrmStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let params = m.model.flat_params();
        if params.len() != len {
            return Err(fail(
                DlrmStatus::ShapeMismatch,
                format!("model has {} parameters, buffer holds {len}", params.len()),
            ));
        }
        slice_out(out, len, "out")?.copy_from_slice(&params);
        Ok(())
    })
}

/// Click probabilities for `batch_size` samples. `dense` is
/// `batch_size × dense_dim` row-major; `sparse` holds one entry per table.
#[no_mangle]
pub unsafe extern "C" fn dlrm_model_forward(
    model: *const DlrmModel,
    dense: *const f64,
    batch_size: usize,
    sparse: *const DlrmSparseInput,
    num_tables: usize,
    probs_out: *mut f64,
) -> DlrmStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let b = batch_in(&m.model, dense, batch_size, sparse, num_tables, None)?;
        let probs = m.model.predict(&b.dense, &b.sparse)?;
        slice_out(probs_out, batch_size, "probs_out")?.copy_from_slice(&probs);
        Ok(())
    })
}

/// Attaches a fresh optimizer, discarding any previous state.
#[no_mangle]
pub unsafe extern "C" fn dlrm_model_set_optimizer(
    model: *mut DlrmModel,
    kind: DlrmOptimizerKind,
    learning_rate: f64,
) -> DlrmStatus {
    guard(|| {
        let m = handle_mut(model, "model")?;
        let opt = match kind {
            DlrmOptimizerKind::Sgd => Optimizer::sgd(learning_rate),
            DlrmOptimizerKind::Adagrad => Optimizer::adagrad(learning_rate),
        };
        m.optimizer = Some(ModelOptimizer::new(opt, &m.model)?);
        Ok(())
    })
}

/// One forward, backward and update step. Labels are 0 or 1. The mean
/// binary cross-entropy before the update goes to `loss_out` if non-null.
#[no_mangle]
pub unsafe extern "C" fn dlrm_model_train_step(
    model: *mut DlrmModel,
    dense: *const f64,
    batch_size: usize,
    sparse: *const DlrmSparseInput,
    num_tables: usize,
    labels: *const f64,
    loss_out: *mut f64,
) -> DlrmStatus {
    guard(|| {
        let m = handle_mut(model, "model")?;
        let b = batch_in(&m.model, dense, batch_size, sparse, num_tables, Some(labels))?;
        let opt = m
            .optimizer
            .as_mut()
            .ok_or_else(|| fail(DlrmStatus::InvalidState, "no optimizer set; call dlrm_model_set_optimizer"))?;
        let stats = train::train_step(&mut m.model, opt, &b, &mut Profiler::disabled())?;
        if let Some(l) = loss_out.as_mut() {
            *l = stats.loss;
        }
        Ok(())
    })
}

/// Stack-distance profile of an access trace.
#[no_mangle]
pub unsafe extern "C" fn dlrm_profile_trace(
    trace: *const u64,
    len: usize,
    out: *mut *mut DlrmTraceProfile,
) -> DlrmStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let profile = profile_trace(slice_in(trace, len, "trace")?);
        *out = Box::into_raw(Box::new(DlrmTraceProfile { profile }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dlrm_profile_load(path: *const c_char, out: *mut *mut DlrmTraceProfile) -> DlrmStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let profile = TraceProfile::load(path_in(path)?)?;
        *out = Box::into_raw(Box::new(DlrmTraceProfile { profile }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dlrm_profile_save(profile: *const DlrmTraceProfile, path: *const c_char) -> DlrmStatus {
    guard(|| {
        handle(profile, "profile")?.profile.save(path_in(path)?)?;
        Ok(())
    })
}

/// Releases a profile. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dlrm_profile_free(profile: *mut DlrmTraceProfile) {
    if !profile.is_null() {
        drop(Box::from_raw(profile));
    }
}

#[no_mangle]
pub unsafe extern "C" fn dlrm_profile_num_unique(profile: *const DlrmTraceProfile, out: *mut usize) -> DlrmStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(profile, "profile")?.profile.unique().len();
        Ok(())
    })
}

/// Probability of stack distance `distance`; 0 marks a first touch.
#[no_mangle]
pub unsafe extern "C" fn dlrm_profile_probability(
    profile: *const DlrmTraceProfile,
    distance: usize,
    out: *mut f64,
) -> DlrmStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(profile, "profile")?.profile.probability(distance);
        Ok(())
    })
}

/// First-touch probability used by default when synthesizing a trace of
/// `target_length` accesses from `profile`.
#[no_mangle]
pub unsafe extern "C" fn dlrm_profile_default_threshold(
    profile: *const DlrmTraceProfile,
    target_length: usize,
    out: *mut f64,
) -> DlrmStatus {
    guard(|| {
        *out_ref(out, "out")? = default_first_touch_threshold(&handle(profile, "profile")?.profile, target_length);
        Ok(())
    })
}

/// New profile whose first-touch probability is raised to at least
/// `min_first_touch`, the rest rescaled to keep a total of 1.
#[no_mangle]
pub unsafe extern "C" fn dlrm_profile_adjust(
    profile: *const DlrmTraceProfile,
    min_first_touch: f64,
    out: *mut *mut DlrmTraceProfile,
) -> DlrmStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let profile = adjust_distribution(&handle(profile, "profile")?.profile, min_first_touch)?;
        *out = Box::into_raw(Box::new(DlrmTraceProfile { profile }));
        Ok(())
    })
}

/// Total-variation distance between two distance distributions.
#[no_mangle]
pub unsafe extern "C" fn dlrm_profile_total_variation(
    p: *const DlrmTraceProfile,
    q: *const DlrmTraceProfile,
    out: *mut f64,
) -> DlrmStatus {
    guard(|| {
        *out_ref(out, "out")? = total_variation(&handle(p, "p")?.profile, &handle(q, "q")?.profile);
        Ok(())
    })
}

/// Writes `length` synthetic accesses drawn from `profile` to `trace_out`.
#[no_mangle]
pub unsafe extern "C" fn dlrm_generate_trace(
    profile: *const DlrmTraceProfile,
    length: usize,
    seed: u64,
    trace_out: *mut u64,
) -> DlrmStatus {
    guard(|| {
        let p = handle(profile, "profile")?;
        let out = slice_out(trace_out, length, "trace_out")?;
        out.copy_from_slice(&generate_trace(&p.profile, length, RngStream::new(seed))?);
        Ok(())
    })
}

/// Hit rate of an LRU cache holding `capacity` ids over `trace`.
#[no_mangle]
pub unsafe extern "C" fn dlrm_lru_hit_rate(
    trace: *const u64,
    len: usize,
    capacity: usize,
    out: *mut f64,
) -> DlrmStatus {
    guard(|| {
        *out_ref(out, "out")? = lru_hit_rate(slice_in(trace, len, "trace")?, capacity);
        Ok(())
    })
}
