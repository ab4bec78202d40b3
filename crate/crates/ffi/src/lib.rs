//! C interface to `ddeq`.
//!
//! Every fallible function returns a [`DdeqStatus`]; on failure the message is
//! available from [`ddeq_last_error`] on the same thread. Point clouds are
//! passed as row-major `double` buffers of `rows × dim` values. Models are
//! opaque handles created by [`ddeq_model_new`] or [`ddeq_model_load`] and
//! released with [`ddeq_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use ddeq::diagnostics::w2_distance;
use ddeq::kernel::{mmd_sq, KernelSpec};
use ddeq::measure::{derive_seed, DiscreteMeasure, TaskKind};
use ddeq::net::{init_params, ModelConfig, ModelParams};
use ddeq::solver::FlowConfig;
use ddeq::train::{latent_init, predict, PreparedSample, SampleInputs, Target, TrainConfig};
use ddeq::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdeqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Config = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Kernel selector for [`ddeq_mmd_sq`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdeqKernel {
    Riesz = 0,
    Gaussian = 1,
}

/// Inner-loop and latent settings for inference.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdeqSolveOptions {
    pub iterations: usize,
    pub step_size: f64,
    pub step_decay: f64,
    /// Latent particle count for classification.
    pub latent_particles: usize,
    /// Free particles added for completion, as a fraction of the input count.
    pub free_fraction: f64,
    pub seed: u64,
}

/// Opaque model handle.
pub struct DdeqModel {
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DdeqStatus {
    match e {
        Error::DimensionMismatch { .. } | Error::Shape(_) | Error::OddLatentDim(_) | Error::NotScalarOutput(_) => {
            DdeqStatus::Shape
        }
        Error::Io { .. } | Error::Parse { .. } => DdeqStatus::Io,
        Error::Config(_) | Error::Schema(_) | Error::MissingParam(_) => DdeqStatus::Config,
        Error::NonFiniteGradient { .. } | Error::AllTermsSkipped | Error::DegenerateSpread => DdeqStatus::Numeric,
        Error::AllMasked
        | Error::AllSourcesMasked
        | Error::EmptyPartial
        | Error::UnsupportedScale { .. } => DdeqStatus::InvalidArgument,
    }
}

struct Fail(DdeqStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail(status: DdeqStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

/// Runs `f`, records any error or panic, and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DdeqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DdeqStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            DdeqStatus::Panic
        }
    }
}

unsafe fn cloud(ptr: *const f64, rows: usize, dim: usize, what: &str) -> Result<DiscreteMeasure, Fail> {
    if ptr.is_null() {
        return Err(fail(DdeqStatus::NullPointer, format!("{what} is NULL")));
    }
    if rows == 0 || dim == 0 {
        return Err(fail(DdeqStatus::InvalidArgument, format!("{what} has {rows} rows of dimension {dim}")));
    }
    let data = slice::from_raw_parts(ptr, rows * dim).to_vec();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(fail(DdeqStatus::InvalidArgument, format!("{what} contains non-finite values")));
    }
    Ok(DiscreteMeasure::new(Tensor::from_vec(&[rows, dim], data)?)?)
}

unsafe fn path_arg(path: *const c_char) -> Result<String, Fail> {
    if path.is_null() {
        return Err(fail(DdeqStatus::NullPointer, "path is NULL"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(str::to_string)
        .map_err(|_| fail(DdeqStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn model_ref<'a>(model: *const DdeqModel) -> Result<&'a DdeqModel, Fail> {
    model.as_ref().ok_or_else(|| fail(DdeqStatus::NullPointer, "model is NULL"))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ddeq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ddeq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Defaults used by the command-line tools.
#[no_mangle]
pub extern "C" fn ddeq_solve_options_default() -> DdeqSolveOptions {
    let t = TrainConfig::default();
    DdeqSolveOptions {
        iterations: 50,
        step_size: t.flow.step_size,
        step_decay: t.flow.step_decay,
        latent_particles: t.latent_particles,
        free_fraction: t.free_fraction,
        seed: 0,
    }
}

/// Squared MMD between two uniform clouds.
///
/// # Safety
/// `x` must point to `n * dim` doubles and `y` to `m * dim` doubles; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn ddeq_mmd_sq(
    x: *const f64,
    n: usize,
    y: *const f64,
    m: usize,
    dim: usize,
    kernel: DdeqKernel,
    sigma: f64,
    out: *mut f64,
) -> DdeqStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(DdeqStatus::NullPointer, "out is NULL"));
        }
        let (a, b) = (cloud(x, n, dim, "x")?, cloud(y, m, dim, "y")?);
        let k = match kernel {
            DdeqKernel::Riesz => KernelSpec::Riesz,
            DdeqKernel::Gaussian => KernelSpec::gaussian(sigma)?,
        };
        *out = mmd_sq(&k, &a, &b)?;
        Ok(())
    })
}

/// Exact 2-Wasserstein distance between two uniform clouds.
///
/// # Safety
/// As for [`ddeq_mmd_sq`].
#[no_mangle]
pub unsafe extern "C" fn ddeq_w2_distance(
    x: *const f64,
    n: usize,
    y: *const f64,
    m: usize,
    dim: usize,
    out: *mut f64,
) -> DdeqStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(DdeqStatus::NullPointer, "out is NULL"));
        }
        *out = w2_distance(&cloud(x, n, dim, "x")?, &cloud(y, m, dim, "y")?)?;
        Ok(())
    })
}

/// Freshly initialized desk-size model. `num_classes > 0` adds a
/// classification head; `coupling` adds the completion coupling layer.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ddeq_model_new(
    data_dim: usize,
    num_classes: usize,
    coupling: bool,
    seed: u64,
    out: *mut *mut DdeqModel,
) -> DdeqStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(DdeqStatus::NullPointer, "out is NULL"));
        }
        let mut cfg = ModelConfig::desk(data_dim).with_classes(num_classes);
        cfg.coupling = coupling;
        let params = init_params(&cfg, seed)?;
        *out = Box::into_raw(Box::new(DdeqModel { params }));
        Ok(())
    })
}

/// Loads a checkpoint written by the training commands.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ddeq_model_load(path: *const c_char, out: *mut *mut DdeqModel) -> DdeqStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(DdeqStatus::NullPointer, "out is NULL"));
        }
        let params = ModelParams::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(DdeqModel { params }));
        Ok(())
    })
}

/// Writes the model as a checkpoint.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ddeq_model_save(model: *const DdeqModel, path: *const c_char) -> DdeqStatus {
    guard(|| {
        model_ref(model)?.params.save(path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ddeq_model_free(model: *mut DdeqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input dimension of the model, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ddeq_model_data_dim(model: *const DdeqModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.config.data_dim)
}

/// Number of classes of the head (0 without one), or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ddeq_model_num_classes(model: *const DdeqModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.config.num_classes)
}

fn train_config(task: TaskKind, opts: &DdeqSolveOptions) -> Result<TrainConfig, Fail> {
    let cfg = TrainConfig {
        task,
        latent_particles: opts.latent_particles,
        free_fraction: opts.free_fraction,
        flow: FlowConfig {
            iterations: opts.iterations,
            step_size: opts.step_size,
            step_decay: opts.step_decay,
            record_every: 0,
            ..FlowConfig::default()
        },
        seed: opts.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    if task == TaskKind::Classify && opts.latent_particles == 0 {
        return Err(fail(DdeqStatus::InvalidArgument, "latent_particles must be at least 1"));
    }
    Ok(cfg)
}

unsafe fn inference_inputs(
    model: &DdeqModel,
    x: *const f64,
    m: usize,
    dim: usize,
    opts: *const DdeqSolveOptions,
    task: TaskKind,
) -> Result<(PreparedSample, TrainConfig, SampleInputs), Fail> {
    let opts = match opts.as_ref() {
        Some(o) => *o,
        None => ddeq_solve_options_default(),
    };
    if dim != model.params.config.data_dim {
        return Err(fail(
            DdeqStatus::Shape,
            format!("input dimension {dim} does not match the model's {}", model.params.config.data_dim),
        ));
    }
    let input = cloud(x, m, dim, "x")?;
    let cfg = train_config(task, &opts)?;
    let target = match task {
        TaskKind::Classify => Target::Class(0),
        TaskKind::Complete => Target::Cloud(input.clone()),
    };
    let sample = PreparedSample {
        id: "ffi".into(),
        input,
        target,
        removed: None,
    };
    let (z0, pins) = latent_init(&sample, &model.params, &cfg, derive_seed(opts.seed, &[0]))?;
    let inputs = SampleInputs::new(&sample, z0, pins);
    Ok((sample, cfg, inputs))
}

/// Class logits for one cloud. `logits` must hold `logits_len` doubles, at
/// least the model's class count. `opts` may be NULL for the defaults.
///
/// # Safety
/// `model` must be a live handle, `x` must point to `m * dim` doubles and
/// `logits` to `logits_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ddeq_classify(
    model: *const DdeqModel,
    x: *const f64,
    m: usize,
    dim: usize,
    opts: *const DdeqSolveOptions,
    logits: *mut f64,
    logits_len: usize,
) -> DdeqStatus {
    guard(|| {
        let model = model_ref(model)?;
        let (sample, cfg, inputs) = inference_inputs(model, x, m, dim, opts, TaskKind::Classify)?;
        let c = model.params.config.num_classes;
        if c == 0 {
            return Err(fail(DdeqStatus::InvalidArgument, "model has no classification head"));
        }
        if logits.is_null() {
            return Err(fail(DdeqStatus::NullPointer, "logits is NULL"));
        }
        if logits_len < c {
            return Err(fail(DdeqStatus::BufferTooSmall, format!("logits buffer holds {logits_len}, need {c}")));
        }
        let (_, head, _) = predict(&model.params, &cfg, &inputs, &sample.target)?;
        slice::from_raw_parts_mut(logits, c).copy_from_slice(head.data());
        Ok(())
    })
}

/// Completes one partial cloud. The prediction starts with the `m` input
/// particles followed by the free ones; `*out_rows` receives the row count.
/// When `out` is NULL or too small, only `*out_rows` is set and
/// `DDEQ_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `model` must be a live handle, `x` must point to `m * dim` doubles, `out`
/// to `out_capacity` writable doubles (or be NULL), and `out_rows` writable.
#[no_mangle]
pub unsafe extern "C" fn ddeq_complete(
    model: *const DdeqModel,
    x: *const f64,
    m: usize,
    dim: usize,
    opts: *const DdeqSolveOptions,
    out: *mut f64,
    out_capacity: usize,
    out_rows: *mut usize,
) -> DdeqStatus {
    guard(|| {
        if out_rows.is_null() {
            return Err(fail(DdeqStatus::NullPointer, "out_rows is NULL"));
        }
        let model = model_ref(model)?;
        let (sample, cfg, inputs) = inference_inputs(model, x, m, dim, opts, TaskKind::Complete)?;
        if !model.params.config.coupling {
            return Err(fail(DdeqStatus::InvalidArgument, "model has no coupling layer"));
        }
        let rows = inputs.z0.rows();
        *out_rows = rows;
        if out.is_null() || out_capacity < rows * dim {
            return Err(fail(
                DdeqStatus::BufferTooSmall,
                format!("output buffer holds {out_capacity} values, need {}", rows * dim),
            ));
        }
        let (_, pred, _) = predict(&model.params, &cfg, &inputs, &sample.target)?;
        slice::from_raw_parts_mut(out, rows * dim).copy_from_slice(pred.data());
        Ok(())
    })
}
