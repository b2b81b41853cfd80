//! C ABI over `pit-core`: opaque model handles, status codes and a per-thread last
//! error message. Every entry point catches panics.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use pit_core::config::RunConfig;
use pit_core::data::Split;
use pit_core::geometry::Mesh;
use pit_core::model::PiTModel;
use pit_core::{PitError, Tensor2};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    NonFinite = 6,
    Runtime = 7,
    Panic = 8,
}

/// Opaque trained or freshly built model.
pub struct PitModel {
    inner: PiTModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &PitError) -> PitStatus {
    match e {
        PitError::Shape { .. } => PitStatus::Shape,
        PitError::InvalidArgument(_) | PitError::InvalidConfig(_) | PitError::ConfigKey { .. } => {
            PitStatus::InvalidArgument
        }
        PitError::Io(_) => PitStatus::Io,
        PitError::Format(_) => PitStatus::Format,
        PitError::NonFinite(_) => PitStatus::NonFinite,
        _ => PitStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (PitStatus, String)>) -> PitStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PitStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            PitStatus::Panic
        }
    }
}

fn lift<T>(r: pit_core::Result<T>) -> Result<T, (PitStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (PitStatus, String) {
    (PitStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (PitStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (PitStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const PitModel) -> Result<&'a PiTModel, (PitStatus, String)> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

/// Message for the most recent failure on this thread, or null. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds an untrained model from run-config text (`key = value` lines) on the
/// configured task's input mesh.
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pit_model_from_config(config: *const c_char, out: *mut *mut PitModel) -> PitStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = lift(RunConfig::parse(str_arg(config, "config")?))?;
        let (mesh, _) = lift(cfg.task.meshes(cfg.task.resolution, cfg.task.output_resolution))?;
        let inner = lift(PiTModel::build_for(cfg.model.clone(), &mesh, cfg.seed))?;
        *out = Box::into_raw(Box::new(PitModel { inner }));
        Ok(())
    })
}

/// Loads a checkpoint written by `pit_model_save` or the `pit train` command.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pit_model_load(path: *const c_char, out: *mut *mut PitModel) -> PitStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = lift(PiTModel::load(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(PitModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pit_model_save(model: *const PitModel, path: *const c_char) -> PitStatus {
    guard(|| {
        let m = model_ref(model)?;
        lift(m.save(str_arg(path, "path")?))
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pit_model_free(model: *mut PitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pit_model_param_count(model: *const PitModel, out: *mut usize) -> PitStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.count_params();
        Ok(())
    })
}

/// Spatial dimension, input channels and output channels of the model.
///
/// # Safety
/// `model` must come from this library; each out pointer must be valid.
#[no_mangle]
pub unsafe extern "C" fn pit_model_shape(
    model: *const PitModel,
    dim: *mut usize,
    input_channels: *mut usize,
    output_channels: *mut usize,
) -> PitStatus {
    guard(|| {
        let m = model_ref(model)?;
        if dim.is_null() || input_channels.is_null() || output_channels.is_null() {
            return Err(null("out"));
        }
        *dim = m.config.dim;
        *input_channels = m.config.input_channels;
        *output_channels = m.config.output_channels;
        Ok(())
    })
}

unsafe fn cloud(points: *const f64, n: usize, dim: usize, what: &str) -> Result<Mesh, (PitStatus, String)> {
    if points.is_null() {
        return Err(null(what));
    }
    let v = std::slice::from_raw_parts(points, n * dim).to_vec();
    lift(Tensor2::from_vec(n, dim, v).and_then(Mesh::point_cloud))
}

/// Evaluates the model on one sample given on arbitrary input points and returns
/// predictions at arbitrary query points. Arrays are row-major: `input` is
/// `n_input x input_channels`, `input_points` is `n_input x dim`, `query_points` is
/// `n_query x dim` and `output` receives `n_query x output_channels` values
/// (`output_len` must equal that product).
///
/// # Safety
/// All pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn pit_model_predict(
    model: *const PitModel,
    input: *const f64,
    input_points: *const f64,
    n_input: usize,
    query_points: *const f64,
    n_query: usize,
    output: *mut f64,
    output_len: usize,
) -> PitStatus {
    guard(|| {
        let m = model_ref(model)?;
        let c = &m.config;
        if input.is_null() || output.is_null() {
            return Err(null("input or output"));
        }
        if output_len != n_query * c.output_channels {
            return Err((
                PitStatus::Shape,
                format!(
                    "output buffer holds {output_len} values, need {}",
                    n_query * c.output_channels
                ),
            ));
        }
        let xa = cloud(input_points, n_input, c.dim, "input_points")?;
        let xq = cloud(query_points, n_query, c.dim, "query_points")?;
        let a = std::slice::from_raw_parts(input, n_input * c.input_channels).to_vec();
        let a = lift(Tensor2::from_vec(n_input, c.input_channels, a))?;
        let y = lift(m.predict(&a, &xa, &xq))?;
        std::slice::from_raw_parts_mut(output, output_len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Number of position-attention heads, i.e. the length `pit_model_lambda_report`
/// fills.
///
/// # Safety
/// `model` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pit_model_lambda_count(model: *const PitModel, out: *mut usize) -> PitStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.lambda_report().len();
        Ok(())
    })
}

/// Writes effective λ and radius `1/sqrt(λ)` per head, in layer order.
///
/// # Safety
/// `lambda` and `radius` must each hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn pit_model_lambda_report(
    model: *const PitModel,
    lambda: *mut f64,
    radius: *mut f64,
    len: usize,
) -> PitStatus {
    guard(|| {
        let m = model_ref(model)?;
        let rep = m.lambda_report();
        if len != rep.len() {
            return Err((
                PitStatus::Shape,
                format!("buffers hold {len} entries, need {}", rep.len()),
            ));
        }
        if lambda.is_null() || radius.is_null() {
            return Err(null("lambda or radius"));
        }
        let (l, r) = (
            std::slice::from_raw_parts_mut(lambda, len),
            std::slice::from_raw_parts_mut(radius, len),
        );
        for (i, h) in rep.iter().enumerate() {
            l[i] = h.lambda;
            r[i] = h.radius;
        }
        Ok(())
    })
}

/// Mean relative l2 error of the model on the test split generated from run-config
/// text, at the configured resolutions.
///
/// # Safety
/// `model` must come from this library, `config` must be NUL-terminated and `out`
/// valid.
#[no_mangle]
pub unsafe extern "C" fn pit_model_evaluate(model: *const PitModel, config: *const c_char, out: *mut f64) -> PitStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = lift(RunConfig::parse(str_arg(config, "config")?))?;
        let ds = lift(cfg.task.generate(Split::Test))?;
        *out = lift(pit_core::training::evaluate(
            m,
            &ds,
            pit_core::training::Metric::RelL2Mean,
        ))?;
        Ok(())
    })
}
