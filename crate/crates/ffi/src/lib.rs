//! C interface to the tractography engine.
//!
//! Objects cross the boundary as opaque handles created by a producing call
//! (`tractory_phantom_preset`, `tractory_model_load`, ...) and released with
//! the matching `*_free`. Every
//! fallible function returns a [`TractoryStatus`]; on failure the message is
//! kept per thread and can be copied out with [`tractory_last_error`].
//! Configuration travels as JSON text in the same schema the command line
//! reads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use tractory::evalmod::MaskRule;
use tractory::fixel::{FixelConfig, FixelMap};
use tractory::learn::{load_checkpoint, save_checkpoint, DirectionModel};
use tractory::phantom::{generate, PhantomDataset, PhantomSpec};
use tractory::pipeline::{self, RunConfig};
use tractory::tracker::{TrackerConfig, Tractogram};
use tractory::Error;

/// Result of every fallible call. Values from 10 upward mirror the command
/// line's exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TractoryStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Panic = 4,
    Io = 10,
    MissingFile = 11,
    Format = 12,
    UnsupportedType = 13,
    Estimation = 14,
    Checkpoint = 15,
    Schema = 16,
    Shape = 17,
    InvalidArgument = 18,
    NonFinite = 19,
    Json = 20,
}

impl From<&Error> for TractoryStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => TractoryStatus::Io,
            Error::MissingFile(_) => TractoryStatus::MissingFile,
            Error::Format(_) => TractoryStatus::Format,
            Error::UnsupportedType(_) => TractoryStatus::UnsupportedType,
            Error::Estimation(_) => TractoryStatus::Estimation,
            Error::Checkpoint(_) => TractoryStatus::Checkpoint,
            Error::Schema(_) => TractoryStatus::Schema,
            Error::Shape(_) => TractoryStatus::Shape,
            Error::InvalidArgument(_) => TractoryStatus::InvalidArgument,
            Error::NonFinite(_) => TractoryStatus::NonFinite,
            Error::Json(_) => TractoryStatus::Json,
        }
    }
}

/// A generated or loaded phantom dataset.
pub struct TractoryPhantom(PhantomDataset);

/// A per-voxel fixel map, typically a population atlas.
pub struct TractoryFixels(FixelMap);

/// A trained (or randomly initialised) direction model.
pub struct TractoryModel(DirectionModel);

/// The output of one tracking run.
pub struct TractoryTractogram(Tractogram);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(TractoryStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(TractoryStatus::from(&e), e.to_string())
    }
}

fn set_error(msg: String) {
    LAST_ERROR.with(|l| *l.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TractoryStatus {
    set_error(String::new());
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TractoryStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            TractoryStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(
            TractoryStatus::NullPointer,
            format!("{what} is null"),
        ));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Failure(
            TractoryStatus::InvalidUtf8,
            format!("{what} is not valid UTF-8"),
        )
    })
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(TractoryStatus::NullPointer, format!("{what} is null")))
}

fn out_arg<T>(p: *mut *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(Failure(
            TractoryStatus::NullPointer,
            format!("{what} is null"),
        ));
    }
    Ok(())
}

/// Parses a run configuration; null means all defaults.
unsafe fn config_arg(p: *const c_char) -> Result<RunConfig, Failure> {
    match opt_str_arg(p, "config_json")? {
        Some(s) => Ok(RunConfig::from_json(s.as_bytes())?),
        None => Ok(RunConfig::default()),
    }
}

/// Copies `s` plus a terminating NUL into `buf`. `needed` (if non-null)
/// receives the full size including the NUL.
unsafe fn copy_out(
    s: &str,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> Result<(), Failure> {
    let n = s.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if buf.is_null() || len < n {
        return Err(Failure(
            TractoryStatus::BufferTooSmall,
            format!("buffer of {len} bytes, {n} needed"),
        ));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

fn boxed<T>(out: *mut *mut T, v: T) {
    unsafe { *out = Box::into_raw(Box::new(v)) };
}

/// NUL-terminated library version; static storage.
#[no_mangle]
pub extern "C" fn tractory_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the calling thread's last error message into `buf`. Writes an
/// empty string after a successful call.
///
/// # Safety
/// `buf` must point to `len` writable bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn tractory_last_error(
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> TractoryStatus {
    let msg = LAST_ERROR.with(|l| l.borrow().clone());
    match copy_out(&msg, buf, len, needed) {
        Ok(()) => TractoryStatus::Ok,
        Err(Failure(code, _)) => code,
    }
}

/// Sizes the global worker pool. Must precede any call that computes; fails
/// once the pool exists.
#[no_mangle]
pub extern "C" fn tractory_set_threads(n: usize) -> TractoryStatus {
    guard(|| {
        if n == 0 {
            return Err(Failure(
                TractoryStatus::InvalidArgument,
                "thread count must be >= 1".into(),
            ));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure(TractoryStatus::InvalidArgument, e.to_string()))
    })
}

/// Generates a phantom from a full `PhantomSpec` JSON document.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tractory_phantom_generate(
    spec_json: *const c_char,
    out: *mut *mut TractoryPhantom,
) -> TractoryStatus {
    guard(|| {
        out_arg(out, "out")?;
        let s = str_arg(spec_json, "spec_json")?;
        let spec: PhantomSpec =
            serde_json::from_str(s).map_err(|e| Error::Schema(e.to_string()))?;
        boxed(out, TractoryPhantom(generate(&spec)?));
        Ok(())
    })
}

/// Generates a named preset on a `dims`³ grid.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tractory_phantom_preset(
    name: *const c_char,
    dims: usize,
    seed: u64,
    noise_sigma: f64,
    out: *mut *mut TractoryPhantom,
) -> TractoryStatus {
    guard(|| {
        out_arg(out, "out")?;
        let mut spec = PhantomSpec::preset(str_arg(name, "name")?, [dims; 3], seed)?;
        spec.noise_sigma = noise_sigma;
        boxed(out, TractoryPhantom(generate(&spec)?));
        Ok(())
    })
}

/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tractory_phantom_load(
    dir: *const c_char,
    out: *mut *mut TractoryPhantom,
) -> TractoryStatus {
    guard(|| {
        out_arg(out, "out")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        boxed(out, TractoryPhantom(PhantomDataset::load(&dir)?));
        Ok(())
    })
}

/// # Safety
/// `phantom` must be a live handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn tractory_phantom_save(
    phantom: *const TractoryPhantom,
    dir: *const c_char,
) -> TractoryStatus {
    guard(|| {
        let p = ref_arg(phantom, "phantom")?;
        p.0.save(&PathBuf::from(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// Number of bundles, or 0 for a null handle.
///
/// # Safety
/// `phantom` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tractory_phantom_bundle_count(phantom: *const TractoryPhantom) -> usize {
    phantom.as_ref().map_or(0, |p| p.0.bundles.len())
}

/// # Safety
/// `phantom` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tractory_phantom_free(phantom: *mut TractoryPhantom) {
    if !phantom.is_null() {
        drop(Box::from_raw(phantom));
    }
}

fn phantom_list<'a>(
    phantoms: *const *const TractoryPhantom,
    n: usize,
) -> Result<Vec<&'a PhantomDataset>, Failure> {
    if phantoms.is_null() || n == 0 {
        return Err(Failure(
            TractoryStatus::NullPointer,
            "phantom list is null or empty".into(),
        ));
    }
    let ptrs = unsafe { std::slice::from_raw_parts(phantoms, n) };
    ptrs.iter()
        .map(|&p| unsafe { ref_arg(p, "phantom entry") }.map(|p| &p.0))
        .collect()
}

/// Fixel atlas from the reference streamlines of `n` phantoms on one grid.
/// `fixel_config_json` is a `FixelConfig` document or null for defaults.
///
/// # Safety
/// `phantoms` must point to `n` live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tractory_fixels_atlas(
    phantoms: *const *const TractoryPhantom,
    n: usize,
    fixel_config_json: *const c_char,
    out: *mut *mut TractoryFixels,
) -> TractoryStatus {
    guard(|| {
        out_arg(out, "out")?;
        let list = phantom_list(phantoms, n)?;
        let cfg: FixelConfig = match opt_str_arg(fixel_config_json, "fixel_config_json")? {
            Some(s) => serde_json::from_str(s).map_err(|e| Error::Schema(e.to_string()))?,
            None => FixelConfig::default(),
        };
        boxed(
            out,
            TractoryFixels(pipeline::population_atlas(&list, &cfg)?),
        );
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tractory_fixels_load(
    path: *const c_char,
    out: *mut *mut TractoryFixels,
) -> TractoryStatus {
    guard(|| {
        out_arg(out, "out")?;
        boxed(
            out,
            TractoryFixels(FixelMap::load(&PathBuf::from(str_arg(path, "path")?))?),
        );
        Ok(())
    })
}

/// Writes the 6-channel NIfTI at `path` plus its JSON support sidecar.
///
/// # Safety
/// `fixels` must be a live handle; `path` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn tractory_fixels_save(
    fixels: *const TractoryFixels,
    path: *const c_char,
) -> TractoryStatus {
    guard(|| {
        ref_arg(fixels, "fixels")?
            .0
            .save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `fixels` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tractory_fixels_free(fixels: *mut TractoryFixels) {
    if !fixels.is_null() {
        drop(Box::from_raw(fixels));
    }
}

/// Trains a model on `n` phantoms sharing `atlas`. Uses the `features` and
/// `train` sections of the run configuration (null for defaults).
///
/// # Safety
/// `phantoms` must point to `n` live handles, `atlas` must be live and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tractory_model_train(
    phantoms: *const *const TractoryPhantom,
    n: usize,
    atlas: *const TractoryFixels,
    config_json: *const c_char,
    out: *mut *mut TractoryModel,
) -> TractoryStatus {
    guard(|| {
        out_arg(out, "out")?;
        let list = phantom_list(phantoms, n)?;
        let atlas = ref_arg(atlas, "atlas")?;
        let cfg = config_arg(config_json)?;
        let (model, _) = pipeline::train_model(&list, &atlas.0, &cfg.features, &cfg.train)?;
        boxed(out, TractoryModel(model));
        Ok(())
    })
}

/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tractory_model_load(
    dir: *const c_char,
    out: *mut *mut TractoryModel,
) -> TractoryStatus {
    guard(|| {
        out_arg(out, "out")?;
        let (model, _) = load_checkpoint(&PathBuf::from(str_arg(dir, "dir")?))?;
        boxed(out, TractoryModel(model));
        Ok(())
    })
}

/// Writes a checkpoint directory. `provenance_json` is stored verbatim in
/// the manifest; null stores `null`.
///
/// # Safety
/// `model` must be a live handle; strings NUL-terminated or null where
/// allowed.
#[no_mangle]
pub unsafe extern "C" fn tractory_model_save(
    model: *const TractoryModel,
    dir: *const c_char,
    provenance_json: *const c_char,
) -> TractoryStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let prov = match opt_str_arg(provenance_json, "provenance_json")? {
            Some(s) => serde_json::from_str(s).map_err(Error::from)?,
            None => serde_json::Value::Null,
        };
        save_checkpoint(&m.0, &PathBuf::from(str_arg(dir, "dir")?), prov)?;
        Ok(())
    })
}

/// Length of the model's feature vector, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tractory_model_feature_len(model: *const TractoryModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.features.feature_len())
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tractory_model_free(model: *mut TractoryModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Whole-brain tracking on `phantom`. A null `model` selects the FACT
/// baseline, which needs no atlas; otherwise `atlas` is required. Uses the
/// `tracker` section of the run configuration.
///
/// # Safety
/// Handles must be live or null where allowed; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tractory_track(
    model: *const TractoryModel,
    phantom: *const TractoryPhantom,
    atlas: *const TractoryFixels,
    config_json: *const c_char,
    out: *mut *mut TractoryTractogram,
) -> TractoryStatus {
    guard(|| {
        out_arg(out, "out")?;
        let data = &ref_arg(phantom, "phantom")?.0;
        let cfg: TrackerConfig = config_arg(config_json)?.tracker;
        let t = match model.as_ref() {
            None => pipeline::track_fact(data, &cfg)?,
            Some(m) => pipeline::track_learned(&m.0, data, &ref_arg(atlas, "atlas")?.0, &cfg)?,
        };
        boxed(out, TractoryTractogram(t));
        Ok(())
    })
}

/// Accepted and launched streamline counts.
///
/// # Safety
/// `t` must be a live handle; outputs must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn tractory_tractogram_counts(
    t: *const TractoryTractogram,
    accepted: *mut usize,
    launched: *mut usize,
) -> TractoryStatus {
    guard(|| {
        let t = ref_arg(t, "tractogram")?;
        if !accepted.is_null() {
            *accepted = t.0.accepted().count();
        }
        if !launched.is_null() {
            *launched = t.0.report.merged.launched;
        }
        Ok(())
    })
}

/// Writes the accepted streamlines as a TCK file.
///
/// # Safety
/// `t` must be a live handle; `path` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn tractory_tractogram_write_tck(
    t: *const TractoryTractogram,
    path: *const c_char,
) -> TractoryStatus {
    guard(|| {
        ref_arg(t, "tractogram")?
            .0
            .write_tck(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// The tracking report (per-status and per-α counts) as JSON.
///
/// # Safety
/// `t` must be a live handle; `buf` must hold `len` bytes; `needed` may be
/// null.
#[no_mangle]
pub unsafe extern "C" fn tractory_tractogram_report_json(
    t: *const TractoryTractogram,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> TractoryStatus {
    guard(|| {
        let s = serde_json::to_string(&ref_arg(t, "tractogram")?.0.report).map_err(Error::from)?;
        copy_out(&s, buf, len, needed)
    })
}

/// Scores the tractogram against the phantom's bundle masks and writes the
/// evaluation report as JSON. `mask_rule_json` is a `MaskRule` document or
/// null for defaults.
///
/// # Safety
/// Handles must be live; `buf` must hold `len` bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn tractory_evaluate_json(
    t: *const TractoryTractogram,
    phantom: *const TractoryPhantom,
    mask_rule_json: *const c_char,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> TractoryStatus {
    guard(|| {
        let t = ref_arg(t, "tractogram")?;
        let data = &ref_arg(phantom, "phantom")?.0;
        let rule: MaskRule = match opt_str_arg(mask_rule_json, "mask_rule_json")? {
            Some(s) => serde_json::from_str(s).map_err(|e| Error::Schema(e.to_string()))?,
            None => MaskRule::default(),
        };
        let report = pipeline::evaluate_tractogram(&t.0, data, &rule)?;
        copy_out(
            &serde_json::to_string(&report).map_err(Error::from)?,
            buf,
            len,
            needed,
        )
    })
}

/// # Safety
/// `t` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tractory_tractogram_free(t: *mut TractoryTractogram) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}
