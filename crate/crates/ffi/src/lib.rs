//! C ABI over the `tyrion` crate.
//!
//! Every fallible function returns a status code (`TYR_OK` on success) and
//! writes results through out-pointers. The message of the last failure on
//! the calling thread is available from [`tyr_last_error`]. Handles are
//! opaque; each `*_new`/`*_load` has a matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use tyrion::config::RunConfig;
use tyrion::data::sar_to_array;
use tyrion::ensemble::{infer_scene, InferConfig};
use tyrion::metrics::{per_image_mde, FrontSet};
use tyrion::model::{Head, ModelConfig, Tyrion};
use tyrion::raster::{BBox, FrontMask, Raster, Zone};
use tyrion::{run, Error};

pub const TYR_OK: i32 = 0;
/// Null pointer, zero size or invalid UTF-8 argument.
pub const TYR_ERR_ARGUMENT: i32 = 1;
pub const TYR_ERR_CONFIG: i32 = 2;
pub const TYR_ERR_DATA: i32 = 3;
pub const TYR_ERR_NUMERIC: i32 = 4;
/// The prediction contains no front pixel; the MDE is undefined.
pub const TYR_NO_FRONT: i32 = 5;
pub const TYR_ERR_PANIC: i32 = 6;

/// Stages for [`tyr_run_stage`].
pub const TYR_STAGE_SYNTH: i32 = 0;
pub const TYR_STAGE_PRETRAIN: i32 = 1;
pub const TYR_STAGE_FINETUNE: i32 = 2;

/// Run configuration.
pub struct TyrConfig {
    cfg: RunConfig,
}

/// Ensemble of zone-segmentation models sharing one configuration.
pub struct TyrEnsemble {
    members: Vec<Tyrion>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(e.exit_code() as i32, e.to_string())
    }
}

fn arg(msg: &str) -> Failure {
    Failure(TYR_ERR_ARGUMENT, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<i32, Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(code)) => code,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            TYR_ERR_PANIC
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    Ok(PathBuf::from(str_arg(p, what)?))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(arg(&format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| arg(&format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| arg(&format!("{what} is null")))
}

fn boxed<T>(out: &mut *mut T, v: T) -> i32 {
    *out = Box::into_raw(Box::new(v));
    TYR_OK
}

/// Library version, static string.
#[no_mangle]
pub extern "C" fn tyr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn tyr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Default configuration; `toy` selects the 64 px model.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tyr_config_default(toy: bool, out: *mut *mut TyrConfig) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let mut cfg = RunConfig::default();
        if toy {
            cfg.model = ModelConfig::toy();
        }
        Ok(boxed(out, TyrConfig { cfg }))
    })
}

/// Parses a TOML configuration.
///
/// # Safety
/// `text` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tyr_config_parse(text: *const c_char, out: *mut *mut TyrConfig) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = RunConfig::parse(str_arg(text, "text")?)?;
        Ok(boxed(out, TyrConfig { cfg }))
    })
}

/// Loads a TOML configuration file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tyr_config_load(path: *const c_char, out: *mut *mut TyrConfig) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = RunConfig::load(&path_arg(path, "path")?)?;
        Ok(boxed(out, TyrConfig { cfg }))
    })
}

/// Checks the setup table and every section.
///
/// # Safety
/// `cfg` must come from a `tyr_config_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn tyr_config_validate(cfg: *const TyrConfig) -> i32 {
    guard(|| {
        let c = cfg.as_ref().ok_or_else(|| arg("cfg is null"))?;
        c.cfg.validate()?;
        Ok(TYR_OK)
    })
}

/// # Safety
/// `cfg` must come from a `tyr_config_*` constructor and not be used after.
#[no_mangle]
pub unsafe extern "C" fn tyr_config_free(cfg: *mut TyrConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs one training or data stage of `cfg` (`TYR_STAGE_*`). Synthetic data
/// goes to `<out>/data`.
///
/// # Safety
/// `cfg` must come from a `tyr_config_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn tyr_run_stage(cfg: *const TyrConfig, stage: i32) -> i32 {
    guard(|| {
        let c = &cfg.as_ref().ok_or_else(|| arg("cfg is null"))?.cfg;
        match stage {
            TYR_STAGE_SYNTH => {
                run::synth(c, &c.paths.out.join("data"))?;
            }
            TYR_STAGE_PRETRAIN => {
                run::pretrain(c)?;
            }
            TYR_STAGE_FINETUNE => {
                run::finetune(c)?;
            }
            s => return Err(arg(&format!("unknown stage {s}"))),
        }
        Ok(TYR_OK)
    })
}

/// Loads `n` member checkpoints built for the model of `cfg`.
///
/// # Safety
/// `paths` must point to `n` nul-terminated strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tyr_ensemble_load(
    cfg: *const TyrConfig,
    paths: *const *const c_char,
    n: usize,
    out: *mut *mut TyrEnsemble,
) -> i32 {
    guard(|| {
        let c = &cfg.as_ref().ok_or_else(|| arg("cfg is null"))?.cfg;
        let out = out_arg(out, "out")?;
        if paths.is_null() || n == 0 {
            return Err(arg("no member paths"));
        }
        let members = std::slice::from_raw_parts(paths, n)
            .iter()
            .map(|&p| Ok(run::load_member(c, &path_arg(p, "member path")?)?))
            .collect::<Result<Vec<_>, Failure>>()?;
        Ok(boxed(out, TyrEnsemble { members }))
    })
}

/// `n` randomly initialised members with seeds `seed..seed+n`.
///
/// # Safety
/// `cfg` must come from a `tyr_config_*` constructor; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tyr_ensemble_random(cfg: *const TyrConfig, n: usize, seed: u64, out: *mut *mut TyrEnsemble) -> i32 {
    guard(|| {
        let c = &cfg.as_ref().ok_or_else(|| arg("cfg is null"))?.cfg;
        let out = out_arg(out, "out")?;
        if n == 0 {
            return Err(arg("n must be positive"));
        }
        let members = (0..n as u64)
            .map(|i| Tyrion::new(ModelConfig { head: Head::Zones, ..c.model.clone() }, seed + i))
            .collect::<Result<Vec<_>, Error>>()?;
        Ok(boxed(out, TyrEnsemble { members }))
    })
}

/// Number of members, 0 for null.
///
/// # Safety
/// `ens` must be null or come from a `tyr_ensemble_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn tyr_ensemble_size(ens: *const TyrEnsemble) -> usize {
    ens.as_ref().map_or(0, |e| e.members.len())
}

/// # Safety
/// `ens` must come from a `tyr_ensemble_*` constructor and not be used after.
#[no_mangle]
pub unsafe extern "C" fn tyr_ensemble_free(ens: *mut TyrEnsemble) {
    if !ens.is_null() {
        drop(Box::from_raw(ens));
    }
}

/// Segments one scene and extracts its front.
///
/// `sar` holds `rows * cols` 16-bit intensities, row-major. `bbox` holds
/// `min_row, max_row, min_col, max_col` (inclusive). Outputs: `zones` gets
/// class ids 0..3 (no-info, rock, glacier, ocean), `front` gets 0 or 1, and
/// `uncertainty`, if not null, gets `4 * rows * cols` per-class standard
/// deviations, class-major.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn tyr_infer(
    ens: *const TyrEnsemble,
    sar: *const u16,
    rows: usize,
    cols: usize,
    bbox: *const usize,
    resolution: f64,
    tta: bool,
    overlap: bool,
    zones: *mut u8,
    front: *mut u8,
    uncertainty: *mut f64,
) -> i32 {
    guard(|| {
        let e = ens.as_ref().ok_or_else(|| arg("ensemble is null"))?;
        if sar.is_null() || bbox.is_null() || zones.is_null() || front.is_null() {
            return Err(arg("null buffer"));
        }
        let n = rows * cols;
        if n == 0 {
            return Err(arg("empty scene"));
        }
        let raster = Raster::from_vec(rows, cols, std::slice::from_raw_parts(sar, n).to_vec())?;
        let b = std::slice::from_raw_parts(bbox, 4);
        let bbox = BBox::new(b[0], b[1], b[2], b[3])?;
        let r = infer_scene(&e.members, &sar_to_array(&raster), &bbox, resolution, InferConfig { tta, overlap })?;
        std::slice::from_raw_parts_mut(zones, n).copy_from_slice(r.zones.grid.data());
        for (o, &v) in std::slice::from_raw_parts_mut(front, n).iter_mut().zip(r.front.grid.data()) {
            *o = v as u8;
        }
        if !uncertainty.is_null() {
            std::slice::from_raw_parts_mut(uncertainty, Zone::COUNT * n).copy_from_slice(r.uncertainty.0.data());
        }
        Ok(TYR_OK)
    })
}

/// Mean distance error in meters between two front masks (non-zero = front)
/// of one image. Returns `TYR_NO_FRONT` and writes NaN when the prediction
/// is empty.
///
/// # Safety
/// `gt` and `pred` must hold `rows * cols` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tyr_mde(gt: *const u8, pred: *const u8, rows: usize, cols: usize, resolution: f64, out: *mut f64) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = f64::NAN;
        if gt.is_null() || pred.is_null() {
            return Err(arg("null mask"));
        }
        let mask = |p: *const u8| -> Result<FrontMask, Failure> {
            let v = std::slice::from_raw_parts(p, rows * cols).iter().map(|&x| x != 0).collect();
            Ok(FrontMask { grid: Raster::from_vec(rows, cols, v)?, resolution })
        };
        let set = FrontSet::from_masks(&mask(gt)?, &mask(pred)?, "", "")?;
        match per_image_mde(&set)? {
            Some(m) => {
                *out = m;
                Ok(TYR_OK)
            }
            None => {
                set_error("no predicted front pixel".into());
                Ok(TYR_NO_FRONT)
            }
        }
    })
}
