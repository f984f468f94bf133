//! C ABI over `irmask`.
//!
//! Every function returns an [`IrmaskStatus`]. On failure a message is kept
//! per thread and can be read with [`irmask_last_error`]. Handles are opaque
//! and owned by the caller, who releases them with the matching `_free`.
//! Strings handed out by the library are freed with [`irmask_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use irmask::attack::{run_attack, AttackConfig, AttackError};
use irmask::image::{load_image, save_image, Image, ImageError};
use irmask::oracle::{distance, EmbeddingOracle, OracleConfig, OracleError, ReferenceEmbedding};
use irmask::radiometry::{radiated_power, RadiometryInput};
use irmask::spot::{synthesize, PerturbationConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IrmaskStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Image = 3,
    Oracle = 4,
    Attack = 5,
    BufferTooSmall = 6,
    Panic = 99,
}

/// An RGB image with values nominally in `[0, 1]`.
pub struct IrmaskImage(Image);

/// A spot layout.
pub struct IrmaskConfig(PerturbationConfig);

/// An embedding oracle connection.
pub struct IrmaskOracle(Box<dyn EmbeddingOracle>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(IrmaskStatus, String);

impl From<ImageError> for Failure {
    fn from(e: ImageError) -> Self {
        Failure(IrmaskStatus::Image, e.to_string())
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Self {
        Failure(IrmaskStatus::Oracle, e.to_string())
    }
}

impl From<AttackError> for Failure {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Oracle(e) => e.into(),
            e => Failure(IrmaskStatus::Attack, e.to_string()),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(IrmaskStatus::InvalidArgument, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IrmaskStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            IrmaskStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            IrmaskStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(IrmaskStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(IrmaskStatus::NullPointer, format!("{what} is null")))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(IrmaskStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|e| invalid(format!("{what}: {e}")))
}

fn give_string(s: String) -> *mut c_char {
    CString::new(s).expect("no interior NUL in JSON").into_raw()
}

/// Message for the last failing call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn irmask_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn irmask_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Build an image from `height * width * 3` row-major RGB doubles.
///
/// # Safety
/// `data` must point to `len` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn irmask_image_new(
    height: usize,
    width: usize,
    data: *const f64,
    len: usize,
    out_image: *mut *mut IrmaskImage,
) -> IrmaskStatus {
    guard(|| {
        let slot = out(out_image, "out_image")?;
        let values = deref(data, "data").map(|_| std::slice::from_raw_parts(data, len))?;
        let img = Image::new(height, width, values.to_vec())?;
        *slot = Box::into_raw(Box::new(IrmaskImage(img)));
        Ok(())
    })
}

/// Load a PNG or binary PPM file.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn irmask_image_load(path: *const c_char, out_image: *mut *mut IrmaskImage) -> IrmaskStatus {
    guard(|| {
        let slot = out(out_image, "out_image")?;
        let img = load_image(string(path, "path")?)?;
        *slot = Box::into_raw(Box::new(IrmaskImage(img)));
        Ok(())
    })
}

/// Write the image clamped to `[0, 1]`; the format follows the extension.
///
/// # Safety
/// `image` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn irmask_image_save(image: *const IrmaskImage, path: *const c_char) -> IrmaskStatus {
    guard(|| {
        let img = deref(image, "image")?;
        save_image(&img.0.clamped(), string(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `image` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn irmask_image_size(
    image: *const IrmaskImage,
    out_height: *mut usize,
    out_width: *mut usize,
) -> IrmaskStatus {
    guard(|| {
        let img = deref(image, "image")?;
        *out(out_height, "out_height")? = img.0.height();
        *out(out_width, "out_width")? = img.0.width();
        Ok(())
    })
}

/// Copy the pixels into `buffer`, which must hold `height * width * 3` doubles.
///
/// # Safety
/// `buffer` must point to `capacity` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn irmask_image_pixels(
    image: *const IrmaskImage,
    buffer: *mut f64,
    capacity: usize,
) -> IrmaskStatus {
    guard(|| {
        let img = deref(image, "image")?;
        out(buffer, "buffer")?;
        let data = img.0.data();
        if capacity < data.len() {
            return Err(Failure(IrmaskStatus::BufferTooSmall, format!("need {} doubles, got {capacity}", data.len())));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buffer, data.len());
        Ok(())
    })
}

/// # Safety
/// `image` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn irmask_image_free(image: *mut IrmaskImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Parse a layout from the spot-model JSON format.
///
/// # Safety
/// `json` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn irmask_config_from_json(json: *const c_char, out_config: *mut *mut IrmaskConfig) -> IrmaskStatus {
    guard(|| {
        let slot = out(out_config, "out_config")?;
        let cfg = PerturbationConfig::from_json(string(json, "json")?).map_err(|e| invalid(e.to_string()))?;
        *slot = Box::into_raw(Box::new(IrmaskConfig(cfg)));
        Ok(())
    })
}

/// Serialize a layout; free the result with [`irmask_string_free`].
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn irmask_config_to_json(config: *const IrmaskConfig, out_json: *mut *mut c_char) -> IrmaskStatus {
    guard(|| {
        let cfg = deref(config, "config")?;
        *out(out_json, "out_json")? = give_string(cfg.0.to_json());
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn irmask_config_free(config: *mut IrmaskConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Render `config` onto `base`. The result is not clamped.
///
/// # Safety
/// Handles must be live.
#[no_mangle]
pub unsafe extern "C" fn irmask_synthesize(
    base: *const IrmaskImage,
    config: *const IrmaskConfig,
    out_image: *mut *mut IrmaskImage,
) -> IrmaskStatus {
    guard(|| {
        let slot = out(out_image, "out_image")?;
        let (img, cfg) = (deref(base, "base")?, deref(config, "config")?);
        cfg.0
            .validate_for_canvas(img.0.height(), img.0.width())
            .map_err(|e| invalid(e.to_string()))?;
        *slot = Box::into_raw(Box::new(IrmaskImage(synthesize(&img.0, &cfg.0))));
        Ok(())
    })
}

/// The built-in reference embedding.
///
/// # Safety
/// `out_oracle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn irmask_oracle_reference(out_oracle: *mut *mut IrmaskOracle) -> IrmaskStatus {
    guard(|| {
        *out(out_oracle, "out_oracle")? = Box::into_raw(Box::new(IrmaskOracle(Box::new(ReferenceEmbedding::new()))));
        Ok(())
    })
}

/// Connect to `reference`, an `http(s)://` base URL, or a command speaking
/// the line protocol (optionally prefixed with `cmd:`).
///
/// # Safety
/// `selector` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn irmask_oracle_connect(
    selector: *const c_char,
    timeout_secs: f64,
    out_oracle: *mut *mut IrmaskOracle,
) -> IrmaskStatus {
    guard(|| {
        let slot = out(out_oracle, "out_oracle")?;
        if !(timeout_secs > 0.0) {
            return Err(invalid(format!("timeout must be > 0, got {timeout_secs}")));
        }
        let cfg = OracleConfig { timeout_secs, ..OracleConfig::from_selector(string(selector, "selector")?) };
        *slot = Box::into_raw(Box::new(IrmaskOracle(cfg.connect()?)));
        Ok(())
    })
}

/// # Safety
/// `oracle` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn irmask_oracle_free(oracle: *mut IrmaskOracle) {
    if !oracle.is_null() {
        drop(Box::from_raw(oracle));
    }
}

/// Embed the clamped image. `out_len` always receives the embedding length;
/// the values are written only if `capacity` suffices.
///
/// # Safety
/// `buffer` must point to `capacity` writable doubles, or be null with
/// `capacity` 0 to query the length.
#[no_mangle]
pub unsafe extern "C" fn irmask_embed(
    oracle: *const IrmaskOracle,
    image: *const IrmaskImage,
    buffer: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> IrmaskStatus {
    guard(|| {
        let (o, img) = (deref(oracle, "oracle")?, deref(image, "image")?);
        let len_slot = out(out_len, "out_len")?;
        let e = o.0.embed(&img.0.clamped())?;
        *len_slot = e.values.len();
        if capacity < e.values.len() {
            return Err(Failure(IrmaskStatus::BufferTooSmall, format!("need {} doubles, got {capacity}", e.values.len())));
        }
        out(buffer, "buffer")?;
        ptr::copy_nonoverlapping(e.values.as_ptr(), buffer, e.values.len());
        Ok(())
    })
}

/// Squared L2 distance between the embeddings of two clamped images.
///
/// # Safety
/// Handles must be live and `out_distance` writable.
#[no_mangle]
pub unsafe extern "C" fn irmask_distance(
    oracle: *const IrmaskOracle,
    a: *const IrmaskImage,
    b: *const IrmaskImage,
    out_distance: *mut f64,
) -> IrmaskStatus {
    guard(|| {
        let o = deref(oracle, "oracle")?;
        let (a, b) = (deref(a, "a")?, deref(b, "b")?);
        let slot = out(out_distance, "out_distance")?;
        *slot = distance(&o.0.embed(&a.0.clamped())?, &o.0.embed(&b.0.clamped())?)?;
        Ok(())
    })
}

/// Search a layout that makes `attacker` embed like `victim`.
/// `attack_json` holds attack settings (any subset, others default) or is
/// null for all defaults. The result JSON is written to `out_result_json`
/// whether or not an example was found; check its `success` field.
///
/// # Safety
/// Handles must be live; `attack_json` is null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn irmask_run_attack(
    oracle: *const IrmaskOracle,
    attacker: *const IrmaskImage,
    victim: *const IrmaskImage,
    attack_json: *const c_char,
    out_result_json: *mut *mut c_char,
) -> IrmaskStatus {
    guard(|| {
        let o = deref(oracle, "oracle")?;
        let (a, v) = (deref(attacker, "attacker")?, deref(victim, "victim")?);
        let slot = out(out_result_json, "out_result_json")?;
        let cfg: AttackConfig = if attack_json.is_null() {
            AttackConfig::default()
        } else {
            serde_json::from_str(string(attack_json, "attack_json")?).map_err(|e| invalid(format!("attack_json: {e}")))?
        };
        let result = run_attack(&a.0, &v.0, &cfg, o.0.as_ref())?;
        *slot = give_string(result.to_json());
        Ok(())
    })
}

/// Irradiance of an LED of electrical power `p_led` and efficiency `eta`
/// at distance `r`.
///
/// # Safety
/// `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn irmask_radiometry(p_led: f64, eta: f64, r: f64, out_value: *mut f64) -> IrmaskStatus {
    guard(|| {
        let slot = out(out_value, "out_value")?;
        *slot = radiated_power(&RadiometryInput { p_led, eta, r }).map_err(|e| invalid(e.to_string()))?;
        Ok(())
    })
}
