//! C ABI for the lesion-localization pipeline.
//!
//! Everything crosses the boundary as opaque handles plus status codes.
//! Handles are created and destroyed by this library only; passing a
//! handle to any `rf_*_free` function invalidates it. All functions are
//! panic-safe: a caught panic returns [`RfStatus::Panic`] instead of
//! unwinding into the caller. Error details for the most recent failing
//! call on the current thread are available from
//! [`rf_last_error_message`].
//!
//! Training stays behind the CLI; this surface covers inference and
//! analysis — reading and writing volumes, loading trained parameter
//! files, classifier probabilities, generator masks, relevance maps, and
//! Dice scoring.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use relevance_forge::error::Error;
use relevance_forge::evaluation::{
    blank_perturbation_baseline, dice, optimal_threshold_dice, ranked_dice_table,
};
use relevance_forge::nn::model::{
    classifier_probability, generator_mask, ArchTag, ModelParams,
};
use relevance_forge::relevance::{generate_relevance, PaintMode, RelevanceConfig, RelevanceMap};
use relevance_forge::slic::SlicConfig;
use relevance_forge::volume::{BinaryMask, PerturbationMask, Volume};

/// Status code returned by every fallible function. `Ok` is zero; the
/// nonzero values match the CLI exit codes where one exists.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfStatus {
    Ok = 0,
    /// I/O failure other than a missing file.
    Io = 1,
    /// Invalid configuration or option value.
    Config = 2,
    /// A required input file does not exist.
    MissingInput = 3,
    /// A file or buffer exists but its contents are malformed.
    Format = 4,
    /// A numeric operation produced a non-finite value.
    NonFinite = 5,
    /// The combined relevance scores are constant; no ranking exists.
    DegenerateMap = 6,
    /// Shape mismatch between volumes, masks, or maps.
    Dimension = 7,
    /// A function was called outside its contract.
    Usage = 8,
    /// A required pointer argument was null.
    NullArgument = 9,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 10,
    /// The library caught a panic; state is unchanged.
    Panic = 11,
}

fn status_of(err: &Error) -> RfStatus {
    match err {
        Error::Config(_) => RfStatus::Config,
        Error::MissingInput(_) => RfStatus::MissingInput,
        Error::Format(_) => RfStatus::Format,
        Error::Divergence { .. } | Error::NonFinite(_) => RfStatus::NonFinite,
        Error::DegenerateMap(_) => RfStatus::DegenerateMap,
        Error::Dimension(_) => RfStatus::Dimension,
        Error::Usage(_) | Error::Metric(_) => RfStatus::Usage,
        Error::Io { .. } => RfStatus::Io,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes stripped");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg);
}

fn fail(err: Error) -> RfStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

/// Run a fallible body, translating errors and panics to status codes.
fn guarded(f: impl FnOnce() -> Result<(), Error>) -> RfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RfStatus::Ok,
        Ok(Err(e)) => fail(e),
        Err(_) => {
            set_error("internal panic".into());
            RfStatus::Panic
        }
    }
}

/// Message for the most recent failing call on this thread. The pointer
/// stays valid until the next failing call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn rf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

macro_rules! nonnull {
    ($ptr:expr) => {
        match unsafe { $ptr.as_ref() } {
            Some(r) => r,
            None => {
                set_error(format!("{} is null", stringify!($ptr)));
                return RfStatus::NullArgument;
            }
        }
    };
}

fn utf8_path(ptr: *const c_char) -> Result<PathBuf, RfStatus> {
    if ptr.is_null() {
        set_error("path is null".into());
        return Err(RfStatus::NullArgument);
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8".into());
            Err(RfStatus::InvalidUtf8)
        }
    }
}

fn write_out<T>(out: *mut T, value: T) -> Result<(), RfStatus> {
    if out.is_null() {
        set_error("output pointer is null".into());
        return Err(RfStatus::NullArgument);
    }
    unsafe { out.write(value) };
    Ok(())
}

// ---------------------------------------------------------------------------
// Volumes

/// Opaque multi-channel voxel volume (channel-major, f32).
pub struct RfVolume {
    inner: Volume,
}

/// Read a volume file. On success writes a new handle to `out`.
#[no_mangle]
pub extern "C" fn rf_volume_read(path: *const c_char, out: *mut *mut RfVolume) -> RfStatus {
    let path = match utf8_path(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    guarded(|| {
        let v = Volume::read(&path)?;
        write_out(out, Box::into_raw(Box::new(RfVolume { inner: v })))
            .map_err(|_| Error::Usage("null out".into()))
    })
}

/// Build a volume from a caller buffer of `len` f32 values laid out
/// channel-major. `len` must equal channels·depth·height·width.
#[no_mangle]
pub extern "C" fn rf_volume_create(
    channels: usize,
    depth: usize,
    height: usize,
    width: usize,
    data: *const f32,
    len: usize,
    out: *mut *mut RfVolume,
) -> RfStatus {
    if data.is_null() {
        set_error("data is null".into());
        return RfStatus::NullArgument;
    }
    let values = unsafe { std::slice::from_raw_parts(data, len) }.to_vec();
    guarded(|| {
        let v = Volume::new(channels, (depth, height, width), values)?;
        write_out(out, Box::into_raw(Box::new(RfVolume { inner: v })))
            .map_err(|_| Error::Usage("null out".into()))
    })
}

/// Write a volume to a file.
#[no_mangle]
pub extern "C" fn rf_volume_write(volume: *const RfVolume, path: *const c_char) -> RfStatus {
    let volume = nonnull!(volume);
    let path = match utf8_path(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    guarded(|| volume.inner.write(&path))
}

/// Channel count, or 0 for a null handle.
#[no_mangle]
pub extern "C" fn rf_volume_channels(volume: *const RfVolume) -> usize {
    unsafe { volume.as_ref() }.map_or(0, |v| v.inner.channels())
}

/// Spatial dimensions. Null-safe: writes zeros for a null handle.
#[no_mangle]
pub extern "C" fn rf_volume_dims(
    volume: *const RfVolume,
    depth: *mut usize,
    height: *mut usize,
    width: *mut usize,
) {
    let (d, h, w) = unsafe { volume.as_ref() }.map_or((0, 0, 0), |v| v.inner.dims());
    for (ptr, val) in [(depth, d), (height, h), (width, w)] {
        if !ptr.is_null() {
            unsafe { ptr.write(val) };
        }
    }
}

/// Total value count (channels · depth · height · width).
#[no_mangle]
pub extern "C" fn rf_volume_len(volume: *const RfVolume) -> usize {
    unsafe { volume.as_ref() }.map_or(0, |v| v.inner.voxels().len())
}

/// Copy all values into `buf`, which must hold exactly `rf_volume_len`
/// entries.
#[no_mangle]
pub extern "C" fn rf_volume_copy_data(
    volume: *const RfVolume,
    buf: *mut f32,
    len: usize,
) -> RfStatus {
    let volume = nonnull!(volume);
    if buf.is_null() {
        set_error("buf is null".into());
        return RfStatus::NullArgument;
    }
    guarded(|| {
        let src = volume.inner.voxels();
        if len != src.len() {
            return Err(Error::Usage(format!(
                "buffer holds {len} values, volume has {}",
                src.len()
            )));
        }
        unsafe { std::slice::from_raw_parts_mut(buf, len) }.copy_from_slice(src);
        Ok(())
    })
}

/// Destroy a volume handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn rf_volume_free(volume: *mut RfVolume) {
    if !volume.is_null() {
        drop(unsafe { Box::from_raw(volume) });
    }
}

// ---------------------------------------------------------------------------
// Models

/// Which architecture a parameter file holds.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfModelKind {
    Classifier = 0,
    Generator = 1,
}

/// Opaque trained-parameter handle.
pub struct RfModel {
    inner: ModelParams,
}

/// Load a parameter file (.rnet).
#[no_mangle]
pub extern "C" fn rf_model_load(path: *const c_char, out: *mut *mut RfModel) -> RfStatus {
    let path = match utf8_path(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    guarded(|| {
        let m = ModelParams::load(&path)?;
        write_out(out, Box::into_raw(Box::new(RfModel { inner: m })))
            .map_err(|_| Error::Usage("null out".into()))
    })
}

/// Architecture stored in the file.
#[no_mangle]
pub extern "C" fn rf_model_kind(model: *const RfModel, out: *mut RfModelKind) -> RfStatus {
    let model = nonnull!(model);
    let kind = match model.inner.tag {
        ArchTag::Classifier => RfModelKind::Classifier,
        ArchTag::Generator => RfModelKind::Generator,
    };
    guarded(|| write_out(out, kind).map_err(|_| Error::Usage("null out".into())))
}

/// Stable checksum over tag, parameter names, shapes and values.
#[no_mangle]
pub extern "C" fn rf_model_checksum(model: *const RfModel, out: *mut u64) -> RfStatus {
    let model = nonnull!(model);
    guarded(|| write_out(out, model.inner.checksum()).map_err(|_| Error::Usage("null out".into())))
}

/// Destroy a model handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn rf_model_free(model: *mut RfModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Classifier probability (0..1) that the volume is class 1.
#[no_mangle]
pub extern "C" fn rf_classifier_probability(
    model: *const RfModel,
    volume: *const RfVolume,
    out: *mut f64,
) -> RfStatus {
    let model = nonnull!(model);
    let volume = nonnull!(volume);
    guarded(|| {
        let p = classifier_probability(&model.inner, &volume.inner)?;
        write_out(out, p).map_err(|_| Error::Usage("null out".into()))
    })
}

/// Run the generator, producing a perturbation mask volume (values 0..1)
/// with the input's shape.
#[no_mangle]
pub extern "C" fn rf_generator_mask(
    model: *const RfModel,
    volume: *const RfVolume,
    out: *mut *mut RfVolume,
) -> RfStatus {
    let model = nonnull!(model);
    let volume = nonnull!(volume);
    guarded(|| {
        let mask = generator_mask(&model.inner, &volume.inner)?;
        let handle = Box::into_raw(Box::new(RfVolume {
            inner: mask.into_volume(),
        }));
        write_out(out, handle).map_err(|_| Error::Usage("null out".into()))
    })
}

// ---------------------------------------------------------------------------
// Relevance maps

/// Relevance settings; get defaults from [`rf_relevance_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RfRelevanceOptions {
    /// Number of rank bins (≥ 2).
    pub bins: usize,
    /// When true, low mask values rank as most relevant (inverted scores).
    pub low_mask_is_relevant: bool,
    /// When true, paint region means instead of region sums.
    pub paint_mean: bool,
    /// Superpixel count (≥ 2).
    pub slic_k: usize,
    /// Compactness weight (> 0).
    pub slic_m: f64,
    /// Maximum superpixel iterations (≥ 1).
    pub slic_max_iters: u32,
    /// Region-size fraction below which components are merged.
    pub slic_min_size_fraction: f64,
}

impl RfRelevanceOptions {
    fn to_config(self) -> RelevanceConfig {
        RelevanceConfig {
            bins: self.bins,
            low_mask_is_relevant: self.low_mask_is_relevant,
            paint: if self.paint_mean {
                PaintMode::Mean
            } else {
                PaintMode::Sum
            },
            slic: SlicConfig {
                k: self.slic_k,
                m: self.slic_m,
                max_iters: self.slic_max_iters,
                min_size_fraction: self.slic_min_size_fraction,
            },
        }
    }
}

/// The default relevance settings.
#[no_mangle]
pub extern "C" fn rf_relevance_options_default() -> RfRelevanceOptions {
    let cfg = RelevanceConfig::default();
    RfRelevanceOptions {
        bins: cfg.bins,
        low_mask_is_relevant: cfg.low_mask_is_relevant,
        paint_mean: cfg.paint == PaintMode::Mean,
        slic_k: cfg.slic.k,
        slic_m: cfg.slic.m,
        slic_max_iters: cfg.slic.max_iters,
        slic_min_size_fraction: cfg.slic.min_size_fraction,
    }
}

/// Opaque ranked relevance map.
pub struct RfRelevanceMap {
    inner: RelevanceMap,
}

/// Build a relevance map from a volume and its perturbation mask (a volume
/// of values in 0..1 with the same shape).
#[no_mangle]
pub extern "C" fn rf_relevance_generate(
    volume: *const RfVolume,
    mask: *const RfVolume,
    options: RfRelevanceOptions,
    out: *mut *mut RfRelevanceMap,
) -> RfStatus {
    let volume = nonnull!(volume);
    let mask = nonnull!(mask);
    guarded(|| {
        let mask = PerturbationMask::new(mask.inner.clone())?;
        let rm = generate_relevance(&volume.inner, &mask, &options.to_config())?;
        write_out(out, Box::into_raw(Box::new(RfRelevanceMap { inner: rm })))
            .map_err(|_| Error::Usage("null out".into()))
    })
}

/// Baseline map: zero each superpixel in turn and score the classifier
/// change. `low_mask_is_relevant` is ignored (scores are never inverted).
#[no_mangle]
pub extern "C" fn rf_blank_baseline(
    volume: *const RfVolume,
    classifier: *const RfModel,
    options: RfRelevanceOptions,
    out: *mut *mut RfRelevanceMap,
) -> RfStatus {
    let volume = nonnull!(volume);
    let classifier = nonnull!(classifier);
    guarded(|| {
        let rm = blank_perturbation_baseline(&volume.inner, &classifier.inner, &options.to_config())?;
        write_out(out, Box::into_raw(Box::new(RfRelevanceMap { inner: rm })))
            .map_err(|_| Error::Usage("null out".into()))
    })
}

/// Number of rank bins in the map.
#[no_mangle]
pub extern "C" fn rf_relevance_bin_count(map: *const RfRelevanceMap) -> usize {
    unsafe { map.as_ref() }.map_or(0, |m| m.inner.bin_count())
}

/// Voxel count of the map (depth · height · width).
#[no_mangle]
pub extern "C" fn rf_relevance_len(map: *const RfRelevanceMap) -> usize {
    unsafe { map.as_ref() }.map_or(0, |m| m.inner.ranks().len())
}

/// Copy per-voxel ranks (0 = most relevant) into `buf` of exactly
/// `rf_relevance_len` entries.
#[no_mangle]
pub extern "C" fn rf_relevance_copy_ranks(
    map: *const RfRelevanceMap,
    buf: *mut u32,
    len: usize,
) -> RfStatus {
    let map = nonnull!(map);
    if buf.is_null() {
        set_error("buf is null".into());
        return RfStatus::NullArgument;
    }
    guarded(|| {
        let src = map.inner.ranks();
        if len != src.len() {
            return Err(Error::Usage(format!(
                "buffer holds {len} values, map has {}",
                src.len()
            )));
        }
        unsafe { std::slice::from_raw_parts_mut(buf, len) }.copy_from_slice(src);
        Ok(())
    })
}

/// Copy combined (summed painted) scores into `buf` of exactly
/// `rf_relevance_len` entries.
#[no_mangle]
pub extern "C" fn rf_relevance_copy_combined(
    map: *const RfRelevanceMap,
    buf: *mut f32,
    len: usize,
) -> RfStatus {
    let map = nonnull!(map);
    if buf.is_null() {
        set_error("buf is null".into());
        return RfStatus::NullArgument;
    }
    guarded(|| {
        let src = map.inner.combined().voxels();
        if len != src.len() {
            return Err(Error::Usage(format!(
                "buffer holds {len} values, map has {}",
                src.len()
            )));
        }
        unsafe { std::slice::from_raw_parts_mut(buf, len) }.copy_from_slice(src);
        Ok(())
    })
}

/// Destroy a relevance map handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn rf_relevance_map_free(map: *mut RfRelevanceMap) {
    if !map.is_null() {
        drop(unsafe { Box::from_raw(map) });
    }
}

// ---------------------------------------------------------------------------
// Scoring

fn truth_mask(volume: &Volume) -> Result<BinaryMask, Error> {
    BinaryMask::from_volume(volume)
}

/// Dice similarity of two binary volumes (values exactly 0 or 1).
#[no_mangle]
pub extern "C" fn rf_dice(
    a: *const RfVolume,
    b: *const RfVolume,
    out: *mut f64,
) -> RfStatus {
    let a = nonnull!(a);
    let b = nonnull!(b);
    guarded(|| {
        let d = dice(&truth_mask(&a.inner)?, &truth_mask(&b.inner)?)?;
        write_out(out, d).map_err(|_| Error::Usage("null out".into()))
    })
}

/// Best Dice over nested unions of the top k ranks, and the smallest k
/// achieving it. `truth` is a binary volume.
#[no_mangle]
pub extern "C" fn rf_optimal_threshold_dice(
    map: *const RfRelevanceMap,
    truth: *const RfVolume,
    out_dsc: *mut f64,
    out_k_star: *mut usize,
) -> RfStatus {
    let map = nonnull!(map);
    let truth = nonnull!(truth);
    guarded(|| {
        let (dsc, k) = optimal_threshold_dice(&map.inner, &truth_mask(&truth.inner)?)?;
        write_out(out_dsc, dsc).map_err(|_| Error::Usage("null out".into()))?;
        write_out(out_k_star, k).map_err(|_| Error::Usage("null out".into()))
    })
}

/// Per-rank Dice against a binary truth volume; `buf` must hold exactly
/// `rf_relevance_bin_count` entries.
#[no_mangle]
pub extern "C" fn rf_ranked_dice(
    map: *const RfRelevanceMap,
    truth: *const RfVolume,
    buf: *mut f64,
    len: usize,
) -> RfStatus {
    let map = nonnull!(map);
    let truth = nonnull!(truth);
    if buf.is_null() {
        set_error("buf is null".into());
        return RfStatus::NullArgument;
    }
    guarded(|| {
        let table = ranked_dice_table(&map.inner, &truth_mask(&truth.inner)?)?;
        if len != table.len() {
            return Err(Error::Usage(format!(
                "buffer holds {len} values, map has {} bins",
                table.len()
            )));
        }
        unsafe { std::slice::from_raw_parts_mut(buf, len) }.copy_from_slice(&table);
        Ok(())
    })
}
