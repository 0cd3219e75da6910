//! C ABI over the tracerseg pipeline.
//!
//! Every fallible call returns a [`TsStatus`]; on failure the message is
//! available from [`ts_last_error_message`] on the same thread. Handles are
//! opaque and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use tracerseg::discriminator::{predict_tracer, Tracer};
use tracerseg::metrics::{case_metrics, Connectivity, MetricsError};
use tracerseg::nifti::{read_volume_as, write_volume, NiftiError};
use tracerseg::nn::{load_model, NnError, Sequential};
use tracerseg::preprocess::{resample_nearest, resample_trilinear, tracer_mip, MipSpec, PreprocessError, MIP_SIZE};
use tracerseg::{BinaryMask, Volume3D, VolumeError, VolumeKind};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ShapeMismatch = 5,
    Panic = 6,
}

/// Meaning of a volume's scalars.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsVolumeKind {
    PetSuv = 0,
    CtHu = 1,
    Label = 2,
    Probability = 3,
}

impl From<TsVolumeKind> for VolumeKind {
    fn from(k: TsVolumeKind) -> Self {
        match k {
            TsVolumeKind::PetSuv => VolumeKind::PetSuv,
            TsVolumeKind::CtHu => VolumeKind::CtHu,
            TsVolumeKind::Label => VolumeKind::Label,
            TsVolumeKind::Probability => VolumeKind::Probability,
        }
    }
}

impl From<VolumeKind> for TsVolumeKind {
    fn from(k: VolumeKind) -> Self {
        match k {
            VolumeKind::PetSuv => TsVolumeKind::PetSuv,
            VolumeKind::CtHu => TsVolumeKind::CtHu,
            VolumeKind::Label => TsVolumeKind::Label,
            VolumeKind::Probability => TsVolumeKind::Probability,
        }
    }
}

/// Opaque 3D volume.
pub struct TsVolume(Volume3D);

/// Opaque discriminator model.
pub struct TsModel(Sequential);

/// Per-case segmentation scores.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsCaseMetrics {
    /// NaN when both masks are empty.
    pub dice: f64,
    pub dice_defined: bool,
    pub fpv_voxels: u64,
    pub fpv_ml: f64,
    pub fnv_voxels: u64,
    pub fnv_ml: f64,
    pub n_pred_components: u64,
    pub n_gt_components: u64,
}

/// Tracer codes written by [`ts_predict_tracer`].
pub const TS_TRACER_FDG: i32 = 0;
pub const TS_TRACER_PSMA: i32 = 1;
/// Side length of the discriminator MIP.
pub const TS_MIP_SIZE: usize = 224;
const _: () = assert!(TS_MIP_SIZE == MIP_SIZE);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(TsStatus, String);

impl Failure {
    fn invalid(msg: impl Into<String>) -> Self {
        Failure(TsStatus::InvalidArgument, msg.into())
    }

    fn null(what: &str) -> Self {
        Failure(TsStatus::NullPointer, format!("{what} is null"))
    }
}

impl From<VolumeError> for Failure {
    fn from(e: VolumeError) -> Self {
        let status = match e {
            VolumeError::ShapeMismatch(_) => TsStatus::ShapeMismatch,
            _ => TsStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<NiftiError> for Failure {
    fn from(e: NiftiError) -> Self {
        let status = match e {
            NiftiError::Io { .. } => TsStatus::Io,
            _ => TsStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

impl From<NnError> for Failure {
    fn from(e: NnError) -> Self {
        let status = match e {
            NnError::Io(_) => TsStatus::Io,
            NnError::Manifest(_) => TsStatus::Format,
            _ => TsStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<PreprocessError> for Failure {
    fn from(e: PreprocessError) -> Self {
        Failure(TsStatus::InvalidArgument, e.to_string())
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::ShapeMismatch(m) => Failure(TsStatus::ShapeMismatch, m),
            MetricsError::Nifti(n) => n.into(),
        }
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TsStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::null(what))
}

fn boxed_volume(v: Volume3D) -> *mut TsVolume {
    Box::into_raw(Box::new(TsVolume(v)))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn ts_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Read a NIfTI-1 file. `kind` < 0 infers the kind from the datatype.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_read(path: *const c_char, kind: i32, out: *mut *mut TsVolume) -> TsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = path_arg(path)?;
        let kind = match kind {
            k if k < 0 => None,
            0 => Some(VolumeKind::PetSuv),
            1 => Some(VolumeKind::CtHu),
            2 => Some(VolumeKind::Label),
            3 => Some(VolumeKind::Probability),
            k => return Err(Failure::invalid(format!("unknown volume kind {k}"))),
        };
        *out = boxed_volume(read_volume_as(path, kind)?);
        Ok(())
    })
}

/// Write a volume; a `.gz` suffix selects gzip.
///
/// # Safety
/// `vol` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_write(vol: *const TsVolume, path: *const c_char) -> TsStatus {
    guard(|| {
        let vol = handle(vol, "vol")?;
        write_volume(&vol.0, path_arg(path)?)?;
        Ok(())
    })
}

/// Build a volume from `nx·ny·nz` doubles in x-fastest order.
///
/// # Safety
/// `spacing` must point to 3 doubles and `data` to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_new(
    nx: usize,
    ny: usize,
    nz: usize,
    spacing: *const f64,
    kind: TsVolumeKind,
    data: *const f64,
    len: usize,
    out: *mut *mut TsVolume,
) -> TsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if spacing.is_null() {
            return Err(Failure::null("spacing"));
        }
        if data.is_null() && len > 0 {
            return Err(Failure::null("data"));
        }
        let s = std::slice::from_raw_parts(spacing, 3);
        let values = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(data, len).to_vec()
        };
        let v = Volume3D::new([nx, ny, nz], [s[0], s[1], s[2]], kind.into(), values)?;
        *out = boxed_volume(v);
        Ok(())
    })
}

/// Release a volume. Null is ignored.
///
/// # Safety
/// `vol` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_free(vol: *mut TsVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// # Safety
/// `vol` must come from this library; `shape` must hold 3 elements.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_shape(vol: *const TsVolume, shape: *mut usize) -> TsStatus {
    guard(|| {
        let vol = handle(vol, "vol")?;
        if shape.is_null() {
            return Err(Failure::null("shape"));
        }
        std::slice::from_raw_parts_mut(shape, 3).copy_from_slice(&vol.0.shape());
        Ok(())
    })
}

/// # Safety
/// `vol` must come from this library; `spacing` must hold 3 elements.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_spacing(vol: *const TsVolume, spacing: *mut f64) -> TsStatus {
    guard(|| {
        let vol = handle(vol, "vol")?;
        if spacing.is_null() {
            return Err(Failure::null("spacing"));
        }
        std::slice::from_raw_parts_mut(spacing, 3).copy_from_slice(&vol.0.spacing());
        Ok(())
    })
}

/// # Safety
/// `vol` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_kind(vol: *const TsVolume, kind: *mut TsVolumeKind) -> TsStatus {
    guard(|| {
        let vol = handle(vol, "vol")?;
        *out_ptr(kind, "kind")? = vol.0.kind().into();
        Ok(())
    })
}

/// Voxel count, 0 for a null handle.
///
/// # Safety
/// `vol` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_len(vol: *const TsVolume) -> usize {
    vol.as_ref().map_or(0, |v| v.0.len())
}

/// Borrowed pointer to the voxel data, valid while the handle lives.
///
/// # Safety
/// `vol` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_data(vol: *const TsVolume) -> *const f64 {
    vol.as_ref().map_or(ptr::null(), |v| v.0.data().as_ptr())
}

/// Resample onto `spacing` (3 doubles). `nearest` selects nearest-neighbour
/// (label volumes); otherwise trilinear.
///
/// # Safety
/// `vol` must come from this library, `spacing` point to 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn ts_resample(
    vol: *const TsVolume,
    spacing: *const f64,
    nearest: bool,
    out: *mut *mut TsVolume,
) -> TsStatus {
    guard(|| {
        let vol = handle(vol, "vol")?;
        let out = out_ptr(out, "out")?;
        if spacing.is_null() {
            return Err(Failure::null("spacing"));
        }
        let s = std::slice::from_raw_parts(spacing, 3);
        let t = [s[0], s[1], s[2]];
        let r = if nearest {
            resample_nearest(&vol.0, t)?
        } else {
            resample_trilinear(&vol.0, t)?
        };
        *out = boxed_volume(r);
        Ok(())
    })
}

/// Normalized 224×224 coronal MIP of a PET volume, u-fastest.
///
/// # Safety
/// `pet` must come from this library; `pixels` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ts_mip(pet: *const TsVolume, pixels: *mut f64, len: usize) -> TsStatus {
    guard(|| {
        let pet = handle(pet, "pet")?;
        if pixels.is_null() {
            return Err(Failure::null("pixels"));
        }
        if len != TS_MIP_SIZE * TS_MIP_SIZE {
            return Err(Failure::invalid(format!("pixel buffer must hold {} doubles", TS_MIP_SIZE * TS_MIP_SIZE)));
        }
        let mip = tracer_mip(&pet.0, &MipSpec::default())?;
        std::slice::from_raw_parts_mut(pixels, len).copy_from_slice(mip.pixels().data());
        Ok(())
    })
}

/// Load discriminator weights from their JSON manifest.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ts_model_load(path: *const c_char, out: *mut *mut TsModel) -> TsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let model = load_model(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(TsModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ts_model_free(model: *mut TsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Classify a PET volume. Writes the PSMA probability and
/// `TS_TRACER_FDG` / `TS_TRACER_PSMA`.
///
/// # Safety
/// Handles must come from this library; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_predict_tracer(
    model: *const TsModel,
    pet: *const TsVolume,
    probability: *mut f64,
    tracer: *mut i32,
) -> TsStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let pet = handle(pet, "pet")?;
        let probability = out_ptr(probability, "probability")?;
        let tracer = out_ptr(tracer, "tracer")?;
        let mip = tracer_mip(&pet.0, &MipSpec::default())?;
        let p = predict_tracer(&model.0, &mip)?;
        *probability = p.probability;
        *tracer = match p.tracer {
            Tracer::Fdg => TS_TRACER_FDG,
            Tracer::Psma => TS_TRACER_PSMA,
        };
        Ok(())
    })
}

/// Score voxels equal to `label` in `pred` against `gt`. `connectivity` is
/// 6, 18 or 26.
///
/// # Safety
/// Handles must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_evaluate(
    pred: *const TsVolume,
    gt: *const TsVolume,
    label: u32,
    connectivity: u8,
    out: *mut TsCaseMetrics,
) -> TsStatus {
    guard(|| {
        let pred = handle(pred, "pred")?;
        let gt = handle(gt, "gt")?;
        let out = out_ptr(out, "out")?;
        let conn = Connectivity::try_from(connectivity).map_err(Failure::invalid)?;
        let m = case_metrics(
            "",
            &BinaryMask::from_label(&pred.0, label),
            &BinaryMask::from_label(&gt.0, label),
            conn,
        )?;
        *out = TsCaseMetrics {
            dice: m.dice.unwrap_or(f64::NAN),
            dice_defined: m.dice.is_some(),
            fpv_voxels: m.fpv_voxels as u64,
            fpv_ml: m.fpv_ml,
            fnv_voxels: m.fnv_voxels as u64,
            fnv_ml: m.fnv_ml,
            n_pred_components: m.n_pred_components as u64,
            n_gt_components: m.n_gt_components as u64,
        };
        Ok(())
    })
}
