//! C ABI over the detector: depth discretization, box IoU, NMS, label parsing,
//! evaluation, and model inference.
//!
//! Every fallible function returns an [`AdStatus`]; on failure the message is
//! available from [`ad_last_error`] on the same thread. Handles are opaque and must
//! be released with their `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use auxdepth::config::RunConfig;
use auxdepth::eval::{evaluate_dataset, EvalConfig, Metric};
use auxdepth::geometry::{iou_3d, iou_bev, Box2d, Box3d};
use auxdepth::head::nms_indices;
use auxdepth::kitti::{parse_label_line, Calibration, Difficulty, KittiLabel};
use auxdepth::lid::{Lid, LidConfig};
use auxdepth::model::Model;
use auxdepth::tensor::{checkpoint, Real, Tensor};
use auxdepth::train::{LoadedFrame, Pipeline};
use auxdepth::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    Config = 5,
    Dimension = 6,
    BufferTooSmall = 7,
    Failure = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> AdStatus {
    match e.root() {
        Error::Parse { .. } => AdStatus::Parse,
        Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) => AdStatus::Io,
        Error::Config(_) => AdStatus::Config,
        Error::Dimension(_) | Error::Bounds { .. } => AdStatus::Dimension,
        Error::Geometry(_) | Error::Contract(_) => AdStatus::InvalidArgument,
        _ => AdStatus::Failure,
    }
}

/// Runs `f`, recording errors and converting panics.
fn guard(f: impl FnOnce() -> Result<(), (AdStatus, String)>) -> AdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AdStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (AdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (AdStatus, String) {
    (AdStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> (AdStatus, String) {
    (AdStatus::InvalidArgument, msg.into())
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (AdStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not UTF-8")))
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn ad_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ad_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- depth discretization --------------------------------------------------

/// Opaque depth-bin discretization.
pub struct AdLid {
    lid: Lid,
}

/// Creates a discretization of `[d_min, d_max]` into `bins` bins.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ad_lid_new(d_min: f64, d_max: f64, bins: usize, out: *mut *mut AdLid) -> AdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let lid = LidConfig::new(d_min, d_max, bins).and_then(Lid::new).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(AdLid { lid }));
        Ok(())
    })
}

/// # Safety
/// `lid` must come from [`ad_lid_new`] and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ad_lid_free(lid: *mut AdLid) {
    if !lid.is_null() {
        drop(Box::from_raw(lid));
    }
}

/// Writes the `bins + 1` bin edges into `edges`, which holds `len` values.
///
/// # Safety
/// `lid` must be a live handle and `edges` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ad_lid_edges(lid: *const AdLid, edges: *mut f64, len: usize) -> AdStatus {
    guard(|| {
        let lid = lid.as_ref().ok_or_else(|| null("lid"))?;
        if edges.is_null() {
            return Err(null("edges"));
        }
        let e = lid.lid.edges();
        if len < e.len() {
            return Err((AdStatus::BufferTooSmall, format!("need {} edges, buffer holds {len}", e.len())));
        }
        std::slice::from_raw_parts_mut(edges, e.len()).copy_from_slice(e);
        Ok(())
    })
}

/// # Safety
/// `lid` must be a live handle and `bin` writable.
#[no_mangle]
pub unsafe extern "C" fn ad_lid_depth_to_bin(lid: *const AdLid, depth: f64, bin: *mut usize) -> AdStatus {
    guard(|| {
        let lid = lid.as_ref().ok_or_else(|| null("lid"))?;
        let bin = bin.as_mut().ok_or_else(|| null("bin"))?;
        *bin = lid.lid.depth_to_bin(depth);
        Ok(())
    })
}

/// # Safety
/// `lid` must be a live handle and `center` writable.
#[no_mangle]
pub unsafe extern "C" fn ad_lid_bin_center(lid: *const AdLid, bin: usize, center: *mut f64) -> AdStatus {
    guard(|| {
        let lid = lid.as_ref().ok_or_else(|| null("lid"))?;
        let center = center.as_mut().ok_or_else(|| null("center"))?;
        *center = lid.lid.bin_center(bin).map_err(lib_err)?;
        Ok(())
    })
}

// ---- geometry ---------------------------------------------------------------

/// 3D box: bottom-face center `(x, y, z)` in camera coordinates, size `h, w, l`,
/// yaw `ry` about the camera y axis.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdBox3d {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub ry: f64,
}

impl From<AdBox3d> for Box3d {
    fn from(b: AdBox3d) -> Self {
        Box3d {
            x: b.x,
            y: b.y,
            z: b.z,
            h: b.h,
            w: b.w,
            l: b.l,
            ry: b.ry,
        }
    }
}

impl From<Box3d> for AdBox3d {
    fn from(b: Box3d) -> Self {
        AdBox3d {
            x: b.x,
            y: b.y,
            z: b.z,
            h: b.h,
            w: b.w,
            l: b.l,
            ry: b.ry,
        }
    }
}

/// Image box `[x1, x2) × [y1, y2)` in pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdBox2d {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<AdBox2d> for Box2d {
    fn from(b: AdBox2d) -> Self {
        Box2d::new(b.x1, b.y1, b.x2, b.y2)
    }
}

impl From<Box2d> for AdBox2d {
    fn from(b: Box2d) -> Self {
        AdBox2d {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
        }
    }
}

unsafe fn box_pair(a: *const AdBox3d, b: *const AdBox3d) -> Result<(Box3d, Box3d), (AdStatus, String)> {
    let a = a.as_ref().ok_or_else(|| null("a"))?;
    let b = b.as_ref().ok_or_else(|| null("b"))?;
    Ok(((*a).into(), (*b).into()))
}

/// Bird's-eye-view IoU of two boxes.
///
/// # Safety
/// `a` and `b` must be readable and `iou` writable.
#[no_mangle]
pub unsafe extern "C" fn ad_iou_bev(a: *const AdBox3d, b: *const AdBox3d, iou: *mut f64) -> AdStatus {
    guard(|| {
        let (a, b) = box_pair(a, b)?;
        let out = iou.as_mut().ok_or_else(|| null("iou"))?;
        *out = iou_bev(&a, &b);
        Ok(())
    })
}

/// Volumetric IoU of two boxes.
///
/// # Safety
/// `a` and `b` must be readable and `iou` writable.
#[no_mangle]
pub unsafe extern "C" fn ad_iou_3d(a: *const AdBox3d, b: *const AdBox3d, iou: *mut f64) -> AdStatus {
    guard(|| {
        let (a, b) = box_pair(a, b)?;
        let out = iou.as_mut().ok_or_else(|| null("iou"))?;
        *out = iou_3d(&a, &b);
        Ok(())
    })
}

/// Greedy 2D NMS. Writes kept indices, highest score first, into `keep` (capacity
/// `n`) and their number into `kept`.
///
/// # Safety
/// `boxes` and `scores` must hold `n` readable values, `keep` `n` writable values.
#[no_mangle]
pub unsafe extern "C" fn ad_nms(
    boxes: *const AdBox2d,
    scores: *const f64,
    n: usize,
    iou_threshold: f64,
    keep: *mut usize,
    kept: *mut usize,
) -> AdStatus {
    guard(|| {
        let kept = kept.as_mut().ok_or_else(|| null("kept"))?;
        if n == 0 {
            *kept = 0;
            return Ok(());
        }
        if boxes.is_null() || scores.is_null() || keep.is_null() {
            return Err(null("boxes, scores or keep"));
        }
        if !(0.0..=1.0).contains(&iou_threshold) {
            return Err(invalid(format!("IoU threshold {iou_threshold} is outside [0, 1]")));
        }
        let b: Vec<Box2d> = std::slice::from_raw_parts(boxes, n).iter().map(|&b| b.into()).collect();
        let s = std::slice::from_raw_parts(scores, n);
        let idx = nms_indices(&b, s, iou_threshold);
        std::slice::from_raw_parts_mut(keep, idx.len()).copy_from_slice(&idx);
        *kept = idx.len();
        Ok(())
    })
}

// ---- labels and evaluation --------------------------------------------------

pub const AD_KIND_LEN: usize = 32;

/// One KITTI label line. `kind` is NUL-terminated and truncated to fit.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct AdLabel {
    pub kind: [c_char; AD_KIND_LEN],
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    pub bbox: AdBox2d,
    pub box3d: AdBox3d,
    /// Nonzero when `score` is present.
    pub has_score: i32,
    pub score: f64,
}

impl From<&KittiLabel> for AdLabel {
    fn from(l: &KittiLabel) -> Self {
        let mut kind = [0 as c_char; AD_KIND_LEN];
        for (dst, &src) in kind.iter_mut().zip(l.kind.as_bytes().iter().take(AD_KIND_LEN - 1)) {
            *dst = src as c_char;
        }
        AdLabel {
            kind,
            truncated: l.truncated,
            occluded: l.occluded,
            alpha: l.alpha,
            bbox: l.bbox.into(),
            box3d: l.box3d().into(),
            has_score: i32::from(l.score.is_some()),
            score: l.score.unwrap_or(0.0),
        }
    }
}

/// Parses one label line.
///
/// # Safety
/// `line` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ad_parse_label_line(line: *const c_char, out: *mut AdLabel) -> AdStatus {
    guard(|| {
        let line = c_str(line, "line")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = (&parse_label_line(line, 1).map_err(lib_err)?).into();
        Ok(())
    })
}

/// AP40 per difficulty (Easy, Moderate, Hard) in percent.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdEvalResult {
    pub ap_3d: [f64; 3],
    pub ap_bev: [f64; 3],
}

/// Evaluates the prediction directory against the label directory for `class`.
///
/// # Safety
/// String arguments must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ad_evaluate_dirs(
    pred_dir: *const c_char,
    gt_dir: *const c_char,
    class: *const c_char,
    iou_threshold: f64,
    out: *mut AdEvalResult,
) -> AdStatus {
    guard(|| {
        let pred = PathBuf::from(c_str(pred_dir, "pred_dir")?);
        let gt = PathBuf::from(c_str(gt_dir, "gt_dir")?);
        let class = c_str(class, "class")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cfg = EvalConfig {
            class: class.to_string(),
            iou_threshold,
            metrics: vec![Metric::Ap3d, Metric::ApBev],
        };
        let report = evaluate_dataset(&pred, &gt, &cfg).map_err(lib_err)?;
        for (i, level) in Difficulty::LEVELS.into_iter().enumerate() {
            out.ap_3d[i] = report.value(Metric::Ap3d, level).unwrap_or(0.0);
            out.ap_bev[i] = report.value(Metric::ApBev, level).unwrap_or(0.0);
        }
        Ok(())
    })
}

// ---- model ------------------------------------------------------------------

/// Opaque loaded detector.
pub struct AdModel {
    pipeline: Pipeline,
    model: Model,
}

/// One detection in source-image coordinates.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdDetection {
    pub class_id: u32,
    pub score: f64,
    pub bbox: AdBox2d,
    pub box3d: AdBox3d,
}

/// Loads a detector. `config_path` may be null for the default profile;
/// `checkpoint_path` may be null for freshly initialized weights.
///
/// # Safety
/// Non-null strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ad_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut AdModel,
) -> AdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg_path = if config_path.is_null() {
            None
        } else {
            Some(PathBuf::from(c_str(config_path, "config_path")?))
        };
        let cfg = RunConfig::load(cfg_path.as_deref(), &[]).map_err(lib_err)?;
        let model = if checkpoint_path.is_null() {
            Model::new(cfg.model.clone(), cfg.seed)
        } else {
            let path = PathBuf::from(c_str(checkpoint_path, "checkpoint_path")?);
            checkpoint::load(&path).and_then(|p| Model::with_params(cfg.model.clone(), p))
        }
        .map_err(lib_err)?;
        let pipeline = Pipeline::new(cfg).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(AdModel { pipeline, model }));
        Ok(())
    })
}

/// Runs the detector on an interleaved 8-bit RGB image of `width × height` with
/// row-major projection matrix `p2[12]`. Writes up to `capacity` detections and
/// the total found into `count`; returns `BufferTooSmall` when they do not fit.
///
/// # Safety
/// `model` must be live, `rgb` must hold `3·width·height` bytes, `p2` 12 doubles,
/// `detections` `capacity` writable entries, and `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ad_model_detect(
    model: *const AdModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    p2: *const f64,
    detections: *mut AdDetection,
    capacity: usize,
    count: *mut usize,
) -> AdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let count = count.as_mut().ok_or_else(|| null("count"))?;
        if rgb.is_null() || p2.is_null() {
            return Err(null("rgb or p2"));
        }
        if width == 0 || height == 0 {
            return Err(invalid("image must be non-empty"));
        }
        let px = std::slice::from_raw_parts(rgb, 3 * width * height);
        let plane = width * height;
        let image = Tensor::from_fn(&[3, height, width], |i| {
            let (c, p) = (i / plane, i % plane);
            px[3 * p + c] as Real / 255.0
        });
        let m12 = std::slice::from_raw_parts(p2, 12);
        let mut rows = [[0.0; 4]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            row.copy_from_slice(&m12[4 * r..4 * r + 4]);
        }
        let calib = Calibration::new(rows).map_err(lib_err)?;
        let frame = LoadedFrame {
            id: String::new(),
            image,
            labels: Vec::new(),
            calib,
            depth: None,
        };
        let labels = m.pipeline.predict(&m.model, &frame).map_err(lib_err)?;
        *count = labels.len();
        if labels.len() > capacity {
            return Err((
                AdStatus::BufferTooSmall,
                format!("{} detections do not fit in {capacity}", labels.len()),
            ));
        }
        if !labels.is_empty() && detections.is_null() {
            return Err(null("detections"));
        }
        let classes = &m.pipeline.cfg.class_names;
        for (i, l) in labels.iter().enumerate() {
            *detections.add(i) = AdDetection {
                class_id: classes.iter().position(|c| *c == l.kind).unwrap_or(0) as u32,
                score: l.score.unwrap_or(0.0),
                bbox: l.bbox.into(),
                box3d: l.box3d().into(),
            };
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`ad_model_load`] and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ad_model_free(model: *mut AdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
