//! C ABI over `pagbox`.
//!
//! Every fallible function returns a [`PagboxStatus`]. On failure the message
//! is kept per thread and can be read with [`pagbox_last_error`]. Arrays are
//! flat and row-major: corners as `u0 v0 u1 v1 ...`, points as
//! `x0 y0 z0 x1 ...`, matrices row by row.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nalgebra::{Matrix3, Point2, Point3, Vector3};
use pagbox::dataset::{read_annotations, read_predictions, ParseMode};
use pagbox::dense::{extract_corners, Grid, HeatField};
use pagbox::geometry::project_corners;
use pagbox::metrics::{
    evaluate, hungarian_assign, iou3d, kabsch_rectify, pag, EvalOptions, MetricsReport,
};
use pagbox::{Corner3DSet, CornerSet, Cuboid, DepthSpace, Error, Intrinsics, NUM_CORNERS};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PagboxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Schema = 4,
    Domain = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PagboxIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PagboxCuboid {
    pub center: [f64; 3],
    pub size: [f64; 3],
    /// Row-major; columns are the box axes in camera coordinates.
    pub rotation: [f64; 9],
}

/// Summary row of an evaluation; a metric with no contributing instance is NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PagboxAggregate {
    pub instances: usize,
    pub pag_uv: f64,
    pub pag_d: f64,
    pub nhd: f64,
    pub iou3d: f64,
}

/// Opaque evaluation result.
pub struct PagboxReport {
    inner: MetricsReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> PagboxStatus {
    match err {
        Error::Io { .. } => PagboxStatus::Io,
        Error::Schema { .. } => PagboxStatus::Schema,
        Error::InvalidConfig(_)
        | Error::InvalidIntrinsics(_)
        | Error::InvalidCuboid(_)
        | Error::InvalidCorners(_)
        | Error::InvalidGrid(_)
        | Error::ShapeMismatch { .. } => PagboxStatus::InvalidArgument,
        _ => PagboxStatus::Domain,
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard<F>(f: F) -> PagboxStatus
where
    F: FnOnce() -> Result<(), (PagboxStatus, String)>,
{
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PagboxStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PagboxStatus::Panic
        }
    }
}

fn domain(err: Error) -> (PagboxStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(name: &str) -> (PagboxStatus, String) {
    (PagboxStatus::NullPointer, format!("{name} is null"))
}

unsafe fn slice<'a, T>(
    p: *const T,
    len: usize,
    name: &str,
) -> Result<&'a [T], (PagboxStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(
    p: *mut T,
    len: usize,
    name: &str,
) -> Result<&'a mut [T], (PagboxStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path<'a>(p: *const c_char, name: &str) -> Result<&'a Path, (PagboxStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map(Path::new).map_err(|_| {
        (
            PagboxStatus::InvalidArgument,
            format!("{name} is not UTF-8"),
        )
    })
}

fn intrinsics(k: &PagboxIntrinsics) -> Result<Intrinsics, (PagboxStatus, String)> {
    Intrinsics::new(k.fx, k.fy, k.cx, k.cy).map_err(domain)
}

fn points3(flat: &[f64]) -> Result<Corner3DSet, (PagboxStatus, String)> {
    Corner3DSet::new(std::array::from_fn(|i| {
        Point3::new(flat[3 * i], flat[3 * i + 1], flat[3 * i + 2])
    }))
    .map_err(domain)
}

fn corner_set(uv: &[f64], depths: &[f64]) -> Result<CornerSet, (PagboxStatus, String)> {
    CornerSet::new(
        std::array::from_fn(|i| Point2::new(uv[2 * i], uv[2 * i + 1])),
        std::array::from_fn(|i| depths[i]),
        DepthSpace::Metric,
    )
    .map_err(domain)
}

fn to_cuboid(c: &PagboxCuboid) -> Result<Cuboid, (PagboxStatus, String)> {
    Cuboid::new(
        Point3::from(c.center),
        Vector3::from(c.size),
        Matrix3::from_row_slice(&c.rotation),
    )
    .map_err(domain)
}

fn from_cuboid(c: &Cuboid) -> PagboxCuboid {
    let r = c.rotation;
    PagboxCuboid {
        center: [c.center.x, c.center.y, c.center.z],
        size: [c.size.x, c.size.y, c.size.z],
        rotation: std::array::from_fn(|i| r[(i / 3, i % 3)]),
    }
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn pagbox_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static, nul-terminated library version.
#[no_mangle]
pub extern "C" fn pagbox_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Eight corners `x y z` of a cuboid in the sign-bit template order.
///
/// # Safety
/// `cuboid` must point to a valid struct and `out_points` to 24 doubles.
#[no_mangle]
pub unsafe extern "C" fn pagbox_cuboid_corners(
    cuboid: *const PagboxCuboid,
    out_points: *mut f64,
) -> PagboxStatus {
    guard(|| {
        let c = to_cuboid(cuboid.as_ref().ok_or_else(|| null("cuboid"))?)?;
        let out = slice_mut(out_points, 3 * NUM_CORNERS, "out_points")?;
        for (i, p) in c.corners().points.iter().enumerate() {
            out[3 * i..3 * i + 3].copy_from_slice(&[p.x, p.y, p.z]);
        }
        Ok(())
    })
}

/// Pinhole projection of eight camera-frame points.
///
/// # Safety
/// `points` must hold 24 doubles, `out_uv` 16 and `out_depths` 8.
#[no_mangle]
pub unsafe extern "C" fn pagbox_project(
    points: *const f64,
    k: *const PagboxIntrinsics,
    out_uv: *mut f64,
    out_depths: *mut f64,
) -> PagboxStatus {
    guard(|| {
        let pts = points3(slice(points, 3 * NUM_CORNERS, "points")?)?;
        let k = intrinsics(k.as_ref().ok_or_else(|| null("k"))?)?;
        let cs = project_corners(&pts, &k).map_err(domain)?;
        slice_mut(out_uv, 2 * NUM_CORNERS, "out_uv")?.copy_from_slice(&cs.uv_flat());
        slice_mut(out_depths, NUM_CORNERS, "out_depths")?.copy_from_slice(&cs.depths);
        Ok(())
    })
}

/// Closest valid cuboid to eight camera-frame points in any order.
///
/// # Safety
/// `points` must hold 24 doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pagbox_rectify(
    points: *const f64,
    out: *mut PagboxCuboid,
) -> PagboxStatus {
    guard(|| {
        let pts = points3(slice(points, 3 * NUM_CORNERS, "points")?)?;
        let c = kabsch_rectify(&pts).map_err(domain)?;
        *out.as_mut().ok_or_else(|| null("out"))? = from_cuboid(&c);
        Ok(())
    })
}

/// Exact intersection-over-union of two oriented boxes.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pagbox_iou3d(
    a: *const PagboxCuboid,
    b: *const PagboxCuboid,
    out: *mut f64,
) -> PagboxStatus {
    guard(|| {
        let a = to_cuboid(a.as_ref().ok_or_else(|| null("a"))?)?;
        let b = to_cuboid(b.as_ref().ok_or_else(|| null("b"))?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = iou3d(&a, &b);
        Ok(())
    })
}

/// Minimum-cost assignment on a row-major 8x8 matrix; row `i` goes to column
/// `out_assignment[i]`.
///
/// # Safety
/// `cost` must hold 64 doubles and `out_assignment` 8 entries; `out_cost` may
/// be null.
#[no_mangle]
pub unsafe extern "C" fn pagbox_hungarian(
    cost: *const f64,
    out_assignment: *mut u32,
    out_cost: *mut f64,
) -> PagboxStatus {
    guard(|| {
        let flat = slice(cost, NUM_CORNERS * NUM_CORNERS, "cost")?;
        let m: [[f64; NUM_CORNERS]; NUM_CORNERS] =
            std::array::from_fn(|r| std::array::from_fn(|c| flat[r * NUM_CORNERS + c]));
        let res = hungarian_assign(&m).map_err(domain)?;
        let out = slice_mut(out_assignment, NUM_CORNERS, "out_assignment")?;
        for (o, &p) in out.iter_mut().zip(&res.permutation) {
            *o = p as u32;
        }
        if let Some(c) = out_cost.as_mut() {
            *c = res.cost;
        }
        Ok(())
    })
}

/// Mean corner distance in pixels and mean relative depth error in percent
/// between corresponding corners; both sets use metric depth.
///
/// # Safety
/// `*_uv` must hold 16 doubles, `*_depths` 8, outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn pagbox_pag(
    pred_uv: *const f64,
    pred_depths: *const f64,
    gt_uv: *const f64,
    gt_depths: *const f64,
    out_pag_uv: *mut f64,
    out_pag_d: *mut f64,
) -> PagboxStatus {
    guard(|| {
        let p = corner_set(
            slice(pred_uv, 2 * NUM_CORNERS, "pred_uv")?,
            slice(pred_depths, NUM_CORNERS, "pred_depths")?,
        )?;
        let g = corner_set(
            slice(gt_uv, 2 * NUM_CORNERS, "gt_uv")?,
            slice(gt_depths, NUM_CORNERS, "gt_depths")?,
        )?;
        let (uv, d) = pag(&p, &g).map_err(domain)?;
        *out_pag_uv.as_mut().ok_or_else(|| null("out_pag_uv"))? = uv;
        *out_pag_d.as_mut().ok_or_else(|| null("out_pag_d"))? = d;
        Ok(())
    })
}

/// Soft-argmax corners and sampled depths from channel-major `8 x height x
/// width` heat and depth planes, mapped to an `image_w x image_h` image.
///
/// # Safety
/// `heat` and `depth` must hold `8 * width * height` doubles, `out_uv` 16
/// and `out_depths` 8.
#[no_mangle]
pub unsafe extern "C" fn pagbox_extract_corners(
    heat: *const f64,
    depth: *const f64,
    width: usize,
    height: usize,
    image_w: f64,
    image_h: f64,
    beta: f64,
    out_uv: *mut f64,
    out_depths: *mut f64,
) -> PagboxStatus {
    guard(|| {
        let n = NUM_CORNERS
            .checked_mul(width)
            .and_then(|v| v.checked_mul(height))
            .ok_or((PagboxStatus::InvalidArgument, "grid too large".to_string()))?;
        let field = HeatField::new(
            width,
            height,
            slice(heat, n, "heat")?.to_vec(),
            slice(depth, n, "depth")?.to_vec(),
        )
        .map_err(domain)?;
        let grid = Grid::new(width, height, image_w, image_h).map_err(domain)?;
        let cs = extract_corners(&field, &grid, beta).map_err(domain)?;
        slice_mut(out_uv, 2 * NUM_CORNERS, "out_uv")?.copy_from_slice(&cs.uv_flat());
        slice_mut(out_depths, NUM_CORNERS, "out_depths")?.copy_from_slice(&cs.depths);
        Ok(())
    })
}

/// Evaluates a prediction file against an annotation file with default
/// options. On success `*out` owns a report to release with
/// [`pagbox_report_free`].
///
/// # Safety
/// Paths must be nul-terminated UTF-8; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pagbox_evaluate_files(
    gt_path: *const c_char,
    pred_path: *const c_char,
    out: *mut *mut PagboxReport,
) -> PagboxStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let gt = read_annotations(path(gt_path, "gt_path")?, ParseMode::Strict).map_err(domain)?;
        let pred =
            read_predictions(path(pred_path, "pred_path")?, ParseMode::Strict).map_err(domain)?;
        let inner =
            evaluate(&pred.records, &gt.records, &EvalOptions::default()).map_err(domain)?;
        *out = Box::into_raw(Box::new(PagboxReport { inner }));
        Ok(())
    })
}

/// Global (instance-weighted) summary of a report.
///
/// # Safety
/// `report` must come from [`pagbox_evaluate_files`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pagbox_report_global(
    report: *const PagboxReport,
    out: *mut PagboxAggregate,
) -> PagboxStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let g = &r.inner.global;
        *out.as_mut().ok_or_else(|| null("out"))? = PagboxAggregate {
            instances: g.instances,
            pag_uv: g.pag_uv.unwrap_or(f64::NAN),
            pag_d: g.pag_d.unwrap_or(f64::NAN),
            nhd: g.nhd.unwrap_or(f64::NAN),
            iou3d: g.iou3d.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Report as a JSON string owned by the caller; release it with
/// [`pagbox_string_free`]. Returns null when `report` is null.
///
/// # Safety
/// `report` must be null or come from [`pagbox_evaluate_files`].
#[no_mangle]
pub unsafe extern "C" fn pagbox_report_json(report: *const PagboxReport) -> *mut c_char {
    match report.as_ref() {
        Some(r) => CString::new(r.inner.to_json()).map_or(ptr::null_mut(), CString::into_raw),
        None => {
            set_error("report is null".into());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `report` must be null or come from [`pagbox_evaluate_files`], and must not
/// be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pagbox_report_free(report: *mut PagboxReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `s` must be null or come from this library, and must not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn pagbox_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
