//! Camera-frame geometry: pinhole projection, cuboid vertices, image-order
//! canonicalization, letterboxing and virtual depth.
//!
//! Conventions: camera frame is +x right, +y down, +z forward. Pixel
//! coordinates `(u, v)` have their origin at the top-left pixel center with
//! `v` growing downward.

use nalgebra::{Matrix3, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CORNERS: usize = 8;

/// Tolerance used when validating rotation matrices.
const ROTATION_TOL: f64 = 1e-9;

/// Pinhole intrinsics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidIntrinsics("non-finite entry".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Builds intrinsics from a row-major 3x3 camera matrix. Skew must be zero
    /// and the last row must be `(0, 0, 1)`.
    pub fn from_row_major(k: &[f64; 9]) -> Result<Self> {
        if k[1] != 0.0 || k[3] != 0.0 || k[6] != 0.0 || k[7] != 0.0 || k[8] != 1.0 {
            return Err(Error::InvalidIntrinsics(
                "expected [[fx,0,cx],[0,fy,cy],[0,0,1]]".into(),
            ));
        }
        Self::new(k[0], k[4], k[2], k[5])
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        [self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.to_row_major())
    }
}

/// Whether depths are metric or in the focal-normalized virtual space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthSpace {
    Metric,
    Virtual,
}

impl std::fmt::Display for DepthSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DepthSpace::Metric => f.write_str("metric"),
            DepthSpace::Virtual => f.write_str("virtual"),
        }
    }
}

/// Eight 3D corner points in the camera frame (meters).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corner3DSet {
    pub points: [Point3<f64>; NUM_CORNERS],
}

impl Corner3DSet {
    pub fn new(points: [Point3<f64>; NUM_CORNERS]) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidCorners("non-finite 3D corner".into()));
        }
        Ok(Self { points })
    }

    pub fn centroid(&self) -> Point3<f64> {
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Point3::from(sum / NUM_CORNERS as f64)
    }

    /// Applies `p -> scale * p` to every corner.
    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            points: self.points.map(|p| Point3::from(p.coords * scale)),
        }
    }
}

/// Eight image-plane corners with per-corner depths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CornerSet {
    pub uv: [Point2<f64>; NUM_CORNERS],
    pub depths: [f64; NUM_CORNERS],
    pub depth_space: DepthSpace,
}

impl CornerSet {
    pub fn new(
        uv: [Point2<f64>; NUM_CORNERS],
        depths: [f64; NUM_CORNERS],
        depth_space: DepthSpace,
    ) -> Result<Self> {
        let cs = Self {
            uv,
            depths,
            depth_space,
        };
        cs.validate()?;
        Ok(cs)
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .uv
            .iter()
            .any(|p| !(p.x.is_finite() && p.y.is_finite()))
        {
            return Err(Error::InvalidCorners("non-finite corner coordinate".into()));
        }
        for (index, &depth) in self.depths.iter().enumerate() {
            if !(depth > 0.0 && depth.is_finite()) {
                return Err(Error::NonPositiveDepth { index, depth });
            }
        }
        Ok(())
    }

    /// Flattened `(u1, v1, ..., u8, v8)`.
    pub fn uv_flat(&self) -> [f64; 2 * NUM_CORNERS] {
        let mut out = [0.0; 2 * NUM_CORNERS];
        for (i, p) in self.uv.iter().enumerate() {
            out[2 * i] = p.x;
            out[2 * i + 1] = p.y;
        }
        out
    }

    pub fn from_flat(
        uv: &[f64; 2 * NUM_CORNERS],
        depths: [f64; NUM_CORNERS],
        depth_space: DepthSpace,
    ) -> Result<Self> {
        let pts = std::array::from_fn(|i| Point2::new(uv[2 * i], uv[2 * i + 1]));
        Self::new(pts, depths, depth_space)
    }

    /// Reorders corners and depths by `perm`: output `i` is input `perm[i]`.
    pub fn permuted(&self, perm: &[usize; NUM_CORNERS]) -> Self {
        Self {
            uv: perm.map(|j| self.uv[j]),
            depths: perm.map(|j| self.depths[j]),
            depth_space: self.depth_space,
        }
    }

    /// Mean of the eight image points.
    pub fn center_2d(&self) -> Point2<f64> {
        mean_point2(&self.uv)
    }
}

pub(crate) fn mean_point2(points: &[Point2<f64>]) -> Point2<f64> {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
    Point2::new(sx / n, sy / n)
}

/// Oriented 3D box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cuboid {
    pub center: Point3<f64>,
    /// Full edge lengths along the box's local x, y, z axes.
    pub size: Vector3<f64>,
    /// Columns are the box axes expressed in the camera frame.
    pub rotation: Matrix3<f64>,
}

impl Cuboid {
    pub fn new(center: Point3<f64>, size: Vector3<f64>, rotation: Matrix3<f64>) -> Result<Self> {
        let c = Self {
            center,
            size,
            rotation,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn axis_aligned(center: Point3<f64>, size: Vector3<f64>) -> Result<Self> {
        Self::new(center, size, Matrix3::identity())
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.center.iter().all(|v| v.is_finite())
            && self.size.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidCuboid("non-finite field".into()));
        }
        if self.size.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidCuboid(format!(
                "sizes must be positive, got {:?}",
                self.size.as_slice()
            )));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if ortho > ROTATION_TOL {
            return Err(Error::InvalidCuboid(format!(
                "rotation is not orthonormal (max deviation {ortho:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidCuboid(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.size.x * self.size.y * self.size.z
    }

    /// Length of the space diagonal.
    pub fn diagonal(&self) -> f64 {
        self.size.norm()
    }

    pub fn corners(&self) -> Corner3DSet {
        cuboid_to_corners(self)
    }

    /// Applies the rigid motion `x -> rot * x + trans`.
    pub fn transformed(&self, rot: &Matrix3<f64>, trans: &Vector3<f64>) -> Self {
        Self {
            center: Point3::from(rot * self.center.coords + trans),
            size: self.size,
            rotation: rot * self.rotation,
        }
    }
}

/// Unit-cube template vertex `i` in sign-bit order: bit 0 selects the sign of
/// x, bit 1 of y, bit 2 of z (clear = negative).
pub fn template_vertex(i: usize) -> Vector3<f64> {
    let sign = |bit: usize| if i & (1 << bit) != 0 { 0.5 } else { -0.5 };
    Vector3::new(sign(0), sign(1), sign(2))
}

/// Expands a cuboid into its eight vertices in template order.
pub fn cuboid_to_corners(cuboid: &Cuboid) -> Corner3DSet {
    let points = std::array::from_fn(|i| {
        let local = template_vertex(i).component_mul(&cuboid.size);
        cuboid.center + cuboid.rotation * local
    });
    Corner3DSet { points }
}

pub fn project_point(p: &Point3<f64>, k: &Intrinsics) -> Point2<f64> {
    Point2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
}

pub fn project_corners(c3d: &Corner3DSet, k: &Intrinsics) -> Result<CornerSet> {
    for (index, p) in c3d.points.iter().enumerate() {
        if !(p.z > 0.0) {
            return Err(Error::NonPositiveDepth { index, depth: p.z });
        }
    }
    Ok(CornerSet {
        uv: c3d.points.map(|p| project_point(&p, k)),
        depths: c3d.points.map(|p| p.z),
        depth_space: DepthSpace::Metric,
    })
}

pub fn unproject_corners(cs: &CornerSet, k: &Intrinsics) -> Result<Corner3DSet> {
    if cs.depth_space == DepthSpace::Virtual {
        return Err(Error::VirtualDepthNotConverted);
    }
    for (index, &depth) in cs.depths.iter().enumerate() {
        if !(depth > 0.0) {
            return Err(Error::NonPositiveDepth { index, depth });
        }
    }
    let points = std::array::from_fn(|i| {
        let (p, d) = (cs.uv[i], cs.depths[i]);
        Point3::new((p.x - k.cx) * d / k.fx, (p.y - k.cy) * d / k.fy, d)
    });
    Ok(Corner3DSet { points })
}

/// Permutation that puts corners in image order: the four lowest points in
/// the image (largest `v`) first, then the four highest, each group sorted
/// left to right. Output position `i` holds input corner `perm[i]`.
///
/// Ties: the group split sorts by `v` descending, then `u` ascending, then
/// input index; within a group the order is `u` ascending, then input index.
pub fn canonical_permutation(uv: &[Point2<f64>; NUM_CORNERS]) -> [usize; NUM_CORNERS] {
    let mut by_v: [usize; NUM_CORNERS] = std::array::from_fn(|i| i);
    by_v.sort_by(|&a, &b| {
        uv[b]
            .y
            .total_cmp(&uv[a].y)
            .then(uv[a].x.total_cmp(&uv[b].x))
            .then(a.cmp(&b))
    });
    let by_u = |a: &usize, b: &usize| uv[*a].x.total_cmp(&uv[*b].x).then(a.cmp(b));
    by_v[..4].sort_by(by_u);
    by_v[4..].sort_by(by_u);
    by_v
}

pub fn canonicalize_image_order(cs: &CornerSet) -> CornerSet {
    cs.permuted(&canonical_permutation(&cs.uv))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Aspect-preserving resize of a `src_w x src_h` image into a `dst x dst`
/// square, centered with integer padding (odd remainders put the extra pixel
/// on the trailing side).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub src_w: f64,
    pub src_h: f64,
    pub dst: f64,
}

impl LetterboxTransform {
    pub fn new(src_w: f64, src_h: f64, dst: f64) -> Result<Self> {
        if !(src_w > 0.0 && src_h > 0.0 && dst > 0.0) {
            return Err(Error::NonPositiveInput("letterbox dimensions"));
        }
        let scale = dst / src_w.max(src_h);
        let pad = |src: f64| ((dst - (src * scale).round()) / 2.0).floor().max(0.0);
        Ok(Self {
            scale,
            pad_x: pad(src_w),
            pad_y: pad(src_h),
            src_w,
            src_h,
            dst,
        })
    }

    pub fn forward(&self, p: Point2<f64>) -> Point2<f64> {
        Point2::new(p.x * self.scale + self.pad_x, p.y * self.scale + self.pad_y)
    }

    pub fn inverse(&self, p: Point2<f64>) -> Point2<f64> {
        Point2::new(
            (p.x - self.pad_x) / self.scale,
            (p.y - self.pad_y) / self.scale,
        )
    }

    pub fn apply(&self, p: Point2<f64>, direction: Direction) -> Point2<f64> {
        match direction {
            Direction::Forward => self.forward(p),
            Direction::Inverse => self.inverse(p),
        }
    }
}

pub fn letterbox_points(
    points: &[Point2<f64>],
    t: &LetterboxTransform,
    direction: Direction,
) -> Vec<Point2<f64>> {
    points.iter().map(|&p| t.apply(p, direction)).collect()
}

/// Fixed virtual camera used to normalize depth across focal lengths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirtualCamera {
    pub focal: f64,
    pub height: f64,
}

impl Default for VirtualCamera {
    fn default() -> Self {
        Self {
            focal: 512.0,
            height: 512.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthConversion {
    ToVirtual,
    ToMetric,
}

/// `d_v = d * (f_v / f) * (H / H_v)` and its inverse.
pub fn virtual_depth_convert(
    depth: f64,
    focal: f64,
    image_height: f64,
    virtual_camera: &VirtualCamera,
    direction: DepthConversion,
) -> Result<f64> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveInput("depth"));
    }
    if !(focal > 0.0) {
        return Err(Error::NonPositiveInput("focal length"));
    }
    if !(image_height > 0.0) {
        return Err(Error::NonPositiveInput("image height"));
    }
    if !(virtual_camera.focal > 0.0 && virtual_camera.height > 0.0) {
        return Err(Error::NonPositiveInput("virtual camera"));
    }
    let factor = (virtual_camera.focal / focal) * (image_height / virtual_camera.height);
    Ok(match direction {
        DepthConversion::ToVirtual => depth * factor,
        DepthConversion::ToMetric => depth / factor,
    })
}

/// Converts every depth of a corner set into `target` space. The vertical
/// focal length `fy` pairs with the image height.
pub fn convert_corner_depths(
    cs: &CornerSet,
    focal: f64,
    image_height: f64,
    virtual_camera: &VirtualCamera,
    target: DepthSpace,
) -> Result<CornerSet> {
    if cs.depth_space == target {
        return Ok(*cs);
    }
    let direction = match target {
        DepthSpace::Virtual => DepthConversion::ToVirtual,
        DepthSpace::Metric => DepthConversion::ToMetric,
    };
    let mut depths = cs.depths;
    for d in depths.iter_mut() {
        *d = virtual_depth_convert(*d, focal, image_height, virtual_camera, direction)?;
    }
    Ok(CornerSet {
        uv: cs.uv,
        depths,
        depth_space: target,
    })
}

/// Center and isotropic size prior from a corner cloud: the mean corner and
/// `(2/sqrt(3)) * r` per axis, `r` being the mean center-to-corner distance.
pub fn cube_prior(c3d: &Corner3DSet) -> (Point3<f64>, Vector3<f64>) {
    let center = c3d.centroid();
    let r = c3d.points.iter().map(|p| (p - center).norm()).sum::<f64>() / NUM_CORNERS as f64;
    let edge = 2.0 / 3f64.sqrt() * r;
    (center, Vector3::repeat(edge))
}
