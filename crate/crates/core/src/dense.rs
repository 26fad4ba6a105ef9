//! Dense corner fields on a prediction grid.
//!
//! Grid coordinates are cell indices: cell `(x, y)` has coordinate `(x, y)`
//! with `x in 0..width`, `y in 0..height`. Soft-argmax returns points in this
//! frame; [`Grid::to_image`] maps them to image pixels by aligning cell
//! centers with pixel centers.

use nalgebra::Point2;

use crate::error::{Error, Result};
use crate::geometry::{mean_point2, CornerSet, DepthSpace, NUM_CORNERS};

pub const DEFAULT_GRID: usize = 128;
pub const DEFAULT_BETA: f64 = 100.0;
/// Lower bound on `2 sigma^2` in squared grid cells.
pub const MIN_TWO_SIGMA2: f64 = 1.0;

/// Prediction grid and the image it covers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub image_w: f64,
    pub image_h: f64,
}

impl Grid {
    pub fn new(width: usize, height: usize, image_w: f64, image_h: f64) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::InvalidGrid(format!(
                "grid must be at least 2x2, got {width}x{height}"
            )));
        }
        if !(image_w > 0.0 && image_h > 0.0) {
            return Err(Error::InvalidGrid(
                "image dimensions must be positive".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            image_w,
            image_h,
        })
    }

    /// Square grid whose cells coincide with image pixels.
    pub fn square(size: usize) -> Result<Self> {
        Self::new(size, size, size as f64, size as f64)
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    fn sx(&self) -> f64 {
        self.image_w / self.width as f64
    }

    fn sy(&self) -> f64 {
        self.image_h / self.height as f64
    }

    pub fn to_image(&self, p: Point2<f64>) -> Point2<f64> {
        if self.is_identity() {
            return p;
        }
        Point2::new((p.x + 0.5) * self.sx() - 0.5, (p.y + 0.5) * self.sy() - 0.5)
    }

    pub fn from_image(&self, p: Point2<f64>) -> Point2<f64> {
        if self.is_identity() {
            return p;
        }
        Point2::new((p.x + 0.5) / self.sx() - 0.5, (p.y + 0.5) / self.sy() - 0.5)
    }

    fn is_identity(&self) -> bool {
        self.image_w == self.width as f64 && self.image_h == self.height as f64
    }
}

/// Normalized 2D box `(x1, y1, x2, y2)` in `[0, 1]` image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl NormBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x2 - self.x1 > 0.0 && self.y2 - self.y1 > 0.0) {
            return Err(Error::DegenerateBox(format!(
                "({}, {}, {}, {})",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> Point2<f64> {
        Point2::new(0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }
}

/// Four-channel box prior `(d_x, d_y, u, v)` sampled at cell centers.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxPriorMap {
    pub width: usize,
    pub height: usize,
    /// Channel-major: `data[c * h * w + y * w + x]`.
    pub data: Vec<f64>,
}

impl BoxPriorMap {
    pub fn at(&self, channel: usize, x: usize, y: usize) -> f64 {
        self.data[channel * self.width * self.height + y * self.width + x]
    }
}

/// Box-relative encoding of a single normalized location.
pub fn box_prior_at(b: &NormBox, x: f64, y: f64) -> [f64; 4] {
    let c = b.center();
    let (w, h) = (b.width(), b.height());
    [(x - c.x) / w, (y - c.y) / h, (x - b.x1) / w, (y - b.y1) / h]
}

pub fn box_prior_map(b: &NormBox, width: usize, height: usize) -> Result<BoxPriorMap> {
    b.validate()?;
    let plane = width * height;
    let mut data = vec![0.0; 4 * plane];
    for y in 0..height {
        let ny = (y as f64 + 0.5) / height as f64;
        for x in 0..width {
            let nx = (x as f64 + 0.5) / width as f64;
            for (c, value) in box_prior_at(b, nx, ny).into_iter().enumerate() {
                data[c * plane + y * width + x] = value;
            }
        }
    }
    Ok(BoxPriorMap {
        width,
        height,
        data,
    })
}

/// Nine box keypoints: corners (TL, TR, BL, BR), edge midpoints
/// (top, bottom, left, right), then the center.
pub fn box_keypoints(b: &NormBox) -> Result<[Point2<f64>; 9]> {
    b.validate()?;
    let c = b.center();
    Ok([
        Point2::new(b.x1, b.y1),
        Point2::new(b.x2, b.y1),
        Point2::new(b.x1, b.y2),
        Point2::new(b.x2, b.y2),
        Point2::new(c.x, b.y1),
        Point2::new(c.x, b.y2),
        Point2::new(b.x1, c.y),
        Point2::new(b.x2, c.y),
        c,
    ])
}

/// `2 sigma_i^2 = (|p_i - c| / 5)^2`, floored at [`MIN_TWO_SIGMA2`].
pub fn adaptive_sigma2(
    corners: &[Point2<f64>; NUM_CORNERS],
    center: Point2<f64>,
) -> [f64; NUM_CORNERS] {
    corners.map(|p| ((p - center).norm() / 5.0).powi(2).max(MIN_TWO_SIGMA2))
}

/// [`adaptive_sigma2`] about the mean of the corners.
pub fn adaptive_sigma2_centered(corners: &[Point2<f64>; NUM_CORNERS]) -> [f64; NUM_CORNERS] {
    adaptive_sigma2(corners, mean_point2(corners))
}

/// Gaussian target heatmaps, one channel per corner.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetHeatmaps {
    pub width: usize,
    pub height: usize,
    /// Channel-major `8 x h x w` values in `(0, 1]`.
    pub values: Vec<f64>,
    pub sigmas2: [f64; NUM_CORNERS],
}

impl TargetHeatmaps {
    pub fn channel(&self, i: usize) -> &[f64] {
        let plane = self.width * self.height;
        &self.values[i * plane..(i + 1) * plane]
    }
}

/// Dense `exp(-|(x,y) - p_i|^2 / (2 sigma_i^2))` over every cell, with
/// corners in grid coordinates.
pub fn target_heatmaps(
    corners: &[Point2<f64>; NUM_CORNERS],
    width: usize,
    height: usize,
    sigmas2: &[f64; NUM_CORNERS],
) -> Result<TargetHeatmaps> {
    if sigmas2.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::NonPositiveInput("2 sigma^2"));
    }
    let plane = width * height;
    let mut values = vec![0.0; NUM_CORNERS * plane];
    for (i, (p, &s2)) in corners.iter().zip(sigmas2).enumerate() {
        let out = &mut values[i * plane..(i + 1) * plane];
        for y in 0..height {
            let dy = y as f64 - p.y;
            for x in 0..width {
                let dx = x as f64 - p.x;
                out[y * width + x] = (-(dx * dx + dy * dy) / s2).exp();
            }
        }
    }
    Ok(TargetHeatmaps {
        width,
        height,
        values,
        sigmas2: *sigmas2,
    })
}

/// Soft-argmax of one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftArgmax {
    /// Expected coordinate in grid units.
    pub point: Point2<f64>,
    /// Softmax distribution over cells, row-major.
    pub pi: Vec<f64>,
}

/// `pi = softmax(beta * H)`, `p = sum (x, y) * pi`. The channel max is
/// subtracted before exponentiation; sums run in row-major order.
pub fn soft_argmax(field: &[f64], width: usize, height: usize, beta: f64) -> SoftArgmax {
    debug_assert_eq!(field.len(), width * height);
    let max = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut pi: Vec<f64> = field.iter().map(|&h| (beta * (h - max)).exp()).collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    let (mut u, mut v) = (0.0, 0.0);
    for y in 0..height {
        for x in 0..width {
            let p = pi[y * width + x];
            u += x as f64 * p;
            v += y as f64 * p;
        }
    }
    SoftArgmax {
        point: Point2::new(u, v),
        pi,
    }
}

/// Vector-Jacobian product of soft-argmax: given upstream gradients on the
/// extracted point, accumulates `du/dH(a,b) = beta * pi(a,b) * (a - u)` (and
/// the `v` analogue) into `out`.
pub fn soft_argmax_vjp(
    sa: &SoftArgmax,
    width: usize,
    beta: f64,
    grad_point: [f64; 2],
    out: &mut [f64],
) {
    let (u, v) = (sa.point.x, sa.point.y);
    for (idx, (&p, o)) in sa.pi.iter().zip(out.iter_mut()).enumerate() {
        let (x, y) = ((idx % width) as f64, (idx / width) as f64);
        *o += beta * p * (grad_point[0] * (x - u) + grad_point[1] * (y - v));
    }
}

#[derive(Clone, Copy, Debug)]
struct BilinearStencil {
    x0: usize,
    y0: usize,
    fx: f64,
    fy: f64,
    /// Whether each coordinate was inside the clamp range (non-zero slope).
    free_x: bool,
    free_y: bool,
}

fn stencil(width: usize, height: usize, p: Point2<f64>) -> BilinearStencil {
    let axis = |c: f64, n: usize| {
        let hi = (n - 1) as f64;
        let free = c > 0.0 && c < hi;
        let c = c.clamp(0.0, hi);
        let i0 = (c.floor() as usize).min(n - 2);
        (i0, c - i0 as f64, free)
    };
    let (x0, fx, free_x) = axis(p.x, width);
    let (y0, fy, free_y) = axis(p.y, height);
    BilinearStencil {
        x0,
        y0,
        fx,
        fy,
        free_x,
        free_y,
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Bilinear interpolation at `p` (grid coordinates), clamped to the grid.
/// Requires `width, height >= 2`.
pub fn bilinear_sample(field: &[f64], width: usize, height: usize, p: Point2<f64>) -> f64 {
    let s = stencil(width, height, p);
    let at = |x: usize, y: usize| field[y * width + x];
    let top = lerp(at(s.x0, s.y0), at(s.x0 + 1, s.y0), s.fx);
    let bottom = lerp(at(s.x0, s.y0 + 1), at(s.x0 + 1, s.y0 + 1), s.fx);
    lerp(top, bottom, s.fy)
}

/// Partial derivatives of [`bilinear_sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearGrad {
    pub value: f64,
    /// `d value / d p`; zero along an axis whose coordinate was clamped.
    pub d_point: [f64; 2],
    /// `(cell index, d value / d field[cell])` for the four stencil cells.
    pub d_field: [(usize, f64); 4],
}

pub fn bilinear_sample_grad(
    field: &[f64],
    width: usize,
    height: usize,
    p: Point2<f64>,
) -> BilinearGrad {
    let s = stencil(width, height, p);
    let idx = |x: usize, y: usize| y * width + x;
    let (i00, i10, i01, i11) = (
        idx(s.x0, s.y0),
        idx(s.x0 + 1, s.y0),
        idx(s.x0, s.y0 + 1),
        idx(s.x0 + 1, s.y0 + 1),
    );
    let (z00, z10, z01, z11) = (field[i00], field[i10], field[i01], field[i11]);
    let top = lerp(z00, z10, s.fx);
    let bottom = lerp(z01, z11, s.fx);
    let value = lerp(top, bottom, s.fy);
    let du = (1.0 - s.fy) * (z10 - z00) + s.fy * (z11 - z01);
    let dv = bottom - top;
    BilinearGrad {
        value,
        d_point: [
            if s.free_x { du } else { 0.0 },
            if s.free_y { dv } else { 0.0 },
        ],
        d_field: [
            (i00, (1.0 - s.fx) * (1.0 - s.fy)),
            (i10, s.fx * (1.0 - s.fy)),
            (i01, (1.0 - s.fx) * s.fy),
            (i11, s.fx * s.fy),
        ],
    }
}

/// Eight corner heatmaps `H` and depth maps `Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatField {
    pub width: usize,
    pub height: usize,
    /// Channel-major `8 x h x w`, values in `[0, 1]`.
    pub heat: Vec<f64>,
    /// Channel-major `8 x h x w`, values `>= 0`.
    pub depth: Vec<f64>,
}

impl HeatField {
    pub fn new(width: usize, height: usize, heat: Vec<f64>, depth: Vec<f64>) -> Result<Self> {
        let f = Self {
            width,
            height,
            heat,
            depth,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = NUM_CORNERS * self.width * self.height;
        for len in [self.heat.len(), self.depth.len()] {
            if len != expected {
                return Err(Error::ShapeMismatch {
                    expected,
                    actual: len,
                });
            }
        }
        if self.heat.iter().any(|h| !(0.0..=1.0).contains(h)) {
            return Err(Error::InvalidCorners(
                "heatmap values must lie in [0, 1]".into(),
            ));
        }
        if self.depth.iter().any(|z| !(*z >= 0.0 && z.is_finite())) {
            return Err(Error::InvalidCorners(
                "depth maps must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn plane(&self) -> usize {
        self.width * self.height
    }

    pub fn heat_channel(&self, i: usize) -> &[f64] {
        &self.heat[i * self.plane()..(i + 1) * self.plane()]
    }

    pub fn depth_channel(&self, i: usize) -> &[f64] {
        &self.depth[i * self.plane()..(i + 1) * self.plane()]
    }
}

/// Soft-argmax corners plus depths sampled at them, in grid coordinates.
pub fn extract_grid_corners(
    field: &HeatField,
    beta: f64,
) -> ([Point2<f64>; NUM_CORNERS], [f64; NUM_CORNERS]) {
    let mut pts = [Point2::origin(); NUM_CORNERS];
    let mut depths = [0.0; NUM_CORNERS];
    for i in 0..NUM_CORNERS {
        let sa = soft_argmax(field.heat_channel(i), field.width, field.height, beta);
        pts[i] = sa.point;
        depths[i] = bilinear_sample(field.depth_channel(i), field.width, field.height, sa.point);
    }
    (pts, depths)
}

/// Extracts a corner set in image pixels with virtual depths.
pub fn extract_corners(field: &HeatField, grid: &Grid, beta: f64) -> Result<CornerSet> {
    if field.width != grid.width || field.height != grid.height {
        return Err(Error::ShapeMismatch {
            expected: grid.cells(),
            actual: field.plane(),
        });
    }
    let (pts, depths) = extract_grid_corners(field, beta);
    CornerSet::new(pts.map(|p| grid.to_image(p)), depths, DepthSpace::Virtual)
}
