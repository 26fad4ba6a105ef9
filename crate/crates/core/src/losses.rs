//! Heatmap, coordinate and depth losses with analytic gradients.
//!
//! The heatmap head is parameterized by pre-sigmoid logits and the depth head
//! by pre-softplus values, so [`grad_total`] returns gradients with respect to
//! those raw fields. [`fit_heatmaps`] runs plain gradient descent on them and
//! stands in for a trained network when checking that the losses actually
//! produce accurate corners and depths.

use nalgebra::Point2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dense::{
    adaptive_sigma2_centered, extract_grid_corners, soft_argmax, soft_argmax_vjp, target_heatmaps,
    BilinearGrad, Grid, HeatField, TargetHeatmaps, DEFAULT_BETA,
};
use crate::error::{Error, Result};
use crate::geometry::{CornerSet, DepthSpace, NUM_CORNERS};

pub const DEFAULT_DELTA: f64 = 1.0;
pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 50.0;
pub const DEFAULT_EPS: f64 = 1e-6;

/// Huber-style smooth L1: quadratic below `delta`, linear above.
pub fn smooth_l1(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a < delta {
        0.5 * x * x / delta
    } else {
        a - 0.5 * delta
    }
}

pub fn smooth_l1_grad(x: f64, delta: f64) -> f64 {
    if x.abs() < delta {
        x / delta
    } else {
        x.signum()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Per-cell heatmap loss weights: `lambda` where the target exceeds `tau`,
/// 1 elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct PeakWeights {
    pub values: Vec<f64>,
    pub tau: f64,
    pub lambda: f64,
}

pub fn peak_weights(targets: &TargetHeatmaps, tau: f64, lambda: f64) -> Result<PeakWeights> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "tau must lie in (0, 1), got {tau}"
        )));
    }
    if !(lambda >= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "lambda must be >= 1, got {lambda}"
        )));
    }
    let values = targets
        .values
        .iter()
        .map(|&w| if w > tau { lambda } else { 1.0 })
        .collect();
    Ok(PeakWeights {
        values,
        tau,
        lambda,
    })
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch { expected, actual });
    }
    Ok(())
}

/// `sum A * SmoothL1(H - W) / (sum A + eps)`.
pub fn loss_coarse(
    heat: &[f64],
    target: &[f64],
    weights: &[f64],
    delta: f64,
    eps: f64,
) -> Result<f64> {
    check_len(heat.len(), target.len())?;
    check_len(heat.len(), weights.len())?;
    let (mut num, mut den) = (0.0, 0.0);
    for ((&h, &w), &a) in heat.iter().zip(target).zip(weights) {
        num += a * smooth_l1(h - w, delta);
        den += a;
    }
    Ok(num / (den + eps))
}

/// Mean over corners of the per-coordinate smooth L1, summed over `u` and `v`.
pub fn loss_fine(
    predicted: &[Point2<f64>; NUM_CORNERS],
    truth: &[Point2<f64>; NUM_CORNERS],
    delta: f64,
) -> f64 {
    predicted
        .iter()
        .zip(truth)
        .map(|(p, q)| smooth_l1(p.x - q.x, delta) + smooth_l1(p.y - q.y, delta))
        .sum::<f64>()
        / NUM_CORNERS as f64
}

/// `sum H * SmoothL1(Z - d_i) / (sum H + eps)` with each channel's target
/// depth broadcast over the grid.
pub fn loss_depth(
    heat: &[f64],
    depth: &[f64],
    target_depths: &[f64; NUM_CORNERS],
    delta: f64,
    eps: f64,
) -> Result<f64> {
    check_len(heat.len(), depth.len())?;
    if !heat.len().is_multiple_of(NUM_CORNERS) {
        return Err(Error::ShapeMismatch {
            expected: NUM_CORNERS * (heat.len() / NUM_CORNERS),
            actual: heat.len(),
        });
    }
    let plane = heat.len() / NUM_CORNERS;
    let (mut num, mut den) = (0.0, 0.0);
    for (idx, (&h, &z)) in heat.iter().zip(depth).enumerate() {
        num += h * smooth_l1(z - target_depths[idx / plane], delta);
        den += h;
    }
    Ok(num / (den + eps))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub coarse: f64,
    pub fine: f64,
    pub depth: f64,
}

impl LossWeights {
    pub const WARMUP: LossWeights = LossWeights {
        coarse: 50.0,
        fine: 0.0,
        depth: 0.0,
    };
    pub const FINAL: LossWeights = LossWeights {
        coarse: 1.0,
        fine: 2.0,
        depth: 5.0,
    };

    pub fn new(coarse: f64, fine: f64, depth: f64) -> Result<Self> {
        if [coarse, fine, depth].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidConfig(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(Self {
            coarse,
            fine,
            depth,
        })
    }
}

/// Coarse-only weights during warm-up, then a linear ramp from the warm-up
/// weights (reached at `warmup_epochs`) to the final weights at
/// `total_epochs`.
pub fn schedule(epoch: usize, total_epochs: usize, warmup_epochs: usize) -> Result<LossWeights> {
    if warmup_epochs >= total_epochs {
        return Err(Error::InvalidConfig(format!(
            "warm-up ({warmup_epochs}) must be shorter than training ({total_epochs})"
        )));
    }
    if epoch > total_epochs {
        return Err(Error::InvalidConfig(format!(
            "epoch {epoch} beyond total {total_epochs}"
        )));
    }
    if epoch < warmup_epochs {
        return Ok(LossWeights::WARMUP);
    }
    let t = (epoch - warmup_epochs) as f64 / (total_epochs - warmup_epochs) as f64;
    let (a, b) = (LossWeights::WARMUP, LossWeights::FINAL);
    Ok(LossWeights {
        coarse: a.coarse + (b.coarse - a.coarse) * t,
        fine: a.fine + (b.fine - a.fine) * t,
        depth: a.depth + (b.depth - a.depth) * t,
    })
}

/// Numerical constants shared by the loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub beta: f64,
    pub delta: f64,
    pub eps: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            delta: DEFAULT_DELTA,
            eps: DEFAULT_EPS,
        }
    }
}

/// Supervision for one instance on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    pub width: usize,
    pub height: usize,
    pub heatmaps: TargetHeatmaps,
    pub peak: PeakWeights,
    /// Ground-truth corners in grid coordinates.
    pub corners: [Point2<f64>; NUM_CORNERS],
    pub depths: [f64; NUM_CORNERS],
}

impl LossTargets {
    /// Builds targets with adaptive Gaussian widths about the corner mean.
    pub fn new(
        corners: [Point2<f64>; NUM_CORNERS],
        depths: [f64; NUM_CORNERS],
        width: usize,
        height: usize,
        tau: f64,
        lambda: f64,
    ) -> Result<Self> {
        let sigmas2 = adaptive_sigma2_centered(&corners);
        let heatmaps = target_heatmaps(&corners, width, height, &sigmas2)?;
        let peak = peak_weights(&heatmaps, tau, lambda)?;
        Ok(Self {
            width,
            height,
            heatmaps,
            peak,
            corners,
            depths,
        })
    }

    pub fn len(&self) -> usize {
        NUM_CORNERS * self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub l_coarse: f64,
    pub l_fine: f64,
    pub l_depth: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Weighted sum of the three loss terms for a field.
pub fn total_loss(
    field: &HeatField,
    targets: &LossTargets,
    weights: &LossWeights,
    params: &LossParams,
) -> Result<LossReport> {
    check_len(targets.len(), field.heat.len())?;
    check_len(targets.len(), field.depth.len())?;
    let l_coarse = loss_coarse(
        &field.heat,
        &targets.heatmaps.values,
        &targets.peak.values,
        params.delta,
        params.eps,
    )?;
    let (corners, _) = extract_grid_corners(field, params.beta);
    let l_fine = loss_fine(&corners, &targets.corners, params.delta);
    let l_depth = loss_depth(
        &field.heat,
        &field.depth,
        &targets.depths,
        params.delta,
        params.eps,
    )?;
    Ok(LossReport {
        l_coarse,
        l_fine,
        l_depth,
        total: weights.coarse * l_coarse + weights.fine * l_fine + weights.depth * l_depth,
        weights: *weights,
    })
}

/// `H = sigmoid(logits)`, `Z = softplus(z_raw)`.
pub fn field_from_raw(
    width: usize,
    height: usize,
    logits: &[f64],
    z_raw: &[f64],
) -> Result<HeatField> {
    let expected = NUM_CORNERS * width * height;
    check_len(expected, logits.len())?;
    check_len(expected, z_raw.len())?;
    Ok(HeatField {
        width,
        height,
        heat: logits.iter().map(|&l| sigmoid(l)).collect(),
        depth: z_raw.iter().map(|&r| softplus(r)).collect(),
    })
}

/// Gradients with respect to the raw heatmap logits and raw depth values.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub logits: Vec<f64>,
    pub z_raw: Vec<f64>,
}

/// Unweighted loss terms and their gradients with respect to the raw fields.
#[derive(Clone, Debug, PartialEq)]
pub struct TermGradients {
    pub l_coarse: f64,
    pub l_fine: f64,
    pub l_depth: f64,
    /// `d l_coarse / d logits`.
    pub coarse: Vec<f64>,
    /// `d l_fine / d logits`, through soft-argmax.
    pub fine: Vec<f64>,
    /// `d l_depth / d logits`, through the reliability weights.
    pub depth_heat: Vec<f64>,
    /// `d l_depth / d z_raw`.
    pub depth_z: Vec<f64>,
    /// Denominator of the coarse term, `sum(A) + eps`.
    pub coarse_norm: f64,
    /// Denominator of the depth term, `sum(H) + eps`.
    pub depth_norm: f64,
}

impl TermGradients {
    pub fn report(&self, weights: &LossWeights) -> LossReport {
        LossReport {
            l_coarse: self.l_coarse,
            l_fine: self.l_fine,
            l_depth: self.l_depth,
            total: weights.coarse * self.l_coarse
                + weights.fine * self.l_fine
                + weights.depth * self.l_depth,
            weights: *weights,
        }
    }

    pub fn combine(&self, weights: &LossWeights) -> Gradients {
        let logits = self
            .coarse
            .iter()
            .zip(&self.fine)
            .zip(&self.depth_heat)
            .map(|((c, f), d)| weights.coarse * c + weights.fine * f + weights.depth * d)
            .collect();
        let z_raw = self.depth_z.iter().map(|g| weights.depth * g).collect();
        Gradients { logits, z_raw }
    }
}

/// Every loss term at `(logits, z_raw)` with its exact gradient.
///
/// Heatmap gradients are formed with respect to `H` and then chained through
/// the sigmoid; the coordinate term uses the soft-argmax Jacobian
/// `du/dH(a,b) = beta * pi(a,b) * (a - u)`. Depth gradients chain through
/// the softplus.
pub fn grad_terms(
    logits: &[f64],
    z_raw: &[f64],
    targets: &LossTargets,
    params: &LossParams,
) -> Result<TermGradients> {
    let (w, h) = (targets.width, targets.height);
    let field = field_from_raw(w, h, logits, z_raw)?;
    let n = field.heat.len();
    let plane = w * h;
    let (delta, eps) = (params.delta, params.eps);
    let dsig: Vec<f64> = field.heat.iter().map(|s| s * (1.0 - s)).collect();

    // coarse
    let a = &targets.peak.values;
    let wt = &targets.heatmaps.values;
    let den_a = a.iter().sum::<f64>() + eps;
    let mut num = 0.0;
    let mut coarse = vec![0.0; n];
    for i in 0..n {
        let r = field.heat[i] - wt[i];
        num += a[i] * smooth_l1(r, delta);
        coarse[i] = a[i] * smooth_l1_grad(r, delta) / den_a * dsig[i];
    }
    let l_coarse = num / den_a;

    // fine
    let mut l_fine = 0.0;
    let mut fine = vec![0.0; n];
    for c in 0..NUM_CORNERS {
        let sa = soft_argmax(field.heat_channel(c), w, h, params.beta);
        let gt = targets.corners[c];
        let (ru, rv) = (sa.point.x - gt.x, sa.point.y - gt.y);
        l_fine += smooth_l1(ru, delta) + smooth_l1(rv, delta);
        let upstream = [
            smooth_l1_grad(ru, delta) / NUM_CORNERS as f64,
            smooth_l1_grad(rv, delta) / NUM_CORNERS as f64,
        ];
        soft_argmax_vjp(
            &sa,
            w,
            params.beta,
            upstream,
            &mut fine[c * plane..(c + 1) * plane],
        );
    }
    l_fine /= NUM_CORNERS as f64;
    for (g, d) in fine.iter_mut().zip(&dsig) {
        *g *= d;
    }

    // depth
    let den_h = field.heat.iter().sum::<f64>() + eps;
    let residual: Vec<f64> = (0..n)
        .map(|i| field.depth[i] - targets.depths[i / plane])
        .collect();
    let num: f64 = field
        .heat
        .iter()
        .zip(&residual)
        .map(|(h, r)| h * smooth_l1(*r, delta))
        .sum();
    let l_depth = num / den_h;
    let depth_heat = (0..n)
        .map(|i| (smooth_l1(residual[i], delta) - l_depth) / den_h * dsig[i])
        .collect();
    let depth_z = (0..n)
        .map(|i| field.heat[i] * smooth_l1_grad(residual[i], delta) / den_h * sigmoid(z_raw[i]))
        .collect();

    Ok(TermGradients {
        l_coarse,
        l_fine,
        l_depth,
        coarse,
        fine,
        depth_heat,
        depth_z,
        coarse_norm: den_a,
        depth_norm: den_h,
    })
}

/// Weighted total loss at `(logits, z_raw)` and its exact gradient.
pub fn grad_total(
    logits: &[f64],
    z_raw: &[f64],
    targets: &LossTargets,
    weights: &LossWeights,
    params: &LossParams,
) -> Result<(LossReport, Gradients)> {
    let terms = grad_terms(logits, z_raw, targets, params)?;
    Ok((terms.report(weights), terms.combine(weights)))
}

/// Gradients of the extracted depths `d_i = Sample(Z_i, softargmax(H_i))`
/// contracted with `upstream[i]`, with respect to logits and raw depths.
/// Covers the path through the sampling location as well as the sampled
/// values.
pub fn grad_extracted_depths(
    width: usize,
    height: usize,
    logits: &[f64],
    z_raw: &[f64],
    beta: f64,
    upstream: &[f64; NUM_CORNERS],
) -> Result<(Vec<f64>, Gradients)> {
    let field = field_from_raw(width, height, logits, z_raw)?;
    let plane = width * height;
    let mut g_heat = vec![0.0; field.heat.len()];
    let mut g_depth = vec![0.0; field.heat.len()];
    let mut values = Vec::with_capacity(NUM_CORNERS);
    for c in 0..NUM_CORNERS {
        let sa = soft_argmax(field.heat_channel(c), width, height, beta);
        let bg: BilinearGrad =
            crate::dense::bilinear_sample_grad(field.depth_channel(c), width, height, sa.point);
        values.push(bg.value);
        let up = upstream[c];
        soft_argmax_vjp(
            &sa,
            width,
            beta,
            [up * bg.d_point[0], up * bg.d_point[1]],
            &mut g_heat[c * plane..(c + 1) * plane],
        );
        for (idx, wgt) in bg.d_field {
            g_depth[c * plane + idx] += up * wgt;
        }
    }
    let grads = Gradients {
        logits: g_heat
            .iter()
            .zip(&field.heat)
            .map(|(g, s)| g * s * (1.0 - s))
            .collect(),
        z_raw: g_depth
            .iter()
            .zip(z_raw)
            .map(|(g, &r)| g * sigmoid(r))
            .collect(),
    };
    Ok((values, grads))
}

/// Central differences `(f(x + h e_k) - f(x - h e_k)) / 2h` for every
/// coordinate.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut x = params.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = x[k];
            x[k] = orig + step;
            let plus = f(&x);
            x[k] = orig - step;
            let minus = f(&x);
            x[k] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Maximum of `|a - n| / (|n| + floor)` over paired entries. Non-finite
/// entries count as infinite error.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + floor))
        .map(|e| if e.is_nan() { f64::INFINITY } else { e })
        .fold(0.0, f64::max)
}

/// Finite-difference step and relative-error floor used by [`gradient_check`].
pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_FLOOR: f64 = 1e-8;

/// Worst relative errors of one gradient check.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct GradCheck {
    pub seed: u64,
    pub size: usize,
    pub logits: f64,
    pub z_raw: f64,
}

impl GradCheck {
    pub fn max(&self) -> f64 {
        self.logits.max(self.z_raw)
    }
}

/// Compares [`grad_total`] against central differences of [`total_loss`] on
/// a random `size x size` instance drawn from `seed`: random corners, depths,
/// raw fields and term weights.
pub fn gradient_check(seed: u64, size: usize, params: &LossParams) -> Result<GradCheck> {
    if size < 4 {
        return Err(Error::InvalidGrid(format!(
            "gradient check needs size >= 4, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hi = (size - 2) as f64;
    let corners =
        std::array::from_fn(|_| Point2::new(rng.random_range(1.0..hi), rng.random_range(1.0..hi)));
    let depths = std::array::from_fn(|_| rng.random_range(1.0..4.0));
    let targets = LossTargets::new(corners, depths, size, size, DEFAULT_TAU, DEFAULT_LAMBDA)?;
    let n = targets.len();
    let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let z_raw: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..3.0)).collect();
    let weights = LossWeights::new(
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
    )?;
    let (_, analytic) = grad_total(&logits, &z_raw, &targets, &weights, params)?;
    let f = |lg: &[f64], zr: &[f64]| {
        field_from_raw(size, size, lg, zr)
            .and_then(|field| total_loss(&field, &targets, &weights, params))
            .map(|r| r.total)
            .unwrap_or(f64::NAN)
    };
    let num_logits = finite_diff_grad(|x| f(x, &z_raw), &logits, GRADCHECK_STEP);
    let num_z = finite_diff_grad(|x| f(&logits, x), &z_raw, GRADCHECK_STEP);
    Ok(GradCheck {
        seed,
        size,
        logits: max_relative_error(&analytic.logits, &num_logits, GRADCHECK_FLOOR),
        z_raw: max_relative_error(&analytic.z_raw, &num_z, GRADCHECK_FLOOR),
    })
}

/// Gradient-descent settings for [`fit_heatmaps`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    pub lr_logits: f64,
    pub lr_depth: f64,
    /// Warm-up length in steps; defaults to 5/120 of the budget.
    pub warmup_steps: Option<usize>,
    pub seed: u64,
    pub params: LossParams,
    pub init_logit: f64,
    pub init_depth: f64,
    /// Half-width of the uniform seed-dependent perturbation of the logits.
    pub init_jitter: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr_logits: 0.5,
            lr_depth: 0.05,
            warmup_steps: None,
            seed: 0,
            params: LossParams::default(),
            init_logit: -4.0,
            init_depth: 1.0,
            init_jitter: 0.01,
        }
    }
}

impl FitConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (self.steps * 5).div_ceil(120))
            .min(self.steps.saturating_sub(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub l_coarse: f64,
    pub l_fine: f64,
    pub l_depth: f64,
    pub total: f64,
}

impl TraceRow {
    pub const HEADER: &'static str = "step\tl_coarse\tl_fine\tl_depth\ttotal";

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:e}\t{:e}\t{:e}\t{:e}",
            self.step, self.l_coarse, self.l_fine, self.l_depth, self.total
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub field: HeatField,
    pub logits: Vec<f64>,
    pub z_raw: Vec<f64>,
    pub trace: Vec<TraceRow>,
    /// Extracted corners in grid coordinates with sampled (virtual) depths.
    pub grid_corners: [Point2<f64>; NUM_CORNERS],
    pub depths: [f64; NUM_CORNERS],
    /// Same corners mapped to image pixels.
    pub corners: CornerSet,
}

/// Fits logits and raw depths to the targets with plain gradient descent.
///
/// Each step evaluates the scheduled loss, records it, then takes a gradient
/// step. The terms are normalized means whose raw gradients are far too
/// small for a fixed step, so each is rescaled to unit per-cell curvature:
/// the coarse gradient by `sum(A) / max(lambda, 50)` (a default peak cell then
/// has unit weight whatever `lambda` is compared against), the coordinate
/// gradient by 8, and the depth gradient of each `z_raw` cell by
/// `sum(H) / H`, which leaves the bounded per-cell smooth-L1 slope.
/// The depth gradient with respect to the logits is left as is; scaling it
/// too lets the shared denominator inflate whole channels.
pub fn fit_heatmaps(targets: &LossTargets, grid: &Grid, config: &FitConfig) -> Result<FitResult> {
    if targets.width != grid.width || targets.height != grid.height {
        return Err(Error::ShapeMismatch {
            expected: grid.cells(),
            actual: targets.width * targets.height,
        });
    }
    if !(config.lr_logits >= 0.0 && config.lr_depth >= 0.0) {
        return Err(Error::InvalidConfig(
            "learning rates must be non-negative".into(),
        ));
    }
    if !(config.init_depth > 0.0) {
        return Err(Error::InvalidConfig(
            "initial depth must be positive".into(),
        ));
    }
    let n = targets.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut logits: Vec<f64> = (0..n)
        .map(|_| config.init_logit + config.init_jitter * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    let mut z_raw = vec![softplus_inv(config.init_depth); n];
    let warmup = config.warmup();
    let total_steps = config.steps.saturating_sub(1).max(1);
    let a_ref = targets
        .peak
        .values
        .iter()
        .copied()
        .fold(DEFAULT_LAMBDA, f64::max);

    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let weights = schedule(step, total_steps, warmup)?;
        let terms = grad_terms(&logits, &z_raw, targets, &config.params)?;
        let report = terms.report(&weights);
        if !report.total.is_finite() {
            return Err(Error::Diverged { step });
        }
        trace.push(TraceRow {
            step,
            l_coarse: report.l_coarse,
            l_fine: report.l_fine,
            l_depth: report.l_depth,
            total: report.total,
        });
        let wc = weights.coarse * terms.coarse_norm / a_ref;
        let wf = weights.fine * NUM_CORNERS as f64;
        let wd = weights.depth;
        let wz = weights.depth * terms.depth_norm;
        for (i, r) in z_raw.iter_mut().enumerate() {
            let heat = sigmoid(logits[i]).max(f64::MIN_POSITIVE);
            *r -= config.lr_depth * wz * terms.depth_z[i] / heat;
        }
        for (i, l) in logits.iter_mut().enumerate() {
            let g = wc * terms.coarse[i] + wf * terms.fine[i] + wd * terms.depth_heat[i];
            *l -= config.lr_logits * g;
        }
        if logits.iter().chain(&z_raw).any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step });
        }
    }

    let field = field_from_raw(targets.width, targets.height, &logits, &z_raw)?;
    let (grid_corners, depths) = extract_grid_corners(&field, config.params.beta);
    let corners = CornerSet::new(
        grid_corners.map(|p| grid.to_image(p)),
        depths,
        DepthSpace::Virtual,
    )?;
    Ok(FitResult {
        field,
        logits,
        z_raw,
        trace,
        grid_corners,
        depths,
        corners,
    })
}

/// Per-channel ratio of the maximum heat value to the mean heat value.
pub fn max_to_mean_ratios(field: &HeatField) -> [f64; NUM_CORNERS] {
    std::array::from_fn(|c| {
        let ch = field.heat_channel(c);
        let max = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = ch.iter().sum::<f64>() / ch.len() as f64;
        max / mean
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0, 1.0), 0.0);
        assert_eq!(smooth_l1(0.5, 1.0), 0.125);
        assert_eq!(smooth_l1(2.0, 1.0), 1.5);
        assert_eq!(smooth_l1(-2.0, 1.0), 1.5);
        // C1 at the transition
        assert_abs_diff_eq!(
            smooth_l1(1.0 - 1e-12, 1.0),
            smooth_l1(1.0, 1.0),
            epsilon = 1e-11
        );
        assert_abs_diff_eq!(
            smooth_l1_grad(1.0 - 1e-12, 1.0),
            smooth_l1_grad(1.0, 1.0),
            epsilon = 1e-11
        );
    }

    #[test]
    fn activations() {
        assert_abs_diff_eq!(softplus(softplus_inv(1.0)), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            softplus_inv(1.0),
            (std::f64::consts::E - 1.0).ln(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(sigmoid(-4.0), 0.01798620996209156, epsilon = 1e-15);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    fn small_targets(values: Vec<f64>) -> TargetHeatmaps {
        TargetHeatmaps {
            width: values.len() / 8,
            height: 1,
            values,
            sigmas2: [1.0; 8],
        }
    }

    #[test]
    fn peak_weight_examples() {
        let t = small_targets(vec![0.8; 8]);
        assert!(peak_weights(&t, 0.1, 1.0)
            .unwrap()
            .values
            .iter()
            .all(|&a| a == 1.0));
        assert!(peak_weights(&t, 0.1, 50.0)
            .unwrap()
            .values
            .iter()
            .all(|&a| a == 50.0));
        let low = small_targets(vec![0.05; 8]);
        assert!(peak_weights(&low, 0.1, 50.0)
            .unwrap()
            .values
            .iter()
            .all(|&a| a == 1.0));
        assert!(peak_weights(&t, 1.0, 50.0).is_err());
        assert!(peak_weights(&t, 0.1, 0.5).is_err());
    }

    #[test]
    fn coarse_examples() {
        let w = vec![0.1, 0.7, 0.3, 0.0];
        let a = vec![1.0; 4];
        assert_eq!(loss_coarse(&w, &w, &a, 1.0, 1e-6).unwrap(), 0.0);
        let h: Vec<f64> = w.iter().map(|v| v + 0.5).collect();
        assert_abs_diff_eq!(
            loss_coarse(&h, &w, &a, 1.0, 0.0).unwrap(),
            0.125,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            loss_coarse(&h, &w, &a, 1.0, 1e-6).unwrap(),
            0.125,
            epsilon = 1e-7
        );
        assert!(matches!(
            loss_coarse(&h, &w[..3], &a, 1.0, 1e-6),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn coarse_lambda_sensitivity_hand_summed() {
        // 4x4 grid, peak region is the single cell with W = 1
        let mut w = vec![0.0; 16];
        w[5] = 1.0;
        let targets = small_targets(w.clone());
        let a1 = peak_weights(&targets, 0.1, 2.0).unwrap().values;
        let a2 = peak_weights(&targets, 0.1, 4.0).unwrap().values;
        // residual only in background: normalization changes, numerator doesn't
        let mut h = w.clone();
        h[0] = 0.4;
        let l1 = loss_coarse(&h, &w, &a1, 1.0, 0.0).unwrap();
        let l2 = loss_coarse(&h, &w, &a2, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(l1, 0.08 / 17.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l2, 0.08 / 19.0, epsilon = 1e-15);
        // residual in the peak: 0.5*0.36 = 0.18 weighted by lambda
        let mut hp = w.clone();
        hp[5] = 0.4;
        assert_abs_diff_eq!(
            loss_coarse(&hp, &w, &a1, 1.0, 0.0).unwrap(),
            2.0 * 0.18 / 17.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            loss_coarse(&hp, &w, &a2, 1.0, 0.0).unwrap(),
            4.0 * 0.18 / 19.0,
            epsilon = 1e-15
        );
        // no residual anywhere: lambda is irrelevant
        assert_eq!(
            loss_coarse(&w, &w, &a1, 1.0, 0.0),
            loss_coarse(&w, &w, &a2, 1.0, 0.0)
        );
    }

    #[test]
    fn fine_examples() {
        let gt: [Point2<f64>; 8] = std::array::from_fn(|i| Point2::new(i as f64, 2.0 * i as f64));
        assert_eq!(loss_fine(&gt, &gt, 1.0), 0.0);
        let shifted = gt.map(|p| Point2::new(p.x + 0.5, p.y));
        assert_abs_diff_eq!(loss_fine(&shifted, &gt, 1.0), 0.125, epsilon = 1e-15);
        let far = gt.map(|p| Point2::new(p.x + 3.0, p.y + 4.0));
        assert_abs_diff_eq!(loss_fine(&far, &gt, 1.0), 6.0, epsilon = 1e-15);
    }

    #[test]
    fn depth_examples() {
        let d = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let plane = 3;
        let z: Vec<f64> = (0..24).map(|i| d[i / plane]).collect();
        let h = vec![0.3; 24];
        assert_eq!(loss_depth(&h, &z, &d, 1.0, 1e-6).unwrap(), 0.0);
        let off: Vec<f64> = z.iter().map(|v| v + 2.0).collect();
        assert_eq!(loss_depth(&[0.0; 24], &off, &d, 1.0, 1e-6).unwrap(), 0.0);
        assert_abs_diff_eq!(
            loss_depth(&h, &off, &d, 1.0, 0.0).unwrap(),
            1.5,
            epsilon = 1e-12
        );
        assert!(loss_depth(&h, &off[..23], &d, 1.0, 1e-6).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule(0, 120, 5).unwrap(), LossWeights::WARMUP);
        assert_eq!(schedule(4, 120, 5).unwrap(), LossWeights::WARMUP);
        assert_eq!(schedule(5, 120, 5).unwrap(), LossWeights::WARMUP);
        assert_eq!(schedule(120, 120, 5).unwrap(), LossWeights::FINAL);
        let mid = schedule(60, 110, 10).unwrap();
        assert_abs_diff_eq!(mid.coarse, 25.5, epsilon = 1e-12);
        assert_abs_diff_eq!(mid.fine, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mid.depth, 2.5, epsilon = 1e-12);
        assert!(schedule(0, 5, 5).is_err());
        assert!(schedule(121, 120, 5).is_err());
    }

    #[test]
    fn schedule_is_continuous() {
        let (total, warm) = (300, 20);
        for e in warm..total {
            let a = schedule(e, total, warm).unwrap();
            let b = schedule(e + 1, total, warm).unwrap();
            assert!((a.coarse - b.coarse).abs() <= 49.0 / 280.0 + 1e-12);
            assert!((a.depth - b.depth).abs() <= 5.0 / 280.0 + 1e-12);
        }
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-4);
        assert_abs_diff_eq!(g[0], 6.0, epsilon = 1e-6);
        for h in [1e-1, 1e-3, 0.5] {
            let g = finite_diff_grad(|x| 2.0 * x[0] - 7.0 * x[1] + 1.0, &[0.3, -5.0], h);
            assert_abs_diff_eq!(g[0], 2.0, epsilon = 1e-9);
            assert_abs_diff_eq!(g[1], -7.0, epsilon = 1e-9);
        }
    }

    fn tiny_targets() -> LossTargets {
        let corners = std::array::from_fn(|i| {
            Point2::new(1.0 + (i % 4) as f64 * 1.5, 1.0 + (i / 4) as f64 * 4.0)
        });
        LossTargets::new(corners, [2.0; 8], 8, 8, 0.1, 50.0).unwrap()
    }

    #[test]
    fn total_is_weighted_sum() {
        let t = tiny_targets();
        let logits: Vec<f64> = (0..t.len())
            .map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.5)
            .collect();
        let z_raw: Vec<f64> = (0..t.len()).map(|i| ((i * 13) % 7) as f64 * 0.4).collect();
        let field = field_from_raw(8, 8, &logits, &z_raw).unwrap();
        let p = LossParams::default();
        let w = LossWeights::new(3.0, 0.7, 1.9).unwrap();
        let r = total_loss(&field, &t, &w, &p).unwrap();
        assert_abs_diff_eq!(
            r.total,
            3.0 * r.l_coarse + 0.7 * r.l_fine + 1.9 * r.l_depth,
            epsilon = 1e-12
        );
        let only_coarse =
            total_loss(&field, &t, &LossWeights::new(1.0, 0.0, 0.0).unwrap(), &p).unwrap();
        assert_eq!(only_coarse.total, only_coarse.l_coarse);
        let (r2, _) = grad_total(&logits, &z_raw, &t, &w, &p).unwrap();
        assert_abs_diff_eq!(r2.total, r.total, epsilon = 1e-12);
        assert_abs_diff_eq!(r2.l_fine, r.l_fine, epsilon = 1e-15);
    }

    #[test]
    fn zero_loss_at_targets() {
        let t = tiny_targets();
        let depth: Vec<f64> = (0..t.len()).map(|i| t.depths[i / 64]).collect();
        let field = HeatField::new(8, 8, t.heatmaps.values.clone(), depth).unwrap();
        let r = total_loss(
            &field,
            &t,
            &LossWeights::new(1.0, 0.0, 1.0).unwrap(),
            &LossParams::default(),
        )
        .unwrap();
        assert_eq!(r.l_coarse, 0.0);
        assert_eq!(r.l_depth, 0.0);
    }

    #[test]
    fn coarse_gradient_vanishes_when_targets_match() {
        let t0 = tiny_targets();
        let logits: Vec<f64> = (0..t0.len()).map(|i| (i % 5) as f64 - 2.0).collect();
        let mut t = t0.clone();
        t.heatmaps.values = logits.iter().map(|&l| sigmoid(l)).collect();
        let z_raw = vec![0.5; t.len()];
        let (_, g) = grad_total(
            &logits,
            &z_raw,
            &t,
            &LossWeights::new(1.0, 0.0, 0.0).unwrap(),
            &LossParams::default(),
        )
        .unwrap();
        assert!(g.logits.iter().all(|v| v.abs() < 1e-10));
        assert!(g.z_raw.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn extracted_depth_gradient_matches_differences() {
        let (w, h) = (6, 5);
        let n = 8 * w * h;
        let logits: Vec<f64> = (0..n)
            .map(|i| ((i * 29) % 17) as f64 * 0.05 - 0.4)
            .collect();
        let z_raw: Vec<f64> = (0..n).map(|i| ((i * 7) % 13) as f64 * 0.3 - 1.0).collect();
        let up = [1.0, -0.5, 0.25, 2.0, 0.3, -1.2, 0.8, 0.1];
        let beta = 5.0;
        let (_, g) = grad_extracted_depths(w, h, &logits, &z_raw, beta, &up).unwrap();
        let eval = |lg: &[f64], zr: &[f64]| {
            let f = field_from_raw(w, h, lg, zr).unwrap();
            let (_, d) = extract_grid_corners(&f, beta);
            d.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        let num_l = finite_diff_grad(|x| eval(x, &z_raw), &logits, 1e-5);
        let num_z = finite_diff_grad(|x| eval(&logits, x), &z_raw, 1e-5);
        assert!(max_relative_error(&g.logits, &num_l, 1e-6) < 1e-4);
        assert!(max_relative_error(&g.z_raw, &num_z, 1e-6) < 1e-4);
    }

    #[test]
    fn fit_with_zero_steps_returns_initialization() {
        let t = tiny_targets();
        let grid = Grid::square(8).unwrap();
        let cfg = FitConfig {
            steps: 0,
            init_jitter: 0.0,
            ..FitConfig::default()
        };
        let r = fit_heatmaps(&t, &grid, &cfg).unwrap();
        assert!(r.trace.is_empty());
        assert!(r.logits.iter().all(|&l| l == -4.0));
        assert!(r.field.depth.iter().all(|&z| (z - 1.0).abs() < 1e-15));
    }

    #[test]
    fn fit_divergence_is_reported() {
        let t = tiny_targets();
        let grid = Grid::square(8).unwrap();
        let cfg = FitConfig {
            steps: 20,
            lr_logits: f64::INFINITY,
            ..FitConfig::default()
        };
        assert!(matches!(
            fit_heatmaps(&t, &grid, &cfg),
            Err(Error::Diverged { .. })
        ));
    }
}
