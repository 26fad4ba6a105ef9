//! PAG, NHD, Kabsch rectification, oriented-box IoU3D and the evaluation
//! driver.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    filter_instances, InstanceRecord, PredictionRecord, SceneAnnotation, DEFAULT_TARGET,
};
use crate::error::{Error, Result};
use crate::geometry::{
    canonical_permutation, convert_corner_depths, template_vertex, unproject_corners, Corner3DSet,
    CornerSet, Cuboid, DepthSpace, Intrinsics, LetterboxTransform, VirtualCamera, NUM_CORNERS,
};

/// Smallest per-axis size a rectified cuboid may have, in meters.
pub const MIN_RECTIFIED_SIZE: f64 = 1e-6;

// ---------------------------------------------------------------------------
// PAG

/// Mean corner distance in pixels and mean relative depth error in percent.
pub fn pag(pred: &CornerSet, gt: &CornerSet) -> Result<(f64, f64)> {
    if pred.depth_space != gt.depth_space {
        return Err(Error::DepthSpaceMismatch {
            pred: pred.depth_space.to_string(),
            gt: gt.depth_space.to_string(),
        });
    }
    if let Some(index) = gt.depths.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::NonPositiveGtDepth { index });
    }
    let n = NUM_CORNERS as f64;
    let uv = (0..NUM_CORNERS)
        .map(|i| (pred.uv[i] - gt.uv[i]).norm())
        .sum::<f64>()
        / n;
    let d = 100.0
        * (0..NUM_CORNERS)
            .map(|i| (pred.depths[i] - gt.depths[i]).abs() / gt.depths[i])
            .sum::<f64>()
        / n;
    Ok((uv, d))
}

// ---------------------------------------------------------------------------
// Hungarian

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssignmentResult {
    /// Row `i` is matched to column `permutation[i]`.
    pub permutation: [usize; NUM_CORNERS],
    pub cost: f64,
}

/// Minimum-cost perfect matching of a square matrix, Kuhn-Munkres with
/// potentials, `O(n^3)`. Returns the column assigned to each row.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    for (row, r) in cost.iter().enumerate() {
        if r.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                actual: r.len(),
            });
        }
        if let Some(col) = r.iter().position(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::NonFiniteCost { row, col });
        }
    }
    // 1-based arrays; column 0 is the virtual start column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

pub fn hungarian_assign(cost: &[[f64; NUM_CORNERS]; NUM_CORNERS]) -> Result<AssignmentResult> {
    let rows: Vec<Vec<f64>> = cost.iter().map(|r| r.to_vec()).collect();
    let a = min_cost_assignment(&rows)?;
    let permutation: [usize; NUM_CORNERS] = std::array::from_fn(|i| a[i]);
    let cost = (0..NUM_CORNERS).map(|i| cost[i][permutation[i]]).sum();
    Ok(AssignmentResult { permutation, cost })
}

// ---------------------------------------------------------------------------
// NHD

/// Sum of optimally matched corner distances over the ground-truth diagonal.
pub fn nhd(pred: &Corner3DSet, gt: &Corner3DSet, gt_diag: f64) -> Result<f64> {
    if !(gt_diag > 0.0) {
        return Err(Error::NonPositiveDiagonal(gt_diag));
    }
    let cost: [[f64; NUM_CORNERS]; NUM_CORNERS] =
        std::array::from_fn(|i| std::array::from_fn(|j| (pred.points[i] - gt.points[j]).norm()));
    Ok(hungarian_assign(&cost)?.cost / gt_diag)
}

// ---------------------------------------------------------------------------
// rectification

/// The 105 ways of splitting 8 items into 4 unordered pairs.
fn perfect_matchings() -> Vec<[(usize, usize); 4]> {
    fn rec(
        free: &mut Vec<usize>,
        cur: &mut Vec<(usize, usize)>,
        out: &mut Vec<[(usize, usize); 4]>,
    ) {
        if free.is_empty() {
            out.push([cur[0], cur[1], cur[2], cur[3]]);
            return;
        }
        let a = free.remove(0);
        for k in 0..free.len() {
            let b = free.remove(k);
            cur.push((a, b));
            rec(free, cur, out);
            cur.pop();
            free.insert(k, b);
        }
        free.insert(0, a);
    }
    let mut out = Vec::with_capacity(105);
    rec(&mut (0..NUM_CORNERS).collect(), &mut Vec::new(), &mut out);
    out
}

fn permutations4() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                let Some(d) = 6usize.checked_sub(a + b + c) else {
                    continue;
                };
                if a != b && a != c && b != c && d < 4 && d != a && d != b && d != c {
                    out.push([a, b, c, d]);
                }
            }
        }
    }
    out
}

struct Fit {
    rotation: Matrix3<f64>,
    size: Vector3<f64>,
    residual: f64,
}

/// Rotation and per-axis scale for `q[i] ~ R diag(s) t[label[i]]`.
fn fit_labeling(q: &[Vector3<f64>; NUM_CORNERS], label: &[usize; NUM_CORNERS]) -> Fit {
    let t: [Vector3<f64>; NUM_CORNERS] = std::array::from_fn(|i| template_vertex(label[i]));
    let m: Matrix3<f64> = (0..NUM_CORNERS).map(|i| q[i] * t[i].transpose()).sum();
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let size = Vector3::from_fn(|k, _| {
        let axis = rotation.column(k);
        let num: f64 = (0..NUM_CORNERS).map(|i| q[i].dot(&axis) * t[i][k]).sum();
        let den: f64 = (0..NUM_CORNERS).map(|i| t[i][k] * t[i][k]).sum();
        (num / den).max(MIN_RECTIFIED_SIZE)
    });
    let residual = (0..NUM_CORNERS)
        .map(|i| (q[i] - rotation * t[i].component_mul(&size)).norm_squared())
        .sum();
    Fit {
        rotation,
        size,
        residual,
    }
}

/// Closest valid cuboid to an arbitrary-order corner cloud.
///
/// The corner order is unknown (image order is not a 3D vertex topology), so
/// the space diagonals are found first: the pairing of the 8 points whose
/// midpoints lie closest to the centroid. Each pair is then mapped to a
/// template diagonal in every order and orientation (384 labelings, which
/// include all 24 proper rotations of any correct labeling), a Kabsch fit
/// with per-axis scale is solved for each, and the lowest residual wins.
pub fn kabsch_rectify(c3d: &Corner3DSet) -> Result<Cuboid> {
    let center = c3d.centroid();
    let q: [Vector3<f64>; NUM_CORNERS] = std::array::from_fn(|i| c3d.points[i] - center);
    if q.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
        return Err(Error::InvalidCorners("non-finite corner".into()));
    }
    let cov: Matrix3<f64> = q.iter().map(|v| v * v.transpose()).sum();
    let sv = cov.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().map(|x| x.max(0.0)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::DegenerateCorners);
    }

    let pairing = perfect_matchings()
        .into_iter()
        .map(|m| {
            let score: f64 = m.iter().map(|&(a, b)| (q[a] + q[b]).norm_squared()).sum();
            (score, m)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("105 matchings")
        .1;

    let mut best: Option<Fit> = None;
    for order in permutations4() {
        for flips in 0..16usize {
            let mut label = [0usize; NUM_CORNERS];
            for (slot, &(a, b)) in pairing.iter().enumerate() {
                let (va, vb) = (order[slot], 7 - order[slot]);
                if flips & (1 << slot) == 0 {
                    label[a] = va;
                    label[b] = vb;
                } else {
                    label[a] = vb;
                    label[b] = va;
                }
            }
            let fit = fit_labeling(&q, &label);
            if best.as_ref().is_none_or(|b| fit.residual < b.residual) {
                best = Some(fit);
            }
        }
    }
    let best = best.expect("384 candidates");
    Cuboid::new(center, best.size, best.rotation)
}

// ---------------------------------------------------------------------------
// IoU3D

type Polygon = Vec<Vector3<f64>>;

/// Vertex indices of the six faces, each in cyclic order.
fn face_indices() -> [[usize; 4]; 6] {
    let mut faces = [[0; 4]; 6];
    for axis in 0..3 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let cycle = [(0, 0), (1, 0), (1, 1), (0, 1)];
            faces[axis * 2 + side] = cycle.map(|(i, j)| (side << axis) | (i << a) | (j << b));
        }
    }
    faces
}

fn box_faces(c: &Cuboid) -> Vec<Polygon> {
    let pts = c.corners().points;
    face_indices()
        .iter()
        .map(|f| f.iter().map(|&i| pts[i].coords).collect())
        .collect()
}

/// Half-spaces `n . x <= d` bounding the box.
fn box_planes(c: &Cuboid) -> [(Vector3<f64>, f64); 6] {
    std::array::from_fn(|k| {
        let axis = k / 2;
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let n: Vector3<f64> = c.rotation.column(axis) * sign;
        (n, n.dot(&c.center.coords) + 0.5 * c.size[axis])
    })
}

fn clip(faces: Vec<Polygon>, n: &Vector3<f64>, d: f64, eps: f64) -> Vec<Polygon> {
    let outside = faces.iter().flatten().any(|p| n.dot(p) - d > eps);
    if !outside {
        return faces;
    }
    let mut out = Vec::with_capacity(faces.len() + 1);
    let mut cap: Vec<Vector3<f64>> = Vec::new();
    for face in &faces {
        let mut poly = Vec::with_capacity(face.len() + 2);
        for i in 0..face.len() {
            let (p, q) = (face[i], face[(i + 1) % face.len()]);
            let (dp, dq) = (n.dot(&p) - d, n.dot(&q) - d);
            if dp <= eps {
                poly.push(p);
                if dp.abs() <= eps {
                    cap.push(p);
                }
            }
            if (dp < -eps && dq > eps) || (dp > eps && dq < -eps) {
                let x = p + (q - p) * (dp / (dp - dq));
                poly.push(x);
                cap.push(x);
            }
        }
        if poly.len() >= 3 {
            out.push(poly);
        }
    }
    let mut uniq: Vec<Vector3<f64>> = Vec::with_capacity(cap.len());
    for p in cap {
        if uniq.iter().all(|u| (u - p).norm() > eps) {
            uniq.push(p);
        }
    }
    if uniq.len() >= 3 {
        let c = uniq.iter().sum::<Vector3<f64>>() / uniq.len() as f64;
        let e1 = (uniq[0] - c).normalize();
        let e2 = n.cross(&e1);
        uniq.sort_by(|a, b| {
            let (da, db) = (a - c, b - c);
            da.dot(&e2)
                .atan2(da.dot(&e1))
                .total_cmp(&db.dot(&e2).atan2(db.dot(&e1)))
        });
        out.push(uniq);
    }
    out
}

fn polytope_volume(faces: &[Polygon]) -> f64 {
    let count = faces.iter().map(Vec::len).sum::<usize>();
    if count == 0 {
        return 0.0;
    }
    let c = faces.iter().flatten().sum::<Vector3<f64>>() / count as f64;
    faces
        .iter()
        .map(|f| {
            (1..f.len() - 1)
                .map(|i| (f[0] - c).dot(&(f[i] - c).cross(&(f[i + 1] - c))).abs())
                .sum::<f64>()
        })
        .sum::<f64>()
        / 6.0
}

/// Volume of the intersection of two oriented boxes.
pub fn intersection_volume(a: &Cuboid, b: &Cuboid) -> f64 {
    let scale = a.diagonal().max(b.diagonal()) + a.center.coords.norm().max(b.center.coords.norm());
    let eps = 1e-12 * scale;
    let mut faces = box_faces(a);
    for (n, d) in box_planes(b) {
        faces = clip(faces, &n, d, eps);
        if faces.is_empty() {
            return 0.0;
        }
    }
    polytope_volume(&faces)
}

/// Intersection over union of two oriented boxes, in `[0, 1]`.
pub fn iou3d(a: &Cuboid, b: &Cuboid) -> f64 {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    if !(union > 0.0) {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

fn contains(c: &Cuboid, p: &Point3<f64>) -> bool {
    let local = c.rotation.transpose() * (p - c.center);
    (0..3).all(|k| local[k].abs() <= 0.5 * c.size[k])
}

/// Monte-Carlo IoU3D from uniform samples in the joint bounding box.
pub fn iou3d_mc(a: &Cuboid, b: &Cuboid, samples: usize, seed: u64) -> Result<f64> {
    if samples == 0 {
        return Err(Error::InvalidConfig("samples must be at least 1".into()));
    }
    let pts = a.corners().points.into_iter().chain(b.corners().points);
    let (mut lo, mut hi) = (
        Vector3::repeat(f64::INFINITY),
        Vector3::repeat(f64::NEG_INFINITY),
    );
    for p in pts {
        lo = lo.inf(&p.coords);
        hi = hi.sup(&p.coords);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples {
        let p = Point3::from(Vector3::from_fn(|k, _| rng.random_range(lo[k]..=hi[k])));
        let (ia, ib) = (contains(a, &p), contains(b, &p));
        both += (ia && ib) as usize;
        either += (ia || ib) as usize;
    }
    Ok(if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    })
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub target: f64,
    pub virtual_camera: VirtualCamera,
    /// Drop ground-truth instances rejected by the dataset filter (and ignore
    /// their predictions) before evaluating.
    pub filter: bool,
    /// Re-rectify predictions that already carry a cuboid.
    pub rectify_always: bool,
    pub pred_order: PredOrder,
}

/// How prediction corners correspond to ground-truth corners.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredOrder {
    /// Corner `i` of the prediction estimates corner `i` of the annotation.
    /// The ground truth's canonical permutation is applied to both sets.
    #[default]
    Aligned,
    /// Each set is sorted into canonical image order on its own. For
    /// predictions without slot semantics; noise can swap near-tied corners.
    Sorted,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            target: DEFAULT_TARGET,
            virtual_camera: VirtualCamera::default(),
            filter: false,
            rectify_always: false,
            pred_order: PredOrder::Aligned,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub id: String,
    pub image_id: String,
    pub dataset: String,
    pub pag_uv: f64,
    /// `None` when the depth spaces cannot be reconciled without intrinsics.
    pub pag_d: Option<f64>,
    /// Depth space PAG_d was computed in.
    pub depth_space: Option<DepthSpace>,
    pub nhd: Option<f64>,
    pub iou3d: Option<f64>,
    /// Reasons some metric was skipped or degraded.
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub key: String,
    pub instances: usize,
    pub pag_uv: Option<f64>,
    pub pag_d_count: usize,
    pub pag_d: Option<f64>,
    pub nhd_count: usize,
    pub nhd: Option<f64>,
    pub iou3d_count: usize,
    pub iou3d: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    /// One row per dataset key, sorted by key.
    pub datasets: Vec<Aggregate>,
    /// Mean over every instance.
    pub global: Aggregate,
    /// Mean of the per-dataset means.
    pub dataset_mean: Aggregate,
    pub ignored_predictions: usize,
    pub instances: Vec<InstanceMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> (usize, Option<f64>) {
    let (n, s) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n, (n > 0).then(|| s / n as f64))
}

fn aggregate(key: &str, rows: &[&InstanceMetrics]) -> Aggregate {
    let (instances, pag_uv) = mean(rows.iter().map(|r| r.pag_uv));
    let (pag_d_count, pag_d) = mean(rows.iter().filter_map(|r| r.pag_d));
    let (nhd_count, nhd) = mean(rows.iter().filter_map(|r| r.nhd));
    let (iou3d_count, iou3d) = mean(rows.iter().filter_map(|r| r.iou3d));
    Aggregate {
        key: key.into(),
        instances,
        pag_uv,
        pag_d_count,
        pag_d,
        nhd_count,
        nhd,
        iou3d_count,
        iou3d,
    }
}

fn average_groups(groups: &[Aggregate]) -> Aggregate {
    let avg = |f: fn(&Aggregate) -> Option<f64>| mean(groups.iter().filter_map(f));
    let (_, pag_uv) = avg(|g| g.pag_uv);
    let (pag_d_count, pag_d) = avg(|g| g.pag_d);
    let (nhd_count, nhd) = avg(|g| g.nhd);
    let (iou3d_count, iou3d) = avg(|g| g.iou3d);
    Aggregate {
        key: "dataset_mean".into(),
        instances: groups.len(),
        pag_uv,
        pag_d_count,
        pag_d,
        nhd_count,
        nhd,
        iou3d_count,
        iou3d,
    }
}

fn evaluate_instance(
    scene: &SceneAnnotation,
    gt: &InstanceRecord,
    pred: &PredictionRecord,
    options: &EvalOptions,
) -> Result<InstanceMetrics> {
    let mut notes = Vec::new();
    let k = scene.intrinsics;
    let vc = &options.virtual_camera;

    // PAG in the letterboxed frame, canonical order on both sides.
    let t = LetterboxTransform::new(scene.width, scene.height, options.target)?;
    let gt_perm = canonical_permutation(&gt.corners.uv);
    let frame = |cs: &CornerSet| {
        let perm = match options.pred_order {
            PredOrder::Aligned => gt_perm,
            PredOrder::Sorted => canonical_permutation(&cs.uv),
        };
        let c = cs.permuted(&perm);
        CornerSet {
            uv: c.uv.map(|p| t.forward(p)),
            ..c
        }
    };
    let gt_lb = frame(&gt.corners);
    let mut pred_lb = frame(&pred.corners);
    let pred_metric: Option<CornerSet> = match (pred.corners.depth_space, k) {
        (DepthSpace::Metric, _) => Some(pred.corners),
        (DepthSpace::Virtual, Some(k)) => Some(convert_corner_depths(
            &pred.corners,
            k.fy,
            scene.height,
            vc,
            DepthSpace::Metric,
        )?),
        (DepthSpace::Virtual, None) => None,
    };
    let (pag_uv, pag_d, depth_space) = match pred_metric {
        Some(_) => {
            if pred_lb.depth_space == DepthSpace::Virtual {
                let k: Intrinsics = k.expect("virtual prediction converted only with intrinsics");
                pred_lb =
                    convert_corner_depths(&pred_lb, k.fy, scene.height, vc, DepthSpace::Metric)?;
            }
            let (uv, d) = pag(&pred_lb, &gt_lb)?;
            (uv, Some(d), Some(DepthSpace::Metric))
        }
        None => {
            notes.push("pag_d skipped: virtual prediction without intrinsics".into());
            let uv = (0..NUM_CORNERS)
                .map(|i| (pred_lb.uv[i] - gt_lb.uv[i]).norm())
                .sum::<f64>()
                / NUM_CORNERS as f64;
            (uv, None, None)
        }
    };

    let (mut nhd_v, mut iou_v) = (None, None);
    match (k, pred_metric) {
        (Some(k), Some(pm)) => {
            let gt3d = unproject_corners(&gt.corners, &k)?;
            let pred3d = unproject_corners(&pm, &k)?;
            let gt_box = kabsch_rectify(&gt3d)?;
            nhd_v = Some(nhd(&pred3d, &gt3d, gt_box.diagonal())?);
            let pred_box = match (pred.cuboid, options.rectify_always) {
                (Some(c), false) => Ok(c),
                _ => kabsch_rectify(&pred3d),
            };
            iou_v = Some(match pred_box {
                Ok(c) => iou3d(&c, &gt_box),
                Err(Error::DegenerateCorners) => {
                    notes.push("degenerate prediction: iou3d set to 0".into());
                    0.0
                }
                Err(e) => return Err(e),
            });
        }
        _ => notes.push(Error::MissingIntrinsics(scene.image_id.clone()).to_string()),
    }

    Ok(InstanceMetrics {
        id: gt.id.clone(),
        image_id: scene.image_id.clone(),
        dataset: scene.dataset.clone(),
        pag_uv,
        pag_d,
        depth_space,
        nhd: nhd_v,
        iou3d: iou_v,
        notes,
    })
}

/// Scores every ground-truth instance against the prediction with the same
/// id. Every instance needs exactly one prediction and every prediction a
/// ground-truth instance.
pub fn evaluate(
    predictions: &[PredictionRecord],
    scenes: &[SceneAnnotation],
    options: &EvalOptions,
) -> Result<MetricsReport> {
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(Error::InvalidConfig(format!(
                "duplicate prediction id {}",
                p.id
            )));
        }
    }
    let mut seen: HashSet<String> = HashSet::new();
    let mut dropped: HashSet<String> = HashSet::new();
    let mut rows = Vec::new();
    for scene in scenes {
        let kept: Vec<InstanceRecord> = if options.filter {
            let out = filter_instances(scene, options.target)?;
            for (inst, _) in out.rejected {
                dropped.insert(inst.id);
            }
            out.kept
        } else {
            scene.instances.clone()
        };
        for gt in &kept {
            if !seen.insert(gt.id.clone()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate instance id {}",
                    gt.id
                )));
            }
            let pred = by_id
                .get(gt.id.as_str())
                .ok_or_else(|| Error::UnmatchedInstance(format!("{} (no prediction)", gt.id)))?;
            rows.push(evaluate_instance(scene, gt, pred, options)?);
        }
    }
    let mut ignored = 0;
    for p in predictions {
        if !seen.contains(&p.id) {
            if dropped.contains(&p.id) {
                ignored += 1;
            } else {
                return Err(Error::UnmatchedInstance(format!(
                    "{} (no ground truth)",
                    p.id
                )));
            }
        }
    }

    let mut groups: BTreeMap<&str, Vec<&InstanceMetrics>> = BTreeMap::new();
    for r in &rows {
        groups.entry(r.dataset.as_str()).or_default().push(r);
    }
    let datasets: Vec<Aggregate> = groups.iter().map(|(k, v)| aggregate(k, v)).collect();
    let all: Vec<&InstanceMetrics> = rows.iter().collect();
    Ok(MetricsReport {
        format_version: crate::dataset::FORMAT_VERSION,
        global: aggregate("global", &all),
        dataset_mean: average_groups(&datasets),
        datasets,
        ignored_predictions: ignored,
        instances: rows,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Fixed-width table: one row per dataset, then the global and
    /// dataset-averaged rows.
    pub fn to_text(&self) -> String {
        let cell = |v: Option<f64>, prec: usize| match v {
            Some(x) => format!("{x:.prec$}"),
            None => "-".into(),
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>7} {:>10} {:>10} {:>8} {:>8}",
            "dataset", "n", "pag_uv", "pag_d(%)", "nhd", "iou3d"
        );
        for a in self
            .datasets
            .iter()
            .chain([&self.global, &self.dataset_mean])
        {
            let _ = writeln!(
                s,
                "{:<20} {:>7} {:>10} {:>10} {:>8} {:>8}",
                a.key,
                a.instances,
                cell(a.pag_uv, 3),
                cell(a.pag_d, 3),
                cell(a.nhd, 4),
                cell(a.iou3d, 4)
            );
        }
        let skipped = self
            .instances
            .iter()
            .filter(|r| !r.notes.is_empty())
            .count();
        if skipped > 0 {
            let _ = writeln!(s, "{skipped} instance(s) with skipped or degraded metrics");
        }
        if self.ignored_predictions > 0 {
            let _ = writeln!(
                s,
                "{} prediction(s) for filtered instances ignored",
                self.ignored_predictions
            );
        }
        s
    }
}
