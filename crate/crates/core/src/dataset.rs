//! Annotation and prediction files, the instance filter and preprocessing.
//!
//! Both file formats are JSON Lines. Every line carries `format_version`
//! first; see the README for the full field list.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dense::NormBox;
use crate::error::{Error, Result};
use crate::geometry::{
    canonical_permutation, convert_corner_depths, CornerSet, Cuboid, DepthSpace, Intrinsics,
    LetterboxTransform, VirtualCamera, NUM_CORNERS,
};

pub const FORMAT_VERSION: u32 = 1;

/// Minimum tight-box area, in letterboxed pixels squared.
pub const MIN_BOX_AREA: f64 = 1024.0;

pub const DEFAULT_TARGET: f64 = 512.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityFlag {
    Good,
    Truncated,
    MissingBox,
}

/// Pixel-space 2D box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !(x2 > x1 && y2 > y1) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateBox(format!("({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub id: String,
    pub bbox: Option<BBox>,
    /// Projected corners in pixels with metric depths.
    pub corners: CornerSet,
    pub category: Option<String>,
    pub flag: QualityFlag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneAnnotation {
    pub image_id: String,
    /// Grouping key for per-dataset reports.
    pub dataset: String,
    pub width: f64,
    pub height: f64,
    pub intrinsics: Option<Intrinsics>,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub corners: CornerSet,
    pub cuboid: Option<Cuboid>,
}

// ---------------------------------------------------------------------------
// wire format

#[derive(Serialize, Deserialize)]
struct SceneLine {
    format_version: u32,
    image_id: String,
    #[serde(default)]
    dataset: String,
    width: f64,
    height: f64,
    #[serde(rename = "K")]
    k: Option<[f64; 9]>,
    instances: Vec<InstanceLine>,
}

#[derive(Serialize, Deserialize)]
struct InstanceLine {
    id: String,
    #[serde(rename = "box")]
    bbox: Option<[f64; 4]>,
    corners: [f64; 2 * NUM_CORNERS],
    depths: [f64; NUM_CORNERS],
    #[serde(default)]
    category: Option<String>,
    flag: QualityFlag,
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    format_version: u32,
    id: String,
    uv: [f64; 2 * NUM_CORNERS],
    depths: [f64; NUM_CORNERS],
    depth_space: DepthSpace,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cuboid: Option<CuboidLine>,
}

#[derive(Serialize, Deserialize)]
struct CuboidLine {
    center: [f64; 3],
    size: [f64; 3],
    /// Row-major.
    rotation: [f64; 9],
}

impl From<&Cuboid> for CuboidLine {
    fn from(c: &Cuboid) -> Self {
        let r = &c.rotation;
        Self {
            center: [c.center.x, c.center.y, c.center.z],
            size: [c.size.x, c.size.y, c.size.z],
            rotation: std::array::from_fn(|i| r[(i / 3, i % 3)]),
        }
    }
}

impl CuboidLine {
    fn to_cuboid(&self) -> Result<Cuboid> {
        Cuboid::new(
            Point3::from(self.center),
            Vector3::from(self.size),
            Matrix3::from_row_slice(&self.rotation),
        )
    }
}

fn check_version(v: u32) -> std::result::Result<(), String> {
    if v != FORMAT_VERSION {
        return Err(format!(
            "unsupported format_version {v}, expected {FORMAT_VERSION}"
        ));
    }
    Ok(())
}

fn scene_from_line(line: SceneLine) -> std::result::Result<SceneAnnotation, String> {
    check_version(line.format_version)?;
    if !(line.width > 0.0 && line.height > 0.0 && line.width.is_finite() && line.height.is_finite())
    {
        return Err(format!(
            "scene {}: image size must be positive, got {}x{}",
            line.image_id, line.width, line.height
        ));
    }
    let intrinsics = line
        .k
        .map(|k| Intrinsics::from_row_major(&k))
        .transpose()
        .map_err(|e| format!("scene {}: {e}", line.image_id))?;
    let instances = line
        .instances
        .into_iter()
        .map(|inst| {
            let id = inst.id.clone();
            instance_from_line(inst).map_err(|e| format!("instance {id}: {e}"))
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(SceneAnnotation {
        image_id: line.image_id,
        dataset: line.dataset,
        width: line.width,
        height: line.height,
        intrinsics,
        instances,
    })
}

fn instance_from_line(line: InstanceLine) -> Result<InstanceRecord> {
    let bbox = line
        .bbox
        .map(|[x1, y1, x2, y2]| BBox::new(x1, y1, x2, y2))
        .transpose()?;
    let corners = CornerSet::from_flat(&line.corners, line.depths, DepthSpace::Metric)?;
    Ok(InstanceRecord {
        id: line.id,
        bbox,
        corners,
        category: line.category,
        flag: line.flag,
    })
}

fn scene_to_line(scene: &SceneAnnotation) -> SceneLine {
    SceneLine {
        format_version: FORMAT_VERSION,
        image_id: scene.image_id.clone(),
        dataset: scene.dataset.clone(),
        width: scene.width,
        height: scene.height,
        k: scene.intrinsics.map(|k| k.to_row_major()),
        instances: scene
            .instances
            .iter()
            .map(|inst| InstanceLine {
                id: inst.id.clone(),
                bbox: inst.bbox.map(BBox::to_array),
                corners: inst.corners.uv_flat(),
                depths: inst.corners.depths,
                category: inst.category.clone(),
                flag: inst.flag,
            })
            .collect(),
    }
}

fn prediction_from_line(line: PredictionLine) -> std::result::Result<PredictionRecord, String> {
    check_version(line.format_version)?;
    let corners = CornerSet::from_flat(&line.uv, line.depths, line.depth_space)
        .map_err(|e| format!("prediction {}: {e}", line.id))?;
    let cuboid = line
        .cuboid
        .map(|c| c.to_cuboid())
        .transpose()
        .map_err(|e| format!("prediction {}: {e}", line.id))?;
    Ok(PredictionRecord {
        id: line.id,
        corners,
        cuboid,
    })
}

fn prediction_to_line(p: &PredictionRecord) -> PredictionLine {
    PredictionLine {
        format_version: FORMAT_VERSION,
        id: p.id.clone(),
        uv: p.corners.uv_flat(),
        depths: p.corners.depths,
        depth_space: p.corners.depth_space,
        cuboid: p.cuboid.as_ref().map(CuboidLine::from),
    }
}

// ---------------------------------------------------------------------------
// parsing

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// The first bad record aborts the parse.
    #[default]
    Strict,
    /// Bad records are skipped and reported.
    Partial,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    /// Skipped records as `Error::Schema`, only populated in partial mode.
    pub skipped: Vec<Error>,
}

fn parse_lines<L, T>(
    text: &str,
    mode: ParseMode,
    convert: impl Fn(L) -> std::result::Result<T, String>,
) -> Result<Parsed<T>>
where
    L: for<'de> Deserialize<'de>,
{
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line = i + 1;
        let result = serde_json::from_str::<L>(raw)
            .map_err(|e| e.to_string())
            .and_then(&convert);
        match result {
            Ok(r) => records.push(r),
            Err(message) => {
                let err = Error::Schema { line, message };
                match mode {
                    ParseMode::Strict => return Err(err),
                    ParseMode::Partial => skipped.push(err),
                }
            }
        }
    }
    Ok(Parsed { records, skipped })
}

pub fn parse_annotations(text: &str, mode: ParseMode) -> Result<Parsed<SceneAnnotation>> {
    parse_lines::<SceneLine, _>(text, mode, scene_from_line)
}

pub fn write_annotations(scenes: &[SceneAnnotation]) -> String {
    scenes
        .iter()
        .map(|s| serde_json::to_string(&scene_to_line(s)).expect("scene serializes") + "\n")
        .collect()
}

pub fn parse_predictions(text: &str, mode: ParseMode) -> Result<Parsed<PredictionRecord>> {
    parse_lines::<PredictionLine, _>(text, mode, prediction_from_line)
}

pub fn write_predictions(records: &[PredictionRecord]) -> String {
    records
        .iter()
        .map(|p| {
            serde_json::to_string(&prediction_to_line(p)).expect("prediction serializes") + "\n"
        })
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Prefixes schema errors with the file name.
fn locate(path: &Path, err: Error) -> Error {
    match err {
        Error::Schema { line, message } => Error::Schema {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

pub fn read_annotations(path: &Path, mode: ParseMode) -> Result<Parsed<SceneAnnotation>> {
    let mut parsed = parse_annotations(&read_text(path)?, mode).map_err(|e| locate(path, e))?;
    parsed.skipped = parsed
        .skipped
        .into_iter()
        .map(|e| locate(path, e))
        .collect();
    Ok(parsed)
}

pub fn read_predictions(path: &Path, mode: ParseMode) -> Result<Parsed<PredictionRecord>> {
    let mut parsed = parse_predictions(&read_text(path)?, mode).map_err(|e| locate(path, e))?;
    parsed.skipped = parsed
        .skipped
        .into_iter()
        .map(|e| locate(path, e))
        .collect();
    Ok(parsed)
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io {
            path: path.display().to_string(),
            message: "not a file path".into(),
        })?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// filtering

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// Flagged truncated in the source annotation.
    NotGood,
    /// Some corner lies outside `[0, W) x [0, H)`.
    CornersOutside,
    /// The box completed from the corners has zero area.
    DegenerateBox,
    /// Letterboxed tight-box area below [`MIN_BOX_AREA`].
    TooSmall,
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::NotGood => "not_good",
            RejectReason::CornersOutside => "corners_outside",
            RejectReason::DegenerateBox => "degenerate_box",
            RejectReason::TooSmall => "too_small",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome {
    /// Kept instances, in input order. Missing boxes are filled in.
    pub kept: Vec<InstanceRecord>,
    pub rejected: Vec<(InstanceRecord, RejectReason)>,
}

/// `(min u, min v, max u, max v)` clamped to the image.
pub fn rough_box_from_corners(
    corners: &[Point2<f64>; NUM_CORNERS],
    width: f64,
    height: f64,
) -> Result<BBox> {
    if corners
        .iter()
        .any(|p| !(p.x.is_finite() && p.y.is_finite()))
    {
        return Err(Error::InvalidCorners("non-finite corner".into()));
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&Point2<f64>) -> f64| {
        corners.iter().map(sel).fold(init, f)
    };
    let x1 = fold(f64::min, f64::INFINITY, |p| p.x).clamp(0.0, width);
    let y1 = fold(f64::min, f64::INFINITY, |p| p.y).clamp(0.0, height);
    let x2 = fold(f64::max, f64::NEG_INFINITY, |p| p.x).clamp(0.0, width);
    let y2 = fold(f64::max, f64::NEG_INFINITY, |p| p.y).clamp(0.0, height);
    BBox::new(x1, y1, x2, y2)
}

fn corners_inside(cs: &CornerSet, width: f64, height: f64) -> bool {
    cs.uv
        .iter()
        .all(|p| p.x >= 0.0 && p.x < width && p.y >= 0.0 && p.y < height)
}

/// Splits a scene's instances into kept and rejected. Checks run in the
/// order truncation flag, corner containment, box completion, box area, and
/// the first failing check is the reason.
pub fn filter_instances(scene: &SceneAnnotation, target: f64) -> Result<FilterOutcome> {
    let t = LetterboxTransform::new(scene.width, scene.height, target)?;
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for inst in &scene.instances {
        let mut inst = inst.clone();
        if inst.flag == QualityFlag::Truncated {
            rejected.push((inst, RejectReason::NotGood));
            continue;
        }
        if !corners_inside(&inst.corners, scene.width, scene.height) {
            rejected.push((inst, RejectReason::CornersOutside));
            continue;
        }
        let bbox = match inst.bbox {
            Some(b) => b,
            None => match rough_box_from_corners(&inst.corners.uv, scene.width, scene.height) {
                Ok(b) => b,
                Err(_) => {
                    rejected.push((inst, RejectReason::DegenerateBox));
                    continue;
                }
            },
        };
        inst.bbox = Some(bbox);
        if bbox.area() * t.scale * t.scale < MIN_BOX_AREA {
            rejected.push((inst, RejectReason::TooSmall));
            continue;
        }
        kept.push(inst);
    }
    Ok(FilterOutcome { kept, rejected })
}

// ---------------------------------------------------------------------------
// preprocessing

/// One model-ready instance: letterboxed, canonicalized, normalized by the
/// target size, with virtual depths.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInstance {
    pub id: String,
    pub image_id: String,
    pub transform: LetterboxTransform,
    pub bbox: NormBox,
    /// Canonical image order, in `[0, 1]` letterboxed coordinates.
    pub corners: [Point2<f64>; NUM_CORNERS],
    pub depths: [f64; NUM_CORNERS],
    /// `corners[i]` came from source corner `permutation[i]`.
    pub permutation: [usize; NUM_CORNERS],
}

pub fn preprocess(
    scene: &SceneAnnotation,
    target: f64,
    virtual_camera: &VirtualCamera,
) -> Result<Vec<PreparedInstance>> {
    let k = scene
        .intrinsics
        .ok_or_else(|| Error::MissingIntrinsics(scene.image_id.clone()))?;
    let t = LetterboxTransform::new(scene.width, scene.height, target)?;
    let norm = |p: Point2<f64>| {
        let q = t.forward(p);
        Point2::new(q.x / target, q.y / target)
    };
    scene
        .instances
        .iter()
        .map(|inst| {
            let bbox = match inst.bbox {
                Some(b) => b,
                None => rough_box_from_corners(&inst.corners.uv, scene.width, scene.height)?,
            };
            let perm = canonical_permutation(&inst.corners.uv);
            let canon = inst.corners.permuted(&perm);
            let virt = convert_corner_depths(
                &canon,
                k.fy,
                scene.height,
                virtual_camera,
                DepthSpace::Virtual,
            )?;
            let lo = norm(Point2::new(bbox.x1, bbox.y1));
            let hi = norm(Point2::new(bbox.x2, bbox.y2));
            Ok(PreparedInstance {
                id: inst.id.clone(),
                image_id: scene.image_id.clone(),
                transform: t,
                bbox: NormBox::new(lo.x, lo.y, hi.x, hi.y)?,
                corners: canon.uv.map(norm),
                depths: virt.depths,
                permutation: perm,
            })
        })
        .collect()
}

impl PreparedInstance {
    /// Undoes [`preprocess`]: source pixel corners in the source order with
    /// metric depths.
    pub fn restore(&self, k: &Intrinsics, virtual_camera: &VirtualCamera) -> Result<CornerSet> {
        let t = &self.transform;
        let uv = self
            .corners
            .map(|p| t.inverse(Point2::new(p.x * t.dst, p.y * t.dst)));
        let canon = CornerSet::new(uv, self.depths, DepthSpace::Virtual)?;
        let metric =
            convert_corner_depths(&canon, k.fy, t.src_h, virtual_camera, DepthSpace::Metric)?;
        let mut out = metric;
        for (i, &src) in self.permutation.iter().enumerate() {
            out.uv[src] = metric.uv[i];
            out.depths[src] = metric.depths[i];
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct PreparedLine {
    format_version: u32,
    id: String,
    image_id: String,
    letterbox: LetterboxTransform,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    corners: [f64; 2 * NUM_CORNERS],
    depths: [f64; NUM_CORNERS],
    permutation: [usize; NUM_CORNERS],
}

pub fn write_prepared(items: &[PreparedInstance]) -> String {
    items
        .iter()
        .map(|p| {
            let line = PreparedLine {
                format_version: FORMAT_VERSION,
                id: p.id.clone(),
                image_id: p.image_id.clone(),
                letterbox: p.transform,
                bbox: [p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2],
                corners: std::array::from_fn(|i| {
                    let c = p.corners[i / 2];
                    if i % 2 == 0 {
                        c.x
                    } else {
                        c.y
                    }
                }),
                depths: p.depths,
                permutation: p.permutation,
            };
            serde_json::to_string(&line).expect("prepared instance serializes") + "\n"
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cs(uv: [(f64, f64); 8]) -> CornerSet {
        CornerSet::new(
            uv.map(|(u, v)| Point2::new(u, v)),
            [2.0; 8],
            DepthSpace::Metric,
        )
        .unwrap()
    }

    fn square(x: f64, y: f64, side: f64) -> CornerSet {
        cs([
            (x, y),
            (x + side, y),
            (x, y + side),
            (x + side, y + side),
            (x + 1.0, y + 1.0),
            (x + side - 1.0, y + 1.0),
            (x + 1.0, y + side - 1.0),
            (x + side - 1.0, y + side - 1.0),
        ])
    }

    fn scene(instances: Vec<InstanceRecord>, w: f64, h: f64) -> SceneAnnotation {
        SceneAnnotation {
            image_id: "img".into(),
            dataset: "test".into(),
            width: w,
            height: h,
            intrinsics: Some(Intrinsics::new(512.0, 512.0, w / 2.0, h / 2.0).unwrap()),
            instances,
        }
    }

    fn inst(id: &str, corners: CornerSet, bbox: Option<BBox>, flag: QualityFlag) -> InstanceRecord {
        InstanceRecord {
            id: id.into(),
            bbox,
            corners,
            category: None,
            flag,
        }
    }

    #[test]
    fn empty_input() {
        assert!(parse_annotations("", ParseMode::Strict)
            .unwrap()
            .records
            .is_empty());
        assert!(parse_predictions("\n\n", ParseMode::Strict)
            .unwrap()
            .records
            .is_empty());
    }

    #[test]
    fn bad_box_names_instance() {
        let line = r#"{"format_version":1,"image_id":"a","width":100,"height":100,"K":null,"instances":[{"id":"car-7","box":[50,10,40,20],"corners":[1,1,2,2,3,3,4,4,5,5,6,6,7,7,8,8],"depths":[1,1,1,1,1,1,1,1],"flag":"good"}]}"#;
        match parse_annotations(line, ParseMode::Strict) {
            Err(Error::Schema { line: 1, message }) => {
                assert!(message.contains("car-7"), "{message}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partial_mode_counts() {
        let good = write_annotations(&[scene(vec![], 64.0, 64.0)]);
        let text = format!("{good}not json\n{good}");
        let parsed = parse_annotations(&text, ParseMode::Partial).unwrap();
        assert_eq!(parsed.records.len(), 2);
        assert_eq!(parsed.skipped.len(), 1);
        assert!(matches!(parsed.skipped[0], Error::Schema { line: 2, .. }));
        assert!(parse_annotations(&text, ParseMode::Strict).is_err());
    }

    #[test]
    fn negative_depth_prediction_rejected() {
        let line = r#"{"format_version":1,"id":"x","uv":[1,1,2,2,3,3,4,4,5,5,6,6,7,7,8,8],"depths":[1,1,1,-1,1,1,1,1],"depth_space":"metric"}"#;
        let text = format!("{}\n{line}\n", line.replace("-1", "1"));
        assert!(matches!(
            parse_predictions(&text, ParseMode::Strict),
            Err(Error::Schema { line: 2, .. })
        ));
    }

    #[test]
    fn unknown_fields_ignored() {
        let line = r#"{"format_version":1,"id":"x","extra":[1,2],"uv":[1,1,2,2,3,3,4,4,5,5,6,6,7,7,8,8],"depths":[1,1,1,1,1,1,1,1],"depth_space":"virtual"}"#;
        let p = parse_predictions(line, ParseMode::Strict).unwrap();
        assert_eq!(p.records[0].corners.depth_space, DepthSpace::Virtual);
    }

    #[test]
    fn wrong_version_rejected() {
        let line = r#"{"format_version":2,"id":"x","uv":[1,1,2,2,3,3,4,4,5,5,6,6,7,7,8,8],"depths":[1,1,1,1,1,1,1,1],"depth_space":"metric"}"#;
        assert!(parse_predictions(line, ParseMode::Strict).is_err());
    }

    #[test]
    fn filter_edge_and_area_rules() {
        let b90 = BBox::new(100.0, 100.0, 190.0, 190.0).unwrap();
        let b60 = BBox::new(100.0, 100.0, 160.0, 160.0).unwrap();
        let mut on_edge = square(900.0, 100.0, 124.0);
        on_edge.uv[1].x = 1024.0;
        let s = scene(
            vec![
                inst(
                    "big",
                    square(100.0, 100.0, 90.0),
                    Some(b90),
                    QualityFlag::Good,
                ),
                inst(
                    "small",
                    square(100.0, 100.0, 60.0),
                    Some(b60),
                    QualityFlag::Good,
                ),
                inst("edge", on_edge, Some(b90), QualityFlag::Good),
                inst(
                    "trunc",
                    square(100.0, 100.0, 90.0),
                    Some(b90),
                    QualityFlag::Truncated,
                ),
                inst(
                    "nobox",
                    square(100.0, 100.0, 90.0),
                    None,
                    QualityFlag::MissingBox,
                ),
            ],
            1024.0,
            512.0,
        );
        let out = filter_instances(&s, 512.0).unwrap();
        let kept: Vec<_> = out.kept.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(kept, ["big", "nobox"]);
        let rej: Vec<_> = out
            .rejected
            .iter()
            .map(|(i, r)| (i.id.as_str(), *r))
            .collect();
        assert_eq!(
            rej,
            [
                ("small", RejectReason::TooSmall),
                ("edge", RejectReason::CornersOutside),
                ("trunc", RejectReason::NotGood),
            ]
        );
        assert_eq!(out.kept[1].bbox, Some(b90));
    }

    #[test]
    fn rough_box_clamps() {
        let c = square(-10.0, 5.0, 30.0);
        let b = rough_box_from_corners(&c.uv, 15.0, 100.0).unwrap();
        assert_eq!(b.to_array(), [0.0, 5.0, 15.0, 35.0]);
        let unit = square(0.0, 0.0, 1.0);
        let b = rough_box_from_corners(&unit.uv, 10.0, 10.0).unwrap();
        assert_eq!(b.to_array(), [0.0, 0.0, 1.0, 1.0]);
        let out = square(-50.0, 0.0, 10.0);
        assert!(matches!(
            rough_box_from_corners(&out.uv, 10.0, 10.0),
            Err(Error::DegenerateBox(_))
        ));
    }

    #[test]
    fn preprocess_examples() {
        // square image with f = f_v: pure scaling, depths unchanged
        let mut s = scene(
            vec![inst(
                "a",
                square(100.0, 200.0, 90.0),
                None,
                QualityFlag::Good,
            )],
            1024.0,
            1024.0,
        );
        s.intrinsics = Some(Intrinsics::new(512.0, 1024.0, 512.0, 512.0).unwrap());
        let p = &preprocess(&s, 512.0, &VirtualCamera::default()).unwrap()[0];
        assert_eq!(p.depths, [2.0; 8]);
        assert!((p.bbox.x1 - 100.0 / 1024.0).abs() < 1e-15);

        // 1024x512: v offset by 128/512
        let s = scene(
            vec![inst("a", square(0.0, 0.0, 90.0), None, QualityFlag::Good)],
            1024.0,
            512.0,
        );
        let p = &preprocess(&s, 512.0, &VirtualCamera::default()).unwrap()[0];
        assert!((p.bbox.y1 - 0.25).abs() < 1e-15);
        let restored = p
            .restore(&s.intrinsics.unwrap(), &VirtualCamera::default())
            .unwrap();
        for i in 0..8 {
            assert!((restored.uv[i] - s.instances[0].corners.uv[i]).norm() < 1e-9);
            assert!((restored.depths[i] - 2.0).abs() < 1e-12);
        }
    }
}
