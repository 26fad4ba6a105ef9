//! Seeded synthetic scenes and noise models.
//!
//! Randomness is split into ChaCha streams so that instances can be generated
//! in any order: scene `j` of a dataset uses streams `j << 32 | slot`, where
//! slot 0 draws the camera and slot `i + 1` draws instance `i`.

use nalgebra::{Point2, Point3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dataset::{
    filter_instances, rough_box_from_corners, InstanceRecord, QualityFlag, SceneAnnotation,
    DEFAULT_TARGET,
};
use crate::dense::NormBox;
use crate::error::{Error, Result};
use crate::geometry::{project_corners, CornerSet, Cuboid, Intrinsics};

/// Depth floor applied after multiplicative depth noise.
pub const MIN_DEPTH: f64 = 0.01;

/// Attempts per instance before the config is declared infeasible.
pub const RETRY_BUDGET: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub instances: usize,
    /// Center depth range in meters.
    pub depth_range: (f64, f64),
    /// Per-axis edge length range in meters.
    pub size_range: (f64, f64),
    /// Focal length range in pixels, `fx = fy`.
    pub focal_range: (f64, f64),
    /// Image width and height ranges in pixels; drawn as integers.
    pub width_range: (u32, u32),
    pub height_range: (u32, u32),
    /// Letterbox target used by the acceptance filter.
    pub target: f64,
    pub dataset: String,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            instances: 4,
            depth_range: (4.0, 30.0),
            size_range: (0.4, 4.0),
            focal_range: (518.0, 1708.0),
            width_range: (640, 1600),
            height_range: (480, 1200),
            target: DEFAULT_TARGET,
            dataset: "synthetic".into(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && hi >= lo && hi.is_finite();
        if !ok(self.depth_range) || !ok(self.size_range) || !ok(self.focal_range) {
            return Err(Error::InvalidConfig(
                "ranges must be positive and non-empty".into(),
            ));
        }
        let ok = |(lo, hi): (u32, u32)| lo > 0 && hi >= lo;
        if !ok(self.width_range) || !ok(self.height_range) {
            return Err(Error::InvalidConfig(
                "image size ranges must be positive and non-empty".into(),
            ));
        }
        if !(self.target > 0.0) {
            return Err(Error::InvalidConfig("target must be positive".into()));
        }
        Ok(())
    }
}

/// Generated scene together with the source boxes of its instances.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub scene: SceneAnnotation,
    pub cuboids: Vec<Cuboid>,
}

fn stream_rng(seed: u64, scene: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((scene << 32) | slot);
    rng
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Uniform rotation from a normalized 4D Gaussian quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> nalgebra::Matrix3<f64> {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        if quat.norm() > 1e-9 {
            return UnitQuaternion::from_quaternion(quat)
                .to_rotation_matrix()
                .into_inner();
        }
    }
}

pub fn generate_scene(config: &SceneConfig) -> Result<SyntheticScene> {
    generate_scene_at(config, 0)
}

/// Scene number `index` of the dataset defined by `config`.
pub fn generate_scene_at(config: &SceneConfig, index: u64) -> Result<SyntheticScene> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, index, 0);
    let width = rng.random_range(config.width_range.0..=config.width_range.1) as f64;
    let height = rng.random_range(config.height_range.0..=config.height_range.1) as f64;
    let f = draw(&mut rng, config.focal_range);
    let k = Intrinsics::new(f, f, width / 2.0, height / 2.0)?;
    let image_id = format!("synth-{}-{index}", config.seed);

    let mut scene = SceneAnnotation {
        image_id: image_id.clone(),
        dataset: config.dataset.clone(),
        width,
        height,
        intrinsics: Some(k),
        instances: Vec::with_capacity(config.instances),
    };
    let mut cuboids = Vec::with_capacity(config.instances);
    for i in 0..config.instances {
        let mut rng = stream_rng(config.seed, index, i as u64 + 1);
        let (record, cuboid) =
            generate_instance(&mut rng, &scene, &k, config, format!("{image_id}/{i}"))?;
        scene.instances.push(record);
        cuboids.push(cuboid);
    }
    Ok(SyntheticScene { scene, cuboids })
}

fn generate_instance(
    rng: &mut ChaCha8Rng,
    scene: &SceneAnnotation,
    k: &Intrinsics,
    config: &SceneConfig,
    id: String,
) -> Result<(InstanceRecord, Cuboid)> {
    for _ in 0..RETRY_BUDGET {
        let z = draw(rng, config.depth_range);
        let u = rng.random_range(0.0..scene.width);
        let v = rng.random_range(0.0..scene.height);
        let center = Point3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z);
        let size = Vector3::from_fn(|_, _| draw(rng, config.size_range));
        let cuboid = Cuboid::new(center, size, random_rotation(rng))?;
        let Ok(corners) = project_corners(&cuboid.corners(), k) else {
            continue;
        };
        let Ok(bbox) = rough_box_from_corners(&corners.uv, scene.width, scene.height) else {
            continue;
        };
        let record = InstanceRecord {
            id: id.clone(),
            bbox: Some(bbox),
            corners,
            category: None,
            flag: QualityFlag::Good,
        };
        let probe = SceneAnnotation {
            instances: vec![record.clone()],
            ..scene.clone()
        };
        if filter_instances(&probe, config.target)?.rejected.is_empty() {
            return Ok((record, cuboid));
        }
    }
    Err(Error::GenerationExhausted {
        attempts: RETRY_BUDGET,
    })
}

pub fn generate_dataset(config: &SceneConfig, scenes: usize) -> Result<Vec<SyntheticScene>> {
    (0..scenes as u64)
        .map(|j| generate_scene_at(config, j))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    /// Corner jitter standard deviation in pixels.
    pub corner_px: f64,
    /// Relative depth jitter standard deviation.
    pub depth_rel: f64,
    /// Box jitter standard deviation in normalized units.
    pub box_norm: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            corner_px: 0.0,
            depth_rel: 0.0,
            box_norm: 0.02,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if [self.corner_px, self.depth_rel, self.box_norm]
            .iter()
            .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return Err(Error::InvalidConfig(
                "noise standard deviations must be >= 0".into(),
            ));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Adds Gaussian pixel noise to every corner and multiplicative Gaussian
/// noise to every depth (floored at [`MIN_DEPTH`]). `stream` selects an
/// independent noise sequence, typically the instance index.
pub fn perturb(gt: &CornerSet, spec: &NoiseSpec, stream: u64) -> Result<CornerSet> {
    spec.validate()?;
    let mut rng = spec.rng(stream);
    let px = Normal::new(0.0, spec.corner_px).expect("validated sigma");
    let rel = Normal::new(0.0, spec.depth_rel).expect("validated sigma");
    let uv = gt
        .uv
        .map(|p| Point2::new(p.x + px.sample(&mut rng), p.y + px.sample(&mut rng)));
    let depths = gt
        .depths
        .map(|d| (d * (1.0 + rel.sample(&mut rng))).max(MIN_DEPTH));
    CornerSet::new(uv, depths, gt.depth_space)
}

/// Gaussian jitter on the four normalized box coordinates. Coordinates are
/// reordered if they cross, and a collapsed box is widened to `1e-6`.
pub fn jitter_box(b: &NormBox, spec: &NoiseSpec, stream: u64) -> Result<NormBox> {
    spec.validate()?;
    let mut rng = spec.rng(stream);
    let n = Normal::new(0.0, spec.box_norm).expect("validated sigma");
    let mut c = [b.x1, b.y1, b.x2, b.y2].map(|v| v + n.sample(&mut rng));
    for (lo, hi) in [(0, 2), (1, 3)] {
        if c[lo] > c[hi] {
            c.swap(lo, hi);
        }
        if c[hi] - c[lo] < 1e-6 {
            c[hi] = c[lo] + 1e-6;
        }
    }
    NormBox::new(c[0], c[1], c[2], c[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = SceneConfig {
            seed: 7,
            ..SceneConfig::default()
        };
        assert_eq!(generate_scene(&cfg).unwrap(), generate_scene(&cfg).unwrap());
        let other = SceneConfig {
            seed: 8,
            ..cfg.clone()
        };
        assert_ne!(
            generate_scene(&cfg).unwrap(),
            generate_scene(&other).unwrap()
        );
    }

    #[test]
    fn instance_streams_are_independent_of_count() {
        let cfg = SceneConfig {
            instances: 2,
            ..SceneConfig::default()
        };
        let more = SceneConfig {
            instances: 5,
            ..cfg.clone()
        };
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&more).unwrap();
        assert_eq!(a.scene.instances[..], b.scene.instances[..2]);
    }

    #[test]
    fn zero_noise_is_identity() {
        let s = generate_scene(&SceneConfig::default()).unwrap();
        let spec = NoiseSpec {
            box_norm: 0.0,
            ..NoiseSpec::default()
        };
        let c = s.scene.instances[0].corners;
        assert_eq!(perturb(&c, &spec, 3).unwrap(), c);
        let b = NormBox::new(0.1, 0.2, 0.3, 0.4).unwrap();
        assert_eq!(jitter_box(&b, &spec, 0).unwrap(), b);
    }

    #[test]
    fn infeasible_config_reports_exhaustion() {
        let cfg = SceneConfig {
            size_range: (200.0, 300.0),
            depth_range: (4.0, 5.0),
            ..SceneConfig::default()
        };
        assert_eq!(
            generate_scene(&cfg).unwrap_err(),
            Error::GenerationExhausted {
                attempts: RETRY_BUDGET
            }
        );
    }

    #[test]
    fn rotations_are_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
            assert!((r.transpose() * r - nalgebra::Matrix3::identity()).amax() < 1e-12);
        }
    }
}
