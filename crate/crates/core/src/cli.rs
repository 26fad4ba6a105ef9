//! `pagbox` command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 schema, 5 evaluation or other
//! domain error, 6 gradient check above tolerance, 7 fit diverged.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Point2;

use crate::dataset::{
    filter_instances, preprocess, read_annotations, read_predictions, write_annotations,
    write_atomic, write_predictions, write_prepared, ParseMode, Parsed, PredictionRecord,
    SceneAnnotation,
};
use crate::dense::{Grid, DEFAULT_BETA, DEFAULT_GRID};
use crate::error::{Error, Result};
use crate::geometry::{convert_corner_depths, unproject_corners, DepthSpace, VirtualCamera};
use crate::losses::{
    fit_heatmaps, gradient_check, FitConfig, LossParams, LossTargets, TraceRow, DEFAULT_LAMBDA,
    DEFAULT_TAU,
};
use crate::metrics::{evaluate, kabsch_rectify, EvalOptions, PredOrder};
use crate::synthetic::{generate_dataset, generate_scene, perturb, NoiseSpec, SceneConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_SCHEMA: i32 = 4;
pub const EXIT_EVAL: i32 = 5;
pub const EXIT_GRADCHECK: i32 = 6;
pub const EXIT_DIVERGED: i32 = 7;

#[derive(Debug, Parser)]
#[command(
    name = "pagbox",
    version,
    about = "Pixel-aligned 3D box geometry toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderArg {
    Aligned,
    Sorted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Debug, Clone, Args)]
pub struct CameraArgs {
    /// Letterbox target side in pixels.
    #[arg(long, default_value_t = 512.0)]
    pub target: f64,
    /// Virtual camera focal length.
    #[arg(long, default_value_t = 512.0)]
    pub fv: f64,
    /// Virtual camera image height.
    #[arg(long, default_value_t = 512.0)]
    pub hv: f64,
}

impl CameraArgs {
    fn virtual_camera(&self) -> VirtualCamera {
        VirtualCamera {
            focal: self.fv,
            height: self.hv,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[command(flatten)]
        camera: CameraArgs,
        /// Drop ground truth rejected by the dataset filter.
        #[arg(long)]
        filter: bool,
        /// Skip malformed lines instead of failing.
        #[arg(long)]
        partial: bool,
        /// Rectify predictions even when they carry a cuboid.
        #[arg(long)]
        rectify_always: bool,
        /// Corner correspondence: `aligned` pairs corners by index, `sorted`
        /// sorts each set into canonical order independently.
        #[arg(long, value_enum, default_value_t = OrderArg::Aligned)]
        pred_order: OrderArg,
    },
    /// Filter, letterbox and canonicalize annotations into model-ready records.
    Preprocess {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        camera: CameraArgs,
        #[arg(long)]
        partial: bool,
    },
    /// Generate a synthetic annotation file and optionally noisy predictions.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        #[arg(long, default_value_t = 4)]
        instances: usize,
        /// Fixed image size `WxH` instead of the default random range.
        #[arg(long, value_parser = parse_size)]
        image: Option<(u32, u32)>,
        #[arg(long, default_value_t = 512.0)]
        target: f64,
        #[arg(long)]
        pred_out: Option<PathBuf>,
        /// Corner noise standard deviation in pixels.
        #[arg(long, default_value_t = 0.0)]
        noise_px: f64,
        /// Relative depth noise standard deviation.
        #[arg(long, default_value_t = 0.0)]
        noise_depth: f64,
    },
    /// Compare analytic loss gradients against central differences.
    Gradcheck {
        /// First seed; seeds `seed .. seed + instances` are checked.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        instances: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16])]
        grid: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_BETA)]
        beta: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit heatmaps and depth maps to one instance by gradient descent.
    Fit {
        /// Annotation file; a synthetic instance is drawn from `--seed` when omitted.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Instance id inside `--gt`; the first kept instance by default.
        #[arg(long)]
        instance: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_GRID)]
        grid: usize,
        #[arg(long, default_value_t = DEFAULT_BETA)]
        beta: f64,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        /// Logit learning rate.
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, default_value_t = 0.05)]
        lr_depth: f64,
        #[command(flatten)]
        camera: CameraArgs,
        /// Loss trace (tab separated).
        #[arg(long)]
        out: PathBuf,
        /// Final corners as a prediction line.
        #[arg(long)]
        pred_out: Option<PathBuf>,
    },
    /// Fit the closest valid cuboid to each predicted corner set.
    Rectify {
        #[arg(long)]
        pred: PathBuf,
        /// Annotation file supplying intrinsics and image heights.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512.0)]
        fv: f64,
        #[arg(long, default_value_t = 512.0)]
        hv: f64,
    },
}

fn parse_size(s: &str) -> std::result::Result<(u32, u32), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(w)?, parse(h)?))
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::Schema { .. } => EXIT_SCHEMA,
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::InvalidConfig(_) => EXIT_USAGE,
        _ => EXIT_EVAL,
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    match run(cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::Evaluate {
            gt,
            pred,
            out: out_path,
            format,
            camera,
            filter,
            partial,
            rectify_always,
            pred_order,
        } => {
            let mode = parse_mode(partial);
            let scenes = load(read_annotations(&gt, mode)?, &gt, err);
            let preds = load(read_predictions(&pred, mode)?, &pred, err);
            let options = EvalOptions {
                target: camera.target,
                virtual_camera: camera.virtual_camera(),
                filter,
                rectify_always,
                pred_order: match pred_order {
                    OrderArg::Aligned => PredOrder::Aligned,
                    OrderArg::Sorted => PredOrder::Sorted,
                },
            };
            let report = evaluate(&preds, &scenes, &options)?;
            for m in &report.instances {
                for note in &m.notes {
                    let _ = writeln!(err, "note: {}: {note}", m.id);
                }
            }
            let text = match format {
                Format::Json => report.to_json(),
                Format::Text => report.to_text(),
            };
            emit(out_path.as_deref(), &text, out)?;
            Ok(EXIT_OK)
        }
        Command::Preprocess {
            gt,
            out: out_path,
            camera,
            partial,
        } => {
            let scenes = load(read_annotations(&gt, parse_mode(partial))?, &gt, err);
            let vc = camera.virtual_camera();
            let mut prepared = Vec::new();
            for scene in &scenes {
                let outcome = filter_instances(scene, camera.target)?;
                for (inst, reason) in &outcome.rejected {
                    let _ = writeln!(err, "rejected: {}: {reason}", inst.id);
                }
                let kept = SceneAnnotation {
                    instances: outcome.kept,
                    ..scene.clone()
                };
                match preprocess(&kept, camera.target, &vc) {
                    Ok(items) => prepared.extend(items),
                    Err(Error::MissingIntrinsics(id)) => {
                        let _ = writeln!(err, "skipped: scene {id} has no intrinsics");
                    }
                    Err(e) => return Err(e),
                }
            }
            write_atomic(&out_path, &write_prepared(&prepared))?;
            let _ = writeln!(
                out,
                "{} instances written to {}",
                prepared.len(),
                out_path.display()
            );
            Ok(EXIT_OK)
        }
        Command::Synth {
            out: out_path,
            seed,
            scenes,
            instances,
            image,
            target,
            pred_out,
            noise_px,
            noise_depth,
        } => {
            let mut config = SceneConfig {
                instances,
                target,
                seed,
                ..SceneConfig::default()
            };
            if let Some((w, h)) = image {
                config.width_range = (w, w);
                config.height_range = (h, h);
            }
            let generated = generate_dataset(&config, scenes)?;
            let annotations: Vec<SceneAnnotation> =
                generated.into_iter().map(|s| s.scene).collect();
            write_atomic(&out_path, &write_annotations(&annotations))?;
            if let Some(pred_path) = pred_out {
                let spec = NoiseSpec {
                    corner_px: noise_px,
                    depth_rel: noise_depth,
                    seed,
                    ..NoiseSpec::default()
                };
                let preds = noisy_predictions(&annotations, &spec)?;
                write_atomic(&pred_path, &write_predictions(&preds))?;
            }
            let _ = writeln!(
                out,
                "{} scenes, {} instances written to {}",
                annotations.len(),
                annotations.iter().map(|s| s.instances.len()).sum::<usize>(),
                out_path.display()
            );
            Ok(EXIT_OK)
        }
        Command::Gradcheck {
            seed,
            instances,
            grid,
            beta,
            tolerance,
            format,
            out: out_path,
        } => {
            if !(tolerance > 0.0) {
                return Err(Error::InvalidConfig("tolerance must be positive".into()));
            }
            let params = LossParams {
                beta,
                ..LossParams::default()
            };
            let mut rows = Vec::new();
            for &size in &grid {
                for s in seed..seed + instances {
                    rows.push(gradient_check(s, size, &params)?);
                }
            }
            let worst = rows.iter().map(|r| r.max()).fold(0.0, f64::max);
            let text = match format {
                Format::Json => serde_json::to_string_pretty(&serde_json::json!({
                    "tolerance": tolerance,
                    "max_relative_error": worst,
                    "checks": rows,
                }))
                .expect("gradcheck report serializes"),
                Format::Text => {
                    let mut t = format!(
                        "{:>6} {:>5} {:>12} {:>12}\n",
                        "seed", "grid", "logits", "z_raw"
                    );
                    for r in &rows {
                        t += &format!(
                            "{:>6} {:>5} {:>12.3e} {:>12.3e}\n",
                            r.seed, r.size, r.logits, r.z_raw
                        );
                    }
                    t += &format!("max relative error {worst:.3e} (tolerance {tolerance:e})\n");
                    t
                }
            };
            emit(out_path.as_deref(), &text, out)?;
            if worst <= tolerance {
                Ok(EXIT_OK)
            } else {
                let _ = writeln!(err, "gradient check failed: {worst:e} > {tolerance:e}");
                Ok(EXIT_GRADCHECK)
            }
        }
        Command::Fit {
            gt,
            instance,
            seed,
            grid,
            beta,
            lambda,
            steps,
            lr,
            lr_depth,
            camera,
            out: out_path,
            pred_out,
        } => {
            let scene = match &gt {
                Some(path) => {
                    let scenes = load(read_annotations(path, ParseMode::Strict)?, path, err);
                    select_instance(&scenes, instance.as_deref(), camera.target)?
                }
                None => {
                    // Near, large boxes so the corners spread over the grid.
                    let config = SceneConfig {
                        instances: 1,
                        depth_range: (3.0, 8.0),
                        size_range: (1.0, 3.0),
                        target: camera.target,
                        seed,
                        ..SceneConfig::default()
                    };
                    generate_scene(&config)?.scene
                }
            };
            let vc = camera.virtual_camera();
            let prepared = preprocess(&scene, camera.target, &vc)?.remove(0);
            let g = Grid::new(grid, grid, camera.target, camera.target)?;
            let to_grid = |p: &Point2<f64>| {
                g.from_image(Point2::new(p.x * camera.target, p.y * camera.target))
            };
            let targets = LossTargets::new(
                prepared.corners.each_ref().map(to_grid),
                prepared.depths,
                grid,
                grid,
                DEFAULT_TAU,
                lambda,
            )?;
            let config = FitConfig {
                steps,
                lr_logits: lr,
                lr_depth,
                seed,
                params: LossParams {
                    beta,
                    ..LossParams::default()
                },
                ..FitConfig::default()
            };
            let result = fit_heatmaps(&targets, &g, &config)?;
            let mut trace = String::from(TraceRow::HEADER);
            trace.push('\n');
            for row in &result.trace {
                trace += &row.to_line();
                trace.push('\n');
            }
            write_atomic(&out_path, &trace)?;

            let mut fitted = prepared.clone();
            fitted.corners = result
                .corners
                .uv
                .map(|p| Point2::new(p.x / camera.target, p.y / camera.target));
            fitted.depths = result.depths;
            let k = scene.intrinsics.expect("preprocess checked intrinsics");
            let restored = fitted.restore(&k, &vc)?;
            let truth = &scene.instances[0].corners;
            let px_err = restored
                .uv
                .iter()
                .zip(&truth.uv)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            let depth_err = restored
                .depths
                .iter()
                .zip(&truth.depths)
                .map(|(a, b)| ((a - b) / b).abs())
                .sum::<f64>()
                / truth.depths.len() as f64;
            if let Some(path) = pred_out {
                let record = PredictionRecord {
                    id: prepared.id.clone(),
                    corners: restored,
                    cuboid: None,
                };
                write_atomic(&path, &write_predictions(&[record]))?;
            }
            let cell_err = result
                .grid_corners
                .iter()
                .zip(&targets.corners)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            let last = result.trace.last().map_or(f64::NAN, |r| r.total);
            let _ = writeln!(
                out,
                "instance {}: final loss {last:.6e}, max corner error {cell_err:.4} cells ({px_err:.3} image px), mean relative depth error {:.4}%",
                prepared.id,
                100.0 * depth_err
            );
            Ok(EXIT_OK)
        }
        Command::Rectify {
            pred,
            gt,
            out: out_path,
            fv,
            hv,
        } => {
            let scenes = load(read_annotations(&gt, ParseMode::Strict)?, &gt, err);
            let preds = load(read_predictions(&pred, ParseMode::Strict)?, &pred, err);
            let vc = VirtualCamera {
                focal: fv,
                height: hv,
            };
            let mut cameras = HashMap::new();
            for scene in &scenes {
                for inst in &scene.instances {
                    cameras.insert(
                        inst.id.as_str(),
                        (scene.intrinsics, scene.height, &scene.image_id),
                    );
                }
            }
            let mut rectified = Vec::with_capacity(preds.len());
            for p in &preds {
                let &(k, height, image_id) = cameras
                    .get(p.id.as_str())
                    .ok_or_else(|| Error::UnmatchedInstance(p.id.clone()))?;
                let k = k.ok_or_else(|| {
                    Error::MissingIntrinsics(format!("{image_id} (instance {})", p.id))
                })?;
                let metric =
                    convert_corner_depths(&p.corners, k.fy, height, &vc, DepthSpace::Metric)?;
                let cuboid = unproject_corners(&metric, &k)
                    .and_then(|c| kabsch_rectify(&c))
                    .map_err(|e| Error::InvalidCorners(format!("{}: {e}", p.id)))?;
                rectified.push(PredictionRecord {
                    cuboid: Some(cuboid),
                    ..p.clone()
                });
            }
            write_atomic(&out_path, &write_predictions(&rectified))?;
            let _ = writeln!(
                out,
                "{} cuboids written to {}",
                rectified.len(),
                out_path.display()
            );
            Ok(EXIT_OK)
        }
    }
}

fn parse_mode(partial: bool) -> ParseMode {
    if partial {
        ParseMode::Partial
    } else {
        ParseMode::Strict
    }
}

fn load<T>(parsed: Parsed<T>, path: &Path, err: &mut dyn Write) -> Vec<T> {
    for e in &parsed.skipped {
        let _ = writeln!(err, "skipped: {}: {e}", path.display());
    }
    parsed.records
}

fn emit(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, text),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| Error::io(Path::new("<stdout>"), e)),
    }
}

/// Perturbed copies of every ground-truth instance; instance `i` of the whole
/// file uses noise stream `i`.
pub fn noisy_predictions(
    scenes: &[SceneAnnotation],
    spec: &NoiseSpec,
) -> Result<Vec<PredictionRecord>> {
    scenes
        .iter()
        .flat_map(|s| &s.instances)
        .enumerate()
        .map(|(i, inst)| {
            Ok(PredictionRecord {
                id: inst.id.clone(),
                corners: perturb(&inst.corners, spec, i as u64)?,
                cuboid: None,
            })
        })
        .collect()
}

/// Scene reduced to the requested instance, or to the first instance that
/// passes the filter.
fn select_instance(
    scenes: &[SceneAnnotation],
    id: Option<&str>,
    target: f64,
) -> Result<SceneAnnotation> {
    for scene in scenes {
        let kept = filter_instances(scene, target)?.kept;
        let found = match id {
            Some(id) => scene.instances.iter().find(|i| i.id == id).cloned(),
            None => kept.into_iter().next(),
        };
        if let Some(inst) = found {
            return Ok(SceneAnnotation {
                instances: vec![inst],
                ..scene.clone()
            });
        }
    }
    Err(Error::InvalidConfig(match id {
        Some(id) => format!("instance {id} not found"),
        None => "no instance passes the filter".into(),
    }))
}
