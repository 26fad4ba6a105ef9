//! Pixel-aligned 3D bounding-box geometry.
//!
//! The crate covers the non-learned half of a monocular cuboid-corner
//! pipeline: camera plumbing, dense corner heatmaps and depth maps with
//! soft-argmax extraction, the heatmap/coordinate/depth loss suite with
//! analytic gradients, the PAG / NHD / IoU3D evaluation protocol with
//! Kabsch rectification, dataset I/O and a seeded synthetic scene
//! generator.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataset;
pub mod dense;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod synthetic;

pub use error::{Error, Result};
pub use geometry::{
    Corner3DSet, CornerSet, Cuboid, DepthSpace, Intrinsics, LetterboxTransform, NUM_CORNERS,
};
