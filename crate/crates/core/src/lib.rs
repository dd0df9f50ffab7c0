//! Metric, multi-view consistent refinement of monocular depth maps.
//!
//! A relative depth map is turned into a triangle mesh in the reference
//! camera. Per-vertex parameters are then optimized through a differentiable
//! rasterizer so that the mesh agrees with sparse metric points and with the
//! images of neighboring views.

// NaN must fail these checks, so `!(x > 0.0)` is intentional.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod camera;
pub mod error;
pub mod field;
pub mod image;
pub mod imageops;
pub mod io;
pub mod losses;
pub mod meshing;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod synth;

pub use camera::{Intrinsics, Pose, ProjectionMatrix, View};
pub use error::{Error, Result};
pub use image::{ColorImage, DepthMap};
pub use pipeline::{run, PipelineConfig, RunResult};
pub use scene::Scene;
