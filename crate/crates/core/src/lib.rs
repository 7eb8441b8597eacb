//! Geometric core of dense-correspondence 6 DoF object pose estimation.
//!
//! Objects are described in a normalized object coordinate space (NOCS):
//! every surface point maps to a color in `[0, 1]^3`. Given per-pixel NOCS
//! predictions, the crate recovers poses with PnP or Kabsch inside RANSAC,
//! disambiguates symmetric objects, and refines poses jointly across
//! calibrated views by render-and-compare optimization.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod correspondence;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod raster;
pub mod refine;
pub mod shapes;
pub mod solvers;
pub mod symmetry;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, Mesh, NocsBounds, Pose, Rot6D, Vec3};
