//! Pose estimation from correspondences: Kabsch and EPnP minimal solvers,
//! their RANSAC wrappers, and point-to-plane ICP.

mod epnp;
mod icp;
mod kabsch;
mod ransac;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;

pub use epnp::{epnp, epnp_candidates, pnp_ransac, refine_reprojection, reprojection_errors};
pub use icp::{estimate_normals, icp_point_to_plane, point_to_plane_residual, IcpConfig};
pub use kabsch::{kabsch, kabsch_ransac};
pub use ransac::canonical_order;

/// Default reprojection threshold for PnP, in pixels.
pub const PNP_THRESHOLD_PX: f64 = 2.0;
/// Default Kabsch inlier threshold as a fraction of the mesh diameter.
pub const KABSCH_THRESHOLD_FRAC: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub max_iters: usize,
    /// Pixels for PnP, model units for Kabsch.
    pub inlier_threshold: f64,
    pub min_inlier_count: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl RansacConfig {
    pub fn pnp() -> Self {
        Self {
            max_iters: 300,
            inlier_threshold: PNP_THRESHOLD_PX,
            min_inlier_count: 12,
            confidence: 0.995,
            seed: 0,
        }
    }

    pub fn kabsch(diameter: f64) -> Self {
        Self {
            inlier_threshold: KABSCH_THRESHOLD_FRAC * diameter,
            ..Self::pnp()
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0
            || !(self.inlier_threshold > 0.0)
            || !(self.confidence > 0.0 && self.confidence < 1.0)
        {
            return Err(Error::InvalidConfig(format!("invalid RANSAC config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub pose: Pose,
    /// Indices into the caller's correspondence list, ascending.
    pub inlier_indices: Vec<usize>,
    pub mean_inlier_residual: f64,
    /// Hypotheses drawn before termination.
    pub iterations: usize,
}
