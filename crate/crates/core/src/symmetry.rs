//! Canonical pose selection for symmetric objects.
//!
//! Angles are measured in a canonical frame whose z axis is the symmetry
//! axis and whose y axis is model +Y projected off the axis (model +Z if the
//! axis is Y). For a Z-symmetric object the canonical frame is the model
//! frame. A disambiguated pose places the camera center in the canonical
//! +Y half of the YZ plane.
//!
//! `adjusted = pose ∘ sym`, so `pose = adjusted ∘ sym⁻¹`; `sym` is the
//! transform applied after the hypothesis when rendering.

use std::f64::consts::{FRAC_PI_2, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle, Mat3, Mesh, Pose, Vec3};
use crate::metrics::add_metric;

/// Default number of samples along a continuous orbit.
pub const ORBIT_SAMPLES: usize = 360;
const ON_AXIS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymmetryKind {
    None,
    #[serde(alias = "continuous-axis")]
    Continuous,
    Discrete,
}

#[derive(Serialize, Deserialize)]
struct SymmetryJson {
    kind: SymmetryKind,
    #[serde(default = "default_axis")]
    axis: [f64; 3],
    #[serde(default)]
    discrete_angles_deg: Vec<f64>,
}

fn default_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SymmetryJson", into = "SymmetryJson")]
pub struct SymmetrySpec {
    kind: SymmetryKind,
    axis: Vec3,
    /// Discrete group angles in degrees, identity first.
    angles_deg: Vec<f64>,
    /// Discrete group rotations, same order as `angles_deg`.
    transforms: Vec<Mat3>,
    /// Rows are the canonical x, y, z axes in model coordinates.
    frame: Mat3,
}

impl TryFrom<SymmetryJson> for SymmetrySpec {
    type Error = Error;

    fn try_from(j: SymmetryJson) -> Result<Self> {
        let axis = Vec3::from(j.axis);
        match j.kind {
            SymmetryKind::None => Ok(Self::none()),
            SymmetryKind::Continuous => Self::continuous(axis),
            SymmetryKind::Discrete => Self::discrete(axis, &j.discrete_angles_deg),
        }
    }
}

impl From<SymmetrySpec> for SymmetryJson {
    fn from(s: SymmetrySpec) -> Self {
        SymmetryJson {
            kind: s.kind,
            axis: [s.axis.x, s.axis.y, s.axis.z],
            discrete_angles_deg: if s.kind == SymmetryKind::Discrete {
                s.angles_deg
            } else {
                Vec::new()
            },
        }
    }
}

fn canonical_frame(axis: &Vec3) -> Mat3 {
    let ez = *axis;
    let mut ey = Vec3::y() - ez * ez.dot(&Vec3::y());
    if ey.norm() < 1e-6 {
        ey = Vec3::z() - ez * ez.dot(&Vec3::z());
    }
    let ey = ey.normalize();
    let ex = ey.cross(&ez);
    Mat3::from_rows(&[ex.transpose(), ey.transpose(), ez.transpose()])
}

fn unit_axis(axis: Vec3) -> Result<Vec3> {
    let n = axis.norm();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::InvalidConfig("symmetry axis must be non-zero".into()));
    }
    Ok(axis / n)
}

impl Default for SymmetrySpec {
    fn default() -> Self {
        Self::none()
    }
}

impl SymmetrySpec {
    pub fn none() -> Self {
        Self {
            kind: SymmetryKind::None,
            axis: Vec3::z(),
            angles_deg: vec![0.0],
            transforms: vec![Mat3::identity()],
            frame: Mat3::identity(),
        }
    }

    /// Continuous rotational symmetry about `axis` (normalized here).
    pub fn continuous(axis: Vec3) -> Result<Self> {
        let axis = unit_axis(axis)?;
        Ok(Self {
            kind: SymmetryKind::Continuous,
            axis,
            angles_deg: vec![0.0],
            transforms: vec![Mat3::identity()],
            frame: canonical_frame(&axis),
        })
    }

    /// Finite rotation group about `axis`. The identity is added if absent;
    /// the angle set must be closed under addition modulo 360°.
    pub fn discrete(axis: Vec3, angles_deg: &[f64]) -> Result<Self> {
        let axis = unit_axis(axis)?;
        let norm = |a: f64| a.rem_euclid(360.0);
        let same = |a: f64, b: f64| {
            let d = (norm(a) - norm(b)).abs();
            d.min(360.0 - d) < 1e-6
        };
        let mut angles = vec![0.0];
        for &a in angles_deg {
            if !a.is_finite() {
                return Err(Error::InvalidConfig("non-finite symmetry angle".into()));
            }
            if !angles.iter().any(|&b| same(a, b)) {
                angles.push(norm(a));
            }
        }
        for &a in &angles {
            for &b in &angles {
                if !angles.iter().any(|&c| same(a + b, c)) {
                    return Err(Error::InvalidConfig(format!(
                        "symmetry angles {angles:?} are not closed under composition"
                    )));
                }
            }
        }
        let transforms = angles
            .iter()
            .map(|a| axis_angle(&axis, a.to_radians()))
            .collect();
        Ok(Self {
            kind: SymmetryKind::Discrete,
            axis,
            angles_deg: angles,
            transforms,
            frame: canonical_frame(&axis),
        })
    }

    pub fn kind(&self) -> SymmetryKind {
        self.kind
    }

    pub fn axis(&self) -> Vec3 {
        self.axis
    }

    /// Discrete group elements, identity first.
    pub fn transforms(&self) -> &[Mat3] {
        &self.transforms
    }

    /// Model-frame vector expressed in the canonical frame.
    pub fn to_canonical(&self, v: &Vec3) -> Vec3 {
        self.frame * v
    }

    /// Reference direction (canonical +Y) in model coordinates.
    pub fn reference_direction(&self) -> Vec3 {
        self.frame.row(1).transpose()
    }

    /// Dispatches on the kind; `none` returns the pose and identity.
    pub fn disambiguate(&self, pose: &Pose) -> (Pose, Pose) {
        match self.kind {
            SymmetryKind::None => (*pose, Pose::identity()),
            SymmetryKind::Continuous => disambiguate_continuous(pose, self),
            SymmetryKind::Discrete => disambiguate_discrete(pose, self),
        }
    }
}

/// Rotates about the symmetry axis so that the camera center lands in the
/// canonical +Y half of the YZ plane. Returns `(adjusted, sym)`.
pub fn disambiguate_continuous(pose: &Pose, spec: &SymmetrySpec) -> (Pose, Pose) {
    let c = spec.to_canonical(&pose.camera_center_in_model());
    if c.x.hypot(c.y) < ON_AXIS_TOL {
        return (*pose, Pose::identity());
    }
    let theta = FRAC_PI_2 - c.y.atan2(c.x);
    let rz = axis_angle(&spec.axis, theta);
    let sym = Pose::from_rotation(rz.transpose());
    (pose.compose(&sym), sym)
}

/// Picks the group element `g` that brings the camera direction closest to
/// the reference direction; ties go to the earliest element. Returns
/// `(adjusted, sym)` with `sym = gᵀ`.
pub fn disambiguate_discrete(pose: &Pose, spec: &SymmetrySpec) -> (Pose, Pose) {
    let c = pose.camera_center_in_model();
    let reference = spec.reference_direction();
    if c.norm() == 0.0 {
        return (*pose, Pose::identity());
    }
    let angle = |g: &Mat3| -> f64 {
        let d = g * c;
        (d.dot(&reference) / d.norm()).clamp(-1.0, 1.0).acos()
    };
    let mut best = 0;
    let mut best_angle = angle(&spec.transforms[0]);
    for (i, g) in spec.transforms.iter().enumerate().skip(1) {
        let a = angle(g);
        if a < best_angle - 1e-12 {
            best = i;
            best_angle = a;
        }
    }
    let sym = Pose::from_rotation(spec.transforms[best].transpose());
    (pose.compose(&sym), sym)
}

/// Poses equivalent to `pose` under the symmetry: `pose ∘ g` for each group
/// element, or `n_samples` evenly spaced rotations for continuous symmetry.
pub fn orbit_poses(pose: &Pose, spec: &SymmetrySpec, n_samples: usize) -> Vec<Pose> {
    match spec.kind {
        SymmetryKind::None => vec![*pose],
        SymmetryKind::Discrete => spec
            .transforms
            .iter()
            .map(|g| pose.compose(&Pose::from_rotation(*g)))
            .collect(),
        SymmetryKind::Continuous => {
            let n = n_samples.max(1);
            (0..n)
                .map(|k| {
                    let g = axis_angle(&spec.axis, TAU * k as f64 / n as f64);
                    pose.compose(&Pose::from_rotation(g))
                })
                .collect()
        }
    }
}

/// Smallest ADD between `est` and any orbit pose of `gt`.
pub fn symmetry_min_add(
    est: &Pose,
    gt: &Pose,
    mesh: &Mesh,
    spec: &SymmetrySpec,
    n_samples: usize,
) -> f64 {
    orbit_poses(gt, spec, n_samples)
        .iter()
        .map(|g| add_metric(est, g, mesh))
        .fold(f64::INFINITY, f64::min)
}
