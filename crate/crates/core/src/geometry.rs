//! Meshes, rigid transforms, the pinhole camera, the NOCS coordinate mapping
//! and the continuous 6D rotation parameterization.
//!
//! Poses map model coordinates into camera coordinates: `p = R * m + t`.
//! Pixel coordinates are continuous with pixel `(i, j)` centered at
//! `(i + 0.5, j + 0.5)`.

use std::ops::Mul;

use nalgebra::{Matrix3, Point2, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ROTATION_TOL: f64 = 1e-9;

/// Triangle mesh in model units.
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    diameter: f64,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::InvalidMesh("mesh has no faces".into()));
        }
        let n = vertices.len();
        if let Some(bad) = faces.iter().flatten().find(|&&i| i >= n) {
            return Err(Error::InvalidMesh(format!(
                "face index {bad} out of range for {n} vertices"
            )));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh("non-finite vertex".into()));
        }
        let diameter = max_pairwise_distance(&vertices);
        if diameter <= 0.0 {
            return Err(Error::InvalidMesh("zero diameter".into()));
        }
        Ok(Self {
            vertices,
            faces,
            diameter,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Maximum pairwise vertex distance, computed once at construction.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn centroid(&self) -> Vec3 {
        self.vertices.iter().sum::<Vec3>() / self.vertices.len() as f64
    }

    /// Same geometry with the face list permuted.
    pub fn with_faces(&self, faces: Vec<[usize; 3]>) -> Result<Self> {
        Mesh::new(self.vertices.clone(), faces)
    }

    /// Applies a rigid model-frame transform to every vertex.
    pub fn transformed(&self, pose: &Pose) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| pose.transform(v)).collect(),
            faces: self.faces.clone(),
            diameter: self.diameter,
        }
    }
}

fn max_pairwise_distance(vertices: &[Vec3]) -> f64 {
    let pairwise = |i: usize| -> f64 {
        let a = &vertices[i];
        vertices[i + 1..]
            .iter()
            .map(|b| (a - b).norm_squared())
            .fold(0.0, f64::max)
    };
    let n = vertices.len();
    let best = crate::par::map_range(n, pairwise)
        .into_iter()
        .fold(0.0, f64::max);
    best.sqrt()
}

/// Rigid transform in SE(3). Serializes as `{"R": [9 row-major], "t": [3]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseJson", into = "PoseJson")]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validates `R^T R = I` and `det R = +1`.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if ortho > ROTATION_TOL {
            return Err(Error::InvalidPose(format!("R^T R deviates from I by {ortho:e}")));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidPose(format!("det(R) = {det}")));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidPose("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_rotation(rotation: Mat3) -> Self {
        Self {
            rotation,
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        Self::from_rotation(axis_angle(axis, angle))
    }

    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Camera center expressed in the model frame, `-R^T t`.
    pub fn camera_center_in_model(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Geodesic angle between two rotations, radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }

    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Re-orthonormalizes the rotation (SVD projection onto SO(3)).
    pub fn orthonormalized(&self) -> Pose {
        Pose {
            rotation: project_to_so3(&self.rotation),
            translation: self.translation,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PoseJson {
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

impl From<Pose> for PoseJson {
    fn from(p: Pose) -> Self {
        let m = &p.rotation;
        PoseJson {
            r: [
                m[(0, 0)], m[(0, 1)], m[(0, 2)],
                m[(1, 0)], m[(1, 1)], m[(1, 2)],
                m[(2, 0)], m[(2, 1)], m[(2, 2)],
            ],
            t: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

/// Files written by other tools carry rounding noise, so rotations within
/// 1e-6 of SO(3) are accepted and projected.
impl TryFrom<PoseJson> for Pose {
    type Error = Error;

    fn try_from(j: PoseJson) -> Result<Self> {
        let rotation = Mat3::from_row_slice(&j.r);
        let translation = Vec3::from(j.t);
        match Pose::new(rotation, translation) {
            Ok(p) => Ok(p),
            Err(_) => {
                let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
                if ortho < 1e-6 && rotation.determinant() > 0.0 {
                    Ok(Pose { rotation, translation }.orthonormalized())
                } else {
                    Pose::new(rotation, translation)
                }
            }
        }
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;

    fn mul(self, rhs: &'a Pose) -> Pose {
        self.compose(rhs)
    }
}

pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
}

/// Rotation exponential map of a rotation vector.
pub fn exp_so3(w: &Vec3) -> Mat3 {
    Rotation3::new(*w).into_inner()
}

pub fn rotation_angle(r: &Mat3) -> f64 {
    ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn project_to_so3(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera(format!(
                "image size {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Projects a camera-space point; `None` when `z <= 0`.
    pub fn project(&self, p: &Vec3) -> Option<Point2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Point2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Camera ray through a pixel coordinate, with unit depth.
    pub fn ray(&self, pixel: &Point2<f64>) -> Vec3 {
        Vec3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }
}

/// Projects a model point into the image. Returns the pixel and camera depth.
pub fn project_point(k: &CameraIntrinsics, pose: &Pose, v: &Vec3) -> Result<(Point2<f64>, f64)> {
    let p = pose.transform(v);
    match k.project(&p) {
        Some(px) => Ok((px, p.z)),
        None => Err(Error::BehindCamera { z: p.z }),
    }
}

/// Camera-space point at `depth` along the ray through `pixel`.
pub fn backproject(k: &CameraIntrinsics, pixel: &Point2<f64>, depth: f64) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth(depth));
    }
    Ok(k.ray(pixel) * depth)
}

/// Per-axis extent of a model, used by the NOCS mapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NocsBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl NocsBounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for axis in 0..3 {
            if !(max[axis] > min[axis]) {
                return Err(Error::FlatModel { axis });
            }
        }
        Ok(Self { min, max })
    }

    pub fn extent(&self) -> Vec3 {
        Vec3::new(
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        )
    }

    pub fn min_corner(&self) -> Vec3 {
        Vec3::from(self.min)
    }

    pub fn max_corner(&self) -> Vec3 {
        Vec3::from(self.max)
    }

    pub fn center(&self) -> Vec3 {
        (self.min_corner() + self.max_corner()) * 0.5
    }

    pub fn project(&self, v: &Vec3) -> Vec3 {
        nocs_project(v, self)
    }

    pub fn unproject(&self, c: &Vec3) -> Vec3 {
        nocs_unproject(c, self)
    }
}

pub fn compute_nocs_bounds(mesh: &Mesh) -> Result<NocsBounds> {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for v in mesh.vertices() {
        for d in 0..3 {
            min[d] = min[d].min(v[d]);
            max[d] = max[d].max(v[d]);
        }
    }
    NocsBounds::new(min, max)
}

pub fn nocs_project(v: &Vec3, bounds: &NocsBounds) -> Vec3 {
    Vec3::from_fn(|d, _| (v[d] - bounds.min[d]) / (bounds.max[d] - bounds.min[d]))
}

pub fn nocs_unproject(c: &Vec3, bounds: &NocsBounds) -> Vec3 {
    Vec3::from_fn(|d, _| bounds.min[d] + c[d] * (bounds.max[d] - bounds.min[d]))
}

/// First two columns of a rotation matrix, `[a1; a2]`, not necessarily
/// orthonormal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rot6D(pub [f64; 6]);

const ROT6D_PARALLEL_TOL: f64 = 1e-12;

impl Rot6D {
    pub fn identity() -> Self {
        Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    pub fn first(&self) -> Vec3 {
        Vec3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn second(&self) -> Vec3 {
        Vec3::new(self.0[3], self.0[4], self.0[5])
    }

    pub fn to_rotation(&self) -> Result<Mat3> {
        rot6d_to_rotation(self)
    }
}

/// Gram-Schmidt of the two stored columns, third column by cross product.
pub fn rot6d_to_rotation(r: &Rot6D) -> Result<Mat3> {
    let (a1, a2) = (r.first(), r.second());
    let n1 = a1.norm();
    if n1 < ROT6D_PARALLEL_TOL || a1.cross(&a2).norm() < ROT6D_PARALLEL_TOL * n1 {
        return Err(Error::DegenerateRotation);
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if n2 < ROT6D_PARALLEL_TOL {
        return Err(Error::DegenerateRotation);
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Mat3::from_columns(&[b1, b2, b3]))
}

pub fn rotation_to_rot6d(r: &Mat3) -> Rot6D {
    Rot6D([
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ])
}

/// Partial derivatives of [`rot6d_to_rotation`] with respect to each of the
/// six parameters.
pub fn rot6d_jacobian(r: &Rot6D) -> Result<[Mat3; 6]> {
    let (a1, a2) = (r.first(), r.second());
    let n1 = a1.norm();
    if n1 < ROT6D_PARALLEL_TOL {
        return Err(Error::DegenerateRotation);
    }
    let b1 = a1 / n1;
    let dot = b1.dot(&a2);
    let u2 = a2 - b1 * dot;
    let n2 = u2.norm();
    if n2 < ROT6D_PARALLEL_TOL {
        return Err(Error::DegenerateRotation);
    }
    let b2 = u2 / n2;
    let p1 = (Mat3::identity() - b1 * b1.transpose()) / n1;
    let p2 = (Mat3::identity() - b2 * b2.transpose()) / n2;

    let mut out = [Mat3::zeros(); 6];
    for (k, slot) in out.iter_mut().enumerate() {
        let unit = Vec3::from_fn(|i, _| if i == k % 3 { 1.0 } else { 0.0 });
        let (da1, da2) = if k < 3 {
            (unit, Vec3::zeros())
        } else {
            (Vec3::zeros(), unit)
        };
        let db1 = p1 * da1;
        let du2 = da2 - b1 * (db1.dot(&a2) + b1.dot(&da2)) - db1 * dot;
        let db2 = p2 * du2;
        let db3 = db1.cross(&b2) + b1.cross(&db2);
        *slot = Mat3::from_columns(&[db1, db2, db3]);
    }
    Ok(out)
}
