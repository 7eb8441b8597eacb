use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix6, SymmetricEigen, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, Mat3, Pose, Vec3};
use crate::par;

const MAX_HALVINGS: usize = 10;
const UPDATE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Association radius as a fraction of the mesh diameter.
    pub corr_dist_frac: f64,
    /// Neighbors used for scene normal estimation.
    pub normal_neighbors: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iters: 30,
            corr_dist_frac: 0.1,
            normal_neighbors: 10,
        }
    }
}

fn build_tree(points: &[Vec3]) -> ImmutableKdTree<f64, 3> {
    let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
    ImmutableKdTree::new_from_slice(&raw)
}

/// PCA normals from `k` nearest neighbors (the point itself included),
/// oriented toward the camera origin.
pub fn estimate_normals(cloud: &[Vec3], k: usize) -> Result<Vec<Vec3>> {
    if k < 3 || k > cloud.len() {
        return Err(Error::InvalidConfig(format!(
            "normal estimation needs 3 <= k <= {} (got k = {k})",
            cloud.len()
        )));
    }
    let tree = build_tree(cloud);
    let k_nz = NonZero::new(k).expect("k >= 3");
    Ok(par::map_slice(cloud, |p| {
        let nn = tree.nearest_n::<SquaredEuclidean>(&[p.x, p.y, p.z], k_nz);
        let pts: Vec<Vec3> = nn.iter().map(|n| cloud[n.item as usize]).collect();
        let mean: Vec3 = pts.iter().sum::<Vec3>() / pts.len() as f64;
        let mut cov = Mat3::zeros();
        for q in &pts {
            cov += (q - mean) * (q - mean).transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let i = eig.eigenvalues.imin();
        let n: Vec3 = eig.eigenvectors.column(i).into();
        let n = n.normalize();
        if n.dot(p) > 0.0 {
            -n
        } else {
            n
        }
    }))
}

struct Scene<'a> {
    points: &'a [Vec3],
    normals: &'a [Vec3],
    tree: ImmutableKdTree<f64, 3>,
    corr_dist: f64,
}

impl Scene<'_> {
    /// Nearest scene point within the association radius.
    fn associate(&self, q: &Vec3) -> Option<usize> {
        let nn = self.tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]);
        (nn.distance <= self.corr_dist * self.corr_dist).then_some(nn.item as usize)
    }

    /// Mean over model points of the squared point-to-plane distance,
    /// truncated at the association radius.
    fn objective(&self, model: &[Vec3], pose: &Pose) -> (f64, usize) {
        let cap = self.corr_dist * self.corr_dist;
        let terms = par::map_slice(model, |m| {
            let q = pose.transform(m);
            match self.associate(&q) {
                Some(j) => {
                    let d = (q - self.points[j]).dot(&self.normals[j]);
                    ((d * d).min(cap), 1)
                }
                None => (cap, 0),
            }
        });
        let (sum, count) = terms
            .iter()
            .fold((0.0, 0usize), |(s, c), &(t, k)| (s + t, c + k));
        (sum / model.len() as f64, count)
    }
}

/// The truncated point-to-plane objective minimized by
/// [`icp_point_to_plane`], or `None` when no model point associates.
pub fn point_to_plane_residual(
    model: &[Vec3],
    scene: &[Vec3],
    normals: &[Vec3],
    pose: &Pose,
    corr_dist: f64,
) -> Option<f64> {
    if model.is_empty() || scene.is_empty() {
        return None;
    }
    let s = Scene {
        points: scene,
        normals,
        tree: build_tree(scene),
        corr_dist,
    };
    let (obj, count) = s.objective(model, pose);
    (count > 0).then_some(obj)
}

/// Point-to-plane ICP aligning `model` (object frame) to `scene` (camera
/// frame). Each iteration solves the linearized problem on the current
/// associations and accepts the step, halved as needed, only if the
/// truncated objective decreases.
pub fn icp_point_to_plane(
    model: &[Vec3],
    scene: &[Vec3],
    normals: &[Vec3],
    init: &Pose,
    max_iters: usize,
    corr_dist: f64,
) -> Result<Pose> {
    if normals.len() != scene.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scene points but {} normals",
            scene.len(),
            normals.len()
        )));
    }
    if !(corr_dist > 0.0) {
        return Err(Error::InvalidConfig("correspondence distance must be positive".into()));
    }
    if model.is_empty() || scene.is_empty() {
        return Err(Error::NoAssociations);
    }
    let s = Scene {
        points: scene,
        normals,
        tree: build_tree(scene),
        corr_dist,
    };
    let mut pose = *init;
    let (mut obj, count) = s.objective(model, &pose);
    if count == 0 {
        return Err(Error::NoAssociations);
    }
    for _ in 0..max_iters {
        let rows = par::map_slice(model, |m| {
            let q = pose.transform(m);
            s.associate(&q).map(|j| {
                let n = normals[j];
                let c = q.cross(&n);
                (Vector6::new(c.x, c.y, c.z, n.x, n.y, n.z), (q - scene[j]).dot(&n))
            })
        });
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (j, r) in rows.into_iter().flatten() {
            h += j * j.transpose();
            g += j * r;
        }
        let Some(delta) = h.cholesky().map(|c| c.solve(&(-g))) else {
            break;
        };
        if delta.norm() < UPDATE_TOL {
            break;
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let d = delta * scale;
            let upd = Pose {
                rotation: exp_so3(&Vec3::new(d[0], d[1], d[2])),
                translation: Vec3::new(d[3], d[4], d[5]),
            };
            let trial = upd.compose(&pose);
            let (o, _) = s.objective(model, &trial);
            if o < obj {
                pose = trial;
                obj = o;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(pose)
}
