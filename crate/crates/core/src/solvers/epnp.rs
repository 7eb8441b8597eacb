//! EPnP: model points are written as barycentric combinations of control
//! points whose camera coordinates span the null space of a linear system.

use nalgebra::{DMatrix, DVector, Matrix6, SymmetricEigen, Vector6};

use super::kabsch::kabsch_points;
use super::ransac::{self, canonical_order};
use super::{RansacConfig, SolveResult};
use crate::correspondence::Correspondences2D;
use crate::error::{Error, Result};
use crate::geometry::{exp_so3, skew, CameraIntrinsics, Mat3, Pose, Vec3};

const GAUSS_NEWTON_BETA_ITERS: usize = 10;
const REFINE_ITERS: usize = 10;
/// Eigenvalue ratio below which the model points are treated as planar.
const PLANAR_RATIO: f64 = 1e-8;
/// Relative rigid-fit residual above which a candidate is rejected.
const MAX_RIGID_RESIDUAL: f64 = 0.25;

fn reproj_error(k: &CameraIntrinsics, pose: &Pose, m: &Vec3, px: &nalgebra::Point2<f64>) -> f64 {
    let p = pose.transform(m);
    if p.z <= 1e-12 {
        return f64::INFINITY;
    }
    let du = k.fx * p.x / p.z + k.cx - px.x;
    let dv = k.fy * p.y / p.z + k.cy - px.y;
    (du * du + dv * dv).sqrt()
}

/// Per-pair reprojection error in pixels; points behind the camera score
/// infinity.
pub fn reprojection_errors(pairs: &Correspondences2D, k: &CameraIntrinsics, pose: &Pose) -> Vec<f64> {
    pairs
        .model
        .iter()
        .zip(&pairs.image)
        .map(|(m, px)| reproj_error(k, pose, m, px))
        .collect()
}

fn mean_error(pairs: &Correspondences2D, k: &CameraIntrinsics, pose: &Pose) -> f64 {
    reprojection_errors(pairs, k, pose).iter().sum::<f64>() / pairs.len() as f64
}

struct Setup {
    ctrl: Vec<Vec3>,
    alphas: Vec<Vec<f64>>,
    /// Null-space basis, smallest eigenvalue first; each has 3·ctrl entries.
    kernel: Vec<DVector<f64>>,
}

fn setup(pairs: &Correspondences2D, k: &CameraIntrinsics) -> Result<Setup> {
    let n = pairs.len();
    let c0: Vec3 = pairs.model.iter().sum::<Vec3>() / n as f64;
    let mut cov = Mat3::zeros();
    for m in &pairs.model {
        cov += (m - c0) * (m - c0).transpose();
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lam: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    if !(lam[0] > 0.0) || lam[1] < PLANAR_RATIO * lam[0] {
        return Err(Error::Degenerate("model points are collinear or coincident".into()));
    }
    let planar = lam[2] < PLANAR_RATIO * lam[0];
    let nc = if planar { 3 } else { 4 };
    let mut ctrl = vec![c0];
    let mut axes = Vec::new();
    for j in 0..nc - 1 {
        let e: Vec3 = eig.eigenvectors.column(order[j]).into();
        let s = lam[j].sqrt();
        ctrl.push(c0 + e * s);
        axes.push(e / s);
    }
    let alphas: Vec<Vec<f64>> = pairs
        .model
        .iter()
        .map(|m| {
            let d = m - c0;
            let rest: Vec<f64> = axes.iter().map(|a| a.dot(&d)).collect();
            let mut a = vec![1.0 - rest.iter().sum::<f64>()];
            a.extend(rest);
            a
        })
        .collect();

    let dim = 3 * nc;
    let mut mtm = DMatrix::<f64>::zeros(dim, dim);
    let mut row_u = DVector::<f64>::zeros(dim);
    let mut row_v = DVector::<f64>::zeros(dim);
    for (a, px) in alphas.iter().zip(&pairs.image) {
        let x = (px.x - k.cx) / k.fx;
        let y = (px.y - k.cy) / k.fy;
        row_u.fill(0.0);
        row_v.fill(0.0);
        for j in 0..nc {
            row_u[3 * j] = a[j];
            row_u[3 * j + 2] = -a[j] * x;
            row_v[3 * j + 1] = a[j];
            row_v[3 * j + 2] = -a[j] * y;
        }
        mtm.ger(1.0, &row_u, &row_u, 1.0);
        mtm.ger(1.0, &row_v, &row_v, 1.0);
    }
    let eig = SymmetricEigen::new(mtm);
    let mut idx: Vec<usize> = (0..dim).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let kernel = idx[..nc]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();
    Ok(Setup { ctrl, alphas, kernel })
}

fn ctrl_point(v: &DVector<f64>, j: usize) -> Vec3 {
    Vec3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2])
}

/// Camera-frame control points for a combination of kernel vectors.
fn combine(kernel: &[DVector<f64>], betas: &[f64], nc: usize) -> Vec<Vec3> {
    (0..nc)
        .map(|j| {
            kernel
                .iter()
                .zip(betas)
                .map(|(v, b)| ctrl_point(v, j) * *b)
                .sum()
        })
        .collect()
}

fn ctrl_pairs(nc: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for a in 0..nc {
        for b in a + 1..nc {
            out.push((a, b));
        }
    }
    out
}

/// Refines betas so camera-frame control-point distances match the model.
fn gauss_newton_betas(s: &Setup, betas: &mut [f64]) {
    let nc = s.ctrl.len();
    let pairs = ctrl_pairs(nc);
    let rho: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| (s.ctrl[a] - s.ctrl[b]).norm_squared())
        .collect();
    let nk = betas.len();
    let dv: Vec<Vec<Vec3>> = pairs
        .iter()
        .map(|&(a, b)| {
            s.kernel[..nk]
                .iter()
                .map(|v| ctrl_point(v, a) - ctrl_point(v, b))
                .collect()
        })
        .collect();
    let cost = |betas: &[f64]| -> f64 {
        dv.iter()
            .zip(&rho)
            .map(|(d, r)| {
                let diff: Vec3 = d.iter().zip(betas).map(|(x, b)| x * *b).sum();
                (diff.norm_squared() - r).powi(2)
            })
            .sum()
    };
    let mut current = cost(betas);
    for _ in 0..GAUSS_NEWTON_BETA_ITERS {
        let mut jac = DMatrix::<f64>::zeros(pairs.len(), nk);
        let mut res = DVector::<f64>::zeros(pairs.len());
        for (row, (d, r)) in dv.iter().zip(&rho).enumerate() {
            let diff: Vec3 = d.iter().zip(betas.iter()).map(|(x, b)| x * *b).sum();
            res[row] = diff.norm_squared() - r;
            for m in 0..nk {
                jac[(row, m)] = 2.0 * diff.dot(&d[m]);
            }
        }
        let Ok(step) = jac.clone().svd(true, true).solve(&(-res), 1e-12) else {
            break;
        };
        let trial: Vec<f64> = betas.iter().zip(step.iter()).map(|(b, s)| b + s).collect();
        let c = cost(&trial);
        if !(c < current) {
            break;
        }
        betas.copy_from_slice(&trial);
        current = c;
    }
}

/// Linearized solve for a subset of the beta products, ordered as
/// `(i, l)` pairs with `i <= l`.
fn solve_products(s: &Setup, products: &[(usize, usize)]) -> Option<Vec<f64>> {
    let nc = s.ctrl.len();
    let pairs = ctrl_pairs(nc);
    let mut l = DMatrix::<f64>::zeros(pairs.len(), products.len());
    let mut rho = DVector::<f64>::zeros(pairs.len());
    for (row, &(a, b)) in pairs.iter().enumerate() {
        rho[row] = (s.ctrl[a] - s.ctrl[b]).norm_squared();
        for (col, &(i, j)) in products.iter().enumerate() {
            let di = ctrl_point(&s.kernel[i], a) - ctrl_point(&s.kernel[i], b);
            let dj = ctrl_point(&s.kernel[j], a) - ctrl_point(&s.kernel[j], b);
            l[(row, col)] = if i == j { di.dot(&dj) } else { 2.0 * di.dot(&dj) };
        }
    }
    let x = l.svd(true, true).solve(&rho, 1e-12).ok()?;
    Some(x.iter().copied().collect())
}

/// Initial beta estimates, one per approximation scheme.
fn initial_betas(s: &Setup) -> Vec<Vec<f64>> {
    let nk = s.kernel.len();
    let mut out = Vec::new();

    // Products of the first beta with every other one.
    let first: Vec<(usize, usize)> = (0..nk).map(|j| (0, j)).collect();
    if let Some(b) = solve_products(s, &first) {
        let mut betas = vec![0.0; nk];
        let sgn = if b[0] < 0.0 { -1.0 } else { 1.0 };
        betas[0] = (sgn * b[0]).sqrt();
        if betas[0] > 0.0 {
            for j in 1..nk {
                betas[j] = sgn * b[j] / betas[0];
            }
        }
        out.push(betas);
    }

    // Two kernel vectors: b11, b12, b22.
    if let Some(b) = solve_products(s, &[(0, 0), (0, 1), (1, 1)]) {
        let mut betas = vec![0.0; nk];
        if b[0] < 0.0 {
            betas[0] = (-b[0]).sqrt();
            betas[1] = if b[2] < 0.0 { (-b[2]).sqrt() } else { 0.0 };
        } else {
            betas[0] = b[0].sqrt();
            betas[1] = if b[2] > 0.0 { b[2].sqrt() } else { 0.0 };
        }
        if b[1] < 0.0 {
            betas[0] = -betas[0];
        }
        out.push(betas);
    }

    // Three kernel vectors: b11, b12, b22, b13, b23.
    if nk >= 4 {
        if let Some(b) = solve_products(s, &[(0, 0), (0, 1), (1, 1), (0, 2), (1, 2)]) {
            let mut betas = vec![0.0; nk];
            if b[0] < 0.0 {
                betas[0] = (-b[0]).sqrt();
                betas[1] = if b[2] < 0.0 { (-b[2]).sqrt() } else { 0.0 };
            } else {
                betas[0] = b[0].sqrt();
                betas[1] = if b[2] > 0.0 { b[2].sqrt() } else { 0.0 };
            }
            if b[1] < 0.0 {
                betas[0] = -betas[0];
            }
            if betas[0] != 0.0 {
                betas[2] = b[3] / betas[0];
            }
            out.push(betas);
        }
    }
    out
}

/// Pose implied by a beta vector, or `None` when the implied camera points
/// are not a rigid copy of the model.
fn pose_from_betas(pairs: &Correspondences2D, s: &Setup, betas: &[f64]) -> Option<Pose> {
    let nc = s.ctrl.len();
    let cc = combine(&s.kernel, betas, nc);
    let mut pc: Vec<Vec3> = s
        .alphas
        .iter()
        .map(|a| a.iter().zip(&cc).map(|(w, c)| c * *w).sum())
        .collect();
    let behind = pc.iter().filter(|p| p.z < 0.0).count();
    if 2 * behind > pc.len() {
        pc.iter_mut().for_each(|p| *p = -*p);
    }
    let pose = kabsch_points(&pairs.model, &pc).ok()?;
    let mean: Vec3 = pc.iter().sum::<Vec3>() / pc.len() as f64;
    let spread: f64 = pc.iter().map(|p| (p - mean).norm_squared()).sum();
    let resid: f64 = pairs
        .model
        .iter()
        .zip(&pc)
        .map(|(m, p)| (pose.transform(m) - p).norm_squared())
        .sum();
    if !(spread > 0.0) || (resid / spread).sqrt() > MAX_RIGID_RESIDUAL {
        return None;
    }
    Some(pose)
}

/// Every candidate considered by [`epnp`] with its mean reprojection error
/// in pixels, in evaluation order.
pub fn epnp_candidates(pairs: &Correspondences2D, k: &CameraIntrinsics) -> Result<Vec<(Pose, f64)>> {
    if pairs.len() < 4 {
        return Err(Error::InsufficientCorrespondences {
            found: pairs.len(),
            needed: 4,
        });
    }
    let s = setup(pairs, k)?;
    let mut out = Vec::new();
    for mut betas in initial_betas(&s) {
        gauss_newton_betas(&s, &mut betas);
        if let Some(pose) = pose_from_betas(pairs, &s, &betas) {
            let err = mean_error(pairs, k, &pose);
            if err.is_finite() {
                out.push((pose, err));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Degenerate(
            "no EPnP candidate is consistent with a rigid pose in front of the camera".into(),
        ));
    }
    Ok(out)
}

/// EPnP pose with the smallest mean reprojection error among the candidates.
pub fn epnp(pairs: &Correspondences2D, k: &CameraIntrinsics) -> Result<Pose> {
    let cands = epnp_candidates(pairs, k)?;
    let best = cands
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(a.0.cmp(&b.0)))
        .map(|(_, c)| c.0)
        .expect("non-empty");
    Ok(best)
}

/// Gauss-Newton on the summed squared reprojection error with a
/// left-multiplied SE(3) update. Only decreasing steps are taken.
pub fn refine_reprojection(pairs: &Correspondences2D, k: &CameraIntrinsics, init: &Pose) -> Pose {
    let sq_cost = |p: &Pose| -> f64 {
        reprojection_errors(pairs, k, p)
            .iter()
            .map(|e| e * e)
            .sum()
    };
    let mut pose = *init;
    let mut cost = sq_cost(&pose);
    if !cost.is_finite() {
        return pose;
    }
    for _ in 0..REFINE_ITERS {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (m, px) in pairs.model.iter().zip(&pairs.image) {
            let p = pose.transform(m);
            let iz = 1.0 / p.z;
            let r = [
                k.fx * p.x * iz + k.cx - px.x,
                k.fy * p.y * iz + k.cy - px.y,
            ];
            // d(pixel)/d(camera point)
            let dp = [
                Vec3::new(k.fx * iz, 0.0, -k.fx * p.x * iz * iz),
                Vec3::new(0.0, k.fy * iz, -k.fy * p.y * iz * iz),
            ];
            let neg_skew = -skew(&p);
            for row in 0..2 {
                let rot = neg_skew.transpose() * dp[row];
                let j = Vector6::new(rot.x, rot.y, rot.z, dp[row].x, dp[row].y, dp[row].z);
                h += j * j.transpose();
                g += j * r[row];
            }
        }
        let Some(delta) = h.cholesky().map(|c| c.solve(&(-g))) else {
            break;
        };
        let w = Vec3::new(delta[0], delta[1], delta[2]);
        let v = Vec3::new(delta[3], delta[4], delta[5]);
        let upd = Pose {
            rotation: exp_so3(&w),
            translation: v,
        };
        let trial = upd.compose(&pose).orthonormalized();
        let c = sq_cost(&trial);
        if !(c < cost) {
            break;
        }
        pose = trial;
        cost = c;
        if delta.norm() < 1e-12 {
            break;
        }
    }
    pose
}

/// EPnP inside RANSAC with 4-point samples, then a refit and reprojection
/// refinement on the inlier set.
pub fn pnp_ransac(
    pairs: &Correspondences2D,
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<SolveResult> {
    let n = pairs.len();
    if n < 4 {
        return Err(Error::InsufficientCorrespondences { found: n, needed: 4 });
    }
    let keys: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let (p, m) = (pairs.image[i], pairs.model[i]);
            vec![p.x, p.y, m.x, m.y, m.z]
        })
        .collect();
    let order = canonical_order(&keys);
    let sorted = pairs.subset(&order);

    let fit = |idx: &[usize]| epnp(&sorted.subset(idx), k).ok();
    let residual = |p: &Pose, i: usize| reproj_error(k, p, &sorted.model[i], &sorted.image[i]);
    let refit = |idx: &[usize]| {
        let s = sorted.subset(idx);
        epnp(&s, k).ok().map(|p| refine_reprojection(&s, k, &p))
    };
    let out = ransac::run(n, 4, cfg, fit, residual, refit)?;
    let mut inliers: Vec<usize> = out.inliers.iter().map(|&i| order[i]).collect();
    inliers.sort_unstable();
    Ok(SolveResult {
        pose: out.model,
        inlier_indices: inliers,
        mean_inlier_residual: out.mean_residual,
        iterations: out.iterations,
    })
}
