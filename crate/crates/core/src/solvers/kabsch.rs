use nalgebra::Matrix3;

use super::ransac::{self, canonical_order};
use super::{RansacConfig, SolveResult};
use crate::correspondence::Correspondences3D;
use crate::error::{Error, Result};
use crate::geometry::{Mat3, Pose, Vec3};

/// Least-squares rigid transform with `observed ≈ R * model + t`.
pub fn kabsch(pairs: &Correspondences3D) -> Result<Pose> {
    kabsch_points(&pairs.model, &pairs.observed)
}

pub(crate) fn kabsch_points(src: &[Vec3], dst: &[Vec3]) -> Result<Pose> {
    let n = src.len();
    if n < 3 || dst.len() != n {
        return Err(Error::InsufficientCorrespondences {
            found: n.min(dst.len()),
            needed: 3,
        });
    }
    let inv = 1.0 / n as f64;
    let cs: Vec3 = src.iter().sum::<Vec3>() * inv;
    let cd: Vec3 = dst.iter().sum::<Vec3>() * inv;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] < 1e-12 * sv[0] {
        return Err(Error::Degenerate("collinear or coincident points".into()));
    }
    let u = svd.u.expect("requested");
    let v = svd.v_t.expect("requested").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let r = v * fix * u.transpose();
    Ok(Pose {
        rotation: r,
        translation: cd - r * cs,
    })
}

/// Kabsch inside RANSAC with 3-point minimal samples.
pub fn kabsch_ransac(pairs: &Correspondences3D, cfg: &RansacConfig) -> Result<SolveResult> {
    let n = pairs.len();
    if n < 3 {
        return Err(Error::InsufficientCorrespondences { found: n, needed: 3 });
    }
    let keys: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let (o, m) = (pairs.observed[i], pairs.model[i]);
            vec![o.x, o.y, o.z, m.x, m.y, m.z]
        })
        .collect();
    let order = canonical_order(&keys);
    let sorted = pairs.subset(&order);

    let fit = |idx: &[usize]| -> Option<Pose> {
        let s = sorted.subset(idx);
        // Reject near-collinear samples relative to their own extent.
        let (a, b, c) = (s.model[0], s.model[1], s.model[2]);
        let area = (b - a).cross(&(c - a)).norm();
        let scale = (b - a).norm_squared().max((c - a).norm_squared());
        if !(area > 1e-6 * scale) {
            return None;
        }
        kabsch(&s).ok()
    };
    let residual =
        |p: &Pose, i: usize| -> f64 { (p.transform(&sorted.model[i]) - sorted.observed[i]).norm() };
    let refit = |idx: &[usize]| kabsch(&sorted.subset(idx)).ok();

    let out = ransac::run(n, 3, cfg, fit, residual, refit)?;
    let mut inliers: Vec<usize> = out.inliers.iter().map(|&i| order[i]).collect();
    inliers.sort_unstable();
    Ok(SolveResult {
        pose: out.model,
        inlier_indices: inliers,
        mean_inlier_residual: out.mean_residual,
        iterations: out.iterations,
    })
}
