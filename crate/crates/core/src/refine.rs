//! Multi-view pose refinement by render-and-compare.
//!
//! Frames observe one object from calibrated rig poses. A pose update
//! `T_Δ` applied in a reference camera is optimized so that hard renders
//! in every frame agree with the predicted NOCS maps under a robust loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correspondence::NocsMap;
use crate::error::{Error, Result};
use crate::geometry::{rot6d_jacobian, rot6d_to_rotation, CameraIntrinsics, Mesh, NocsBounds, Pose, Rot6D, Vec3};
use crate::metrics::iou;
use crate::par;
use crate::raster::{render_camera, RenderOutput};
use crate::symmetry::SymmetrySpec;

/// Number of optimized parameters: 6D rotation then translation.
pub const N_PARAMS: usize = 9;
pub type Params = [f64; N_PARAMS];

/// Parameters of the identity update.
pub fn identity_params() -> Params {
    let r = Rot6D::identity().0;
    [r[0], r[1], r[2], r[3], r[4], r[5], 0.0, 0.0, 0.0]
}

/// Shape `alpha` and scale `c` of the general robust loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustParams {
    pub alpha: f64,
    pub scale: f64,
}

impl RobustParams {
    /// `alpha = 1`, `c = 0.05 · diameter`.
    pub fn for_diameter(diameter: f64) -> Self {
        Self {
            alpha: 1.0,
            scale: 0.05 * diameter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig("robust scale must be positive and alpha finite".into()));
        }
        Ok(())
    }

    pub fn rho(&self, x: f64) -> f64 {
        let z = (x / self.scale).powi(2);
        let a = self.alpha;
        if a == 2.0 {
            0.5 * z
        } else if a == 0.0 {
            (0.5 * z).ln_1p()
        } else {
            let b = (a - 2.0).abs();
            b / a * ((z / b + 1.0).powf(0.5 * a) - 1.0)
        }
    }

    /// `dρ/dx`.
    pub fn rho_derivative(&self, x: f64) -> f64 {
        let c2 = self.scale * self.scale;
        let z = x * x / c2;
        let a = self.alpha;
        if a == 2.0 {
            x / c2
        } else if a == 0.0 {
            2.0 * x / (x * x + 2.0 * c2)
        } else {
            let b = (a - 2.0).abs();
            x / c2 * (z / b + 1.0).powf(0.5 * a - 1.0)
        }
    }
}

/// Robust distance between the model points behind two NOCS values.
pub fn pixel_loss(pred: &Vec3, rendered: &Vec3, bounds: &NocsBounds, robust: &RobustParams) -> f64 {
    robust.rho((bounds.unproject(pred) - bounds.unproject(rendered)).norm())
}

/// Predicted mask and continuous NOCS values for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPrediction {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub nocs: Vec<Vec3>,
}

impl ViewPrediction {
    pub fn from_map(map: &NocsMap) -> Self {
        Self {
            width: map.width,
            height: map.height,
            mask: map.mask.clone(),
            nocs: (0..map.len()).map(|i| map.decoded(i)).collect(),
        }
    }

    pub fn from_render(r: &RenderOutput) -> Self {
        Self {
            width: r.width,
            height: r.height,
            mask: r.mask.clone(),
            nocs: r.nocs.iter().map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewFrame {
    pub prediction: ViewPrediction,
    /// Camera imaging the prediction; its size must match.
    pub camera: CameraIntrinsics,
    /// World-to-camera transform.
    pub rig_pose: Pose,
}

/// Frames with their per-frame object pose hypotheses (camera coordinates).
/// A missing hypothesis marks a frame whose solver failed.
#[derive(Debug, Clone)]
pub struct MultiViewSet {
    pub mesh: Mesh,
    pub bounds: NocsBounds,
    pub symmetry: SymmetrySpec,
    pub frames: Vec<ViewFrame>,
    pub hypotheses: Vec<Option<Pose>>,
}

impl MultiViewSet {
    pub fn new(
        mesh: Mesh,
        bounds: NocsBounds,
        symmetry: SymmetrySpec,
        frames: Vec<ViewFrame>,
        hypotheses: Vec<Option<Pose>>,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidConfig("a view set needs at least one frame".into()));
        }
        if frames.len() != hypotheses.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} frames but {} hypotheses",
                frames.len(),
                hypotheses.len()
            )));
        }
        for f in &frames {
            let p = &f.prediction;
            if (p.width, p.height) != (f.camera.width, f.camera.height)
                || p.mask.len() != p.width * p.height
                || p.nocs.len() != p.mask.len()
            {
                return Err(Error::ShapeMismatch("prediction does not match its camera".into()));
            }
        }
        Ok(Self {
            mesh,
            bounds,
            symmetry,
            frames,
            hypotheses,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Transform from the `reference` camera to camera `f`.
    pub fn relative(&self, reference: usize, f: usize) -> Pose {
        self.frames[f]
            .rig_pose
            .compose(&self.frames[reference].rig_pose.inverse())
    }
}

struct FrameEval {
    loss: f64,
    iou: f64,
}

/// Renders the symmetry-adjusted `pose` in frame `f` and scores it.
fn eval_frame(set: &MultiViewSet, f: usize, pose: &Pose, robust: &RobustParams) -> FrameEval {
    let frame = &set.frames[f];
    let pred = &frame.prediction;
    let (adjusted, _) = set.symmetry.disambiguate(pose);
    let Ok(r) = render_camera(&set.mesh, &set.bounds, &adjusted, &frame.camera) else {
        return FrameEval { loss: 0.0, iou: 0.0 };
    };
    let mut loss = 0.0;
    for i in 0..r.mask.len() {
        if pred.mask[i] && r.mask[i] {
            let c = &r.nocs[i];
            loss += pixel_loss(&pred.nocs[i], &Vec3::new(c[0], c[1], c[2]), &set.bounds, robust);
        }
    }
    FrameEval {
        loss,
        iou: iou(&pred.mask, &r.mask),
    }
}

/// Sum over frames of the robust loss on mutually foreground pixels, with
/// the object at `Ξ_ref→f · T_Δ · T_pr` (symmetry-adjusted per frame).
pub fn total_objective(
    set: &MultiViewSet,
    reference: usize,
    t_delta: &Pose,
    t_pr: &Pose,
    robust: &RobustParams,
) -> f64 {
    let obj = t_delta.compose(t_pr);
    par::map_range(set.len(), |f| {
        eval_frame(set, f, &set.relative(reference, f).compose(&obj), robust).loss
    })
    .into_iter()
    .sum()
}

/// Picks the frame whose hypothesis, re-projected into every frame, has the
/// lowest mean IOU-scaled loss over the frames it overlaps. Ties go to the
/// lowest index.
pub fn select_reference_frame(set: &MultiViewSet, robust: &RobustParams) -> Result<usize> {
    let scores: Vec<Option<f64>> = (0..set.len())
        .map(|c| {
            let t = set.hypotheses[c]?;
            let evals = par::map_range(set.len(), |f| {
                eval_frame(set, f, &set.relative(c, f).compose(&t), robust)
            });
            let used: Vec<f64> = evals
                .iter()
                .filter(|e| e.iou > 0.0)
                .map(|e| e.loss / e.iou)
                .collect();
            (!used.is_empty()).then(|| used.iter().sum::<f64>() / used.len() as f64)
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i).ok_or(Error::AllCandidatesDegenerate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    Analytic,
    FiniteDiff,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    pub gradient_mode: GradientMode,
    pub step_size: f64,
    pub max_iters: usize,
    pub convergence_tol: f64,
    pub fd_step: f64,
    pub max_halvings: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            gradient_mode: GradientMode::Analytic,
            step_size: 1e-2,
            max_iters: 100,
            convergence_tol: 1e-6,
            fd_step: 1e-8,
            max_halvings: 8,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || self.max_iters == 0 || !(self.fd_step > 0.0) {
            return Err(Error::InvalidConfig(
                "refiner needs step_size > 0, max_iters >= 1 and fd_step > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Objective as a function of the update parameters. The rotation part of
/// `T_Δ` pivots about the object center seen from the reference camera and
/// the translation part is in units of the mesh diameter.
pub struct Problem<'a> {
    pub set: &'a MultiViewSet,
    pub reference: usize,
    pub t_pr: Pose,
    pub robust: RobustParams,
    center: Vec3,
    diameter: f64,
}

impl<'a> Problem<'a> {
    pub fn new(set: &'a MultiViewSet, reference: usize, t_pr: Pose, robust: RobustParams) -> Self {
        Self {
            set,
            reference,
            center: t_pr.transform(&set.bounds.center()),
            diameter: set.mesh.diameter(),
            t_pr,
            robust,
        }
    }

    pub fn delta(&self, p: &Params) -> Result<Pose> {
        let r = rot6d_to_rotation(&Rot6D([p[0], p[1], p[2], p[3], p[4], p[5]]))?;
        let tau = Vec3::new(p[6], p[7], p[8]);
        Ok(Pose {
            rotation: r,
            translation: self.center - r * self.center + tau * self.diameter,
        })
    }

    /// `+inf` for a degenerate rotation parameterization.
    pub fn objective(&self, p: &Params) -> f64 {
        match self.delta(p) {
            Ok(d) => total_objective(self.set, self.reference, &d, &self.t_pr, &self.robust),
            Err(_) => f64::INFINITY,
        }
    }

    pub fn gradient_fd(&self, p: &Params, h: f64) -> Params {
        let mut g = [0.0; N_PARAMS];
        for (k, gk) in g.iter_mut().enumerate() {
            let (mut plus, mut minus) = (*p, *p);
            plus[k] += h;
            minus[k] -= h;
            *gk = (self.objective(&plus) - self.objective(&minus)) / (2.0 * h);
        }
        g
    }

    /// Chain rule with the pixel set and symmetry transform held fixed:
    /// under each foreground pixel the rendered surface point slides within
    /// its visible face as the pose changes, which is exact away from
    /// occlusion boundaries.
    pub fn gradient_analytic(&self, p: &Params) -> Result<Params> {
        let delta = self.delta(p)?;
        let jac = rot6d_jacobian(&Rot6D([p[0], p[1], p[2], p[3], p[4], p[5]]))?;
        let set = self.set;
        let obj = delta.compose(&self.t_pr);
        let per_frame = par::map_range(set.len(), |f| -> Params {
            let mut g = [0.0; N_PARAMS];
            let frame = &set.frames[f];
            let xi = set.relative(self.reference, f);
            let (adjusted, sym) = set.symmetry.disambiguate(&xi.compose(&obj));
            let Ok(r) = render_camera(&set.mesh, &set.bounds, &adjusted, &frame.camera) else {
                return g;
            };
            let pre = self.t_pr.compose(&sym);
            let verts = set.mesh.vertices();
            for i in 0..r.mask.len() {
                if !(frame.prediction.mask[i] && r.mask[i]) {
                    continue;
                }
                let Some(face) = r.face[i] else { continue };
                let c = Vec3::new(r.nocs[i][0], r.nocs[i][1], r.nocs[i][2]);
                let m = set.bounds.unproject(&c);
                let diff = m - set.bounds.unproject(&frame.prediction.nocs[i]);
                let x = diff.norm();
                if x == 0.0 {
                    continue;
                }
                let dl_dm = diff * (self.robust.rho_derivative(x) / x);
                // The surface point seen through a fixed pixel slides along
                // the face plane when the object moves by dX in camera f:
                // dm = -A_R^T (I - X n^T / (n.X)) dX.
                let [a, b, cc] = set.mesh.faces()[face as usize];
                let n = adjusted.rotation * (verts[b] - verts[a]).cross(&(verts[cc] - verts[a]));
                let xf = adjusted.transform(&m);
                let nx = n.dot(&xf);
                if nx.abs() < 1e-12 * n.norm() * xf.norm() {
                    continue;
                }
                let v = adjusted.rotation * dl_dm;
                let dl_dxf = -(v - n * (xf.dot(&v) / nx));
                let y = pre.transform(&m);
                let dl_dxref = xi.rotation.transpose() * dl_dxf;
                let arm = y - self.center;
                for (kk, jk) in jac.iter().enumerate() {
                    g[kk] += dl_dxref.dot(&(jk * arm));
                }
                for a in 0..3 {
                    g[6 + a] += dl_dxref[a] * self.diameter;
                }
            }
            g
        });
        let mut g = [0.0; N_PARAMS];
        for fg in per_frame {
            for (a, b) in g.iter_mut().zip(fg) {
                *a += b;
            }
        }
        Ok(g)
    }

    pub fn gradient(&self, p: &Params, cfg: &RefinerConfig) -> Result<Params> {
        match cfg.gradient_mode {
            GradientMode::Analytic => self.gradient_analytic(p),
            GradientMode::FiniteDiff => Ok(self.gradient_fd(p, cfg.fd_step)),
        }
    }
}

/// Objective gradient with respect to the update parameters at `params`.
pub fn gradient(
    set: &MultiViewSet,
    reference: usize,
    params: &Params,
    t_pr: &Pose,
    robust: &RobustParams,
    cfg: &RefinerConfig,
) -> Result<Params> {
    Problem::new(set, reference, *t_pr, *robust).gradient(params, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub reference: usize,
    pub initial_pose: Pose,
    /// Refined object pose in the reference camera.
    pub final_pose: Pose,
    /// Objective before the first iteration and after each accepted step.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub stop_reason: String,
}

impl RefineReport {
    pub fn initial_objective(&self) -> f64 {
        self.objective[0]
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective.last().expect("non-empty")
    }
}

/// Selects the reference frame and runs monotone normalized-gradient
/// descent with backtracking from the identity update.
pub fn refine(set: &MultiViewSet, cfg: &RefinerConfig, robust: &RobustParams) -> Result<RefineReport> {
    cfg.validate()?;
    robust.validate()?;
    let reference = select_reference_frame(set, robust)?;
    let t_pr = set.hypotheses[reference].expect("selected frames have hypotheses");
    refine_from(set, reference, &t_pr, cfg, robust)
}

/// Descent with a fixed reference and starting hypothesis.
pub fn refine_from(
    set: &MultiViewSet,
    reference: usize,
    t_pr: &Pose,
    cfg: &RefinerConfig,
    robust: &RobustParams,
) -> Result<RefineReport> {
    cfg.validate()?;
    let problem = Problem::new(set, reference, *t_pr, *robust);
    let mut params = identity_params();
    let mut obj = problem.objective(&params);
    let mut history = vec![obj];
    let mut step = cfg.step_size;
    let mut iterations = 0;
    let mut stop = "max_iters";
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let g = problem.gradient(&params, cfg)?;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            stop = "zero_gradient";
            break;
        }
        let mut accepted = None;
        for halving in 0..=cfg.max_halvings {
            let mut trial = params;
            for (t, gk) in trial.iter_mut().zip(&g) {
                *t -= step * gk / norm;
            }
            let o = problem.objective(&trial);
            if o < obj {
                accepted = Some((trial, o, halving));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, o, halvings)) = accepted else {
            stop = "line_search";
            break;
        };
        let decrease = obj - o;
        params = trial;
        obj = o;
        history.push(obj);
        if halvings == 0 {
            step *= 2.0;
        }
        if decrease < cfg.convergence_tol {
            stop = "converged";
            break;
        }
    }
    let final_pose = problem.delta(&params)?.compose(t_pr);
    Ok(RefineReport {
        reference,
        initial_pose: *t_pr,
        final_pose,
        objective: history,
        iterations,
        stop_reason: stop.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Closest,
    Random,
    Furthest,
}

impl std::str::FromStr for Sampling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closest" => Ok(Self::Closest),
            "random" => Ok(Self::Random),
            "furthest" => Ok(Self::Furthest),
            other => Err(Error::InvalidConfig(format!("unknown sampling strategy '{other}'"))),
        }
    }
}

/// Optical axis of a world-to-camera pose, in world coordinates.
pub fn viewing_direction(rig: &Pose) -> Vec3 {
    rig.rotation.transpose() * Vec3::z()
}

fn view_angle(a: &Vec3, b: &Vec3) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos()
}

/// Chooses `n` views starting from index 0. `closest` takes the views with
/// the smallest angle to the first; `furthest` adds, one at a time, the view
/// maximizing its smallest angle to those already chosen; `random` draws
/// the rest uniformly. Ties go to the lower index.
pub fn sample_views(rig_poses: &[Pose], n: usize, strategy: Sampling, seed: u64) -> Result<Vec<usize>> {
    if n > rig_poses.len() {
        return Err(Error::InvalidConfig(format!(
            "asked for {n} views but only {} are available",
            rig_poses.len()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let dirs: Vec<Vec3> = rig_poses.iter().map(viewing_direction).collect();
    let mut chosen = vec![0];
    let mut rest: Vec<usize> = (1..rig_poses.len()).collect();
    match strategy {
        Sampling::Closest => {
            rest.sort_by(|&a, &b| view_angle(&dirs[0], &dirs[a]).total_cmp(&view_angle(&dirs[0], &dirs[b])));
            chosen.extend(rest.into_iter().take(n - 1));
        }
        Sampling::Random => {
            rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            chosen.extend(rest.into_iter().take(n - 1));
        }
        Sampling::Furthest => {
            while chosen.len() < n {
                let score = |i: usize| {
                    chosen
                        .iter()
                        .map(|&c| view_angle(&dirs[c], &dirs[i]))
                        .fold(f64::INFINITY, f64::min)
                };
                let (pos, _) = rest.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (pos, &i)| {
                    let s = score(i);
                    if s > acc.1 {
                        (pos, s)
                    } else {
                        acc
                    }
                });
                chosen.push(rest.remove(pos));
            }
        }
    }
    Ok(chosen)
}
