//! Scene generation, the per-frame estimation pipeline, grouped multi-view
//! refinement, evaluation and debug rendering. The CLI is a thin layer over
//! the `cmd_*` functions here.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{add_gaussian_foreground, add_random_holes, DepthMap, HoleConfig};
use crate::correspondence::{
    extract_2d3d, extract_3d3d, extract_patch_depth, extract_patch_map, jitter_bbox,
    simulate_prediction, BoundingBox, NocsMap, NoiseConfig, PatchTransform, PATCH_SIZE,
};
use crate::error::{Error, Result};
use crate::geometry::{axis_angle, compute_nocs_bounds, CameraIntrinsics, Mat3, Mesh, NocsBounds, Pose, Vec3};
use crate::io;
use crate::metrics::{
    add_metric, correspondence_error, correspondence_error_symmetric, dice, iou, write_report,
    EvalRecord, SummaryRow, ADD_THRESHOLD_FRAC,
};
use crate::par;
use crate::raster::{render_camera, render_depth_16bit};
use crate::refine::{
    refine, sample_views, MultiViewSet, RefineReport, RefinerConfig, RobustParams, Sampling,
    ViewFrame, ViewPrediction,
};
use crate::shapes;
use crate::solvers::{
    estimate_normals, icp_point_to_plane, kabsch_ransac, pnp_ransac, IcpConfig, RansacConfig,
    KABSCH_THRESHOLD_FRAC, PNP_THRESHOLD_PX,
};
use crate::symmetry::{symmetry_min_add, SymmetryKind, SymmetrySpec, ORBIT_SAMPLES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// PnP on the predicted map.
    #[serde(rename = "rgb")]
    Rgb,
    /// Kabsch on maps predicted with depth available to the predictor.
    #[serde(rename = "rgbd")]
    Rgbd,
    /// RGB-predicted map backprojected with measured depth, then Kabsch.
    #[serde(rename = "rgb+d-kabsch")]
    RgbDKabsch,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Rgb => "rgb",
            Mode::Rgbd => "rgbd",
            Mode::RgbDKabsch => "rgb+d-kabsch",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Mode::Rgb),
            "rgbd" => Ok(Mode::Rgbd),
            "rgb+d-kabsch" => Ok(Mode::RgbDKabsch),
            other => Err(Error::InvalidConfig(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BboxSource {
    Gt,
    Jitter,
}

impl FromStr for BboxSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(BboxSource::Gt),
            "jitter" => Ok(BboxSource::Jitter),
            other => Err(Error::InvalidConfig(format!("unknown bbox source '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// `builtin:<name>` or a path to an OBJ/PLY file.
    pub mesh: String,
    /// Longest extent of builtin meshes.
    pub size: f64,
    pub frames: usize,
    pub camera: CameraIntrinsics,
    /// Camera distance range as multiples of the mesh diameter.
    pub distance: [f64; 2],
    /// Depth PNG resolution as a fraction of the diameter.
    pub depth_scale_frac: f64,
    pub symmetry: Option<SymmetrySpec>,
    pub object_id: Option<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            mesh: "builtin:blob".into(),
            size: 100.0,
            frames: 20,
            camera: CameraIntrinsics {
                fx: 300.0,
                fy: 300.0,
                cx: 128.0,
                cy: 128.0,
                width: 256,
                height: 256,
            },
            distance: [2.0, 6.0],
            depth_scale_frac: 1e-3,
            symmetry: None,
            object_id: None,
        }
    }
}

/// RANSAC settings shared by both solvers; thresholds are per solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacSettings {
    pub max_iters: usize,
    pub min_inlier_count: usize,
    pub confidence: f64,
    pub pnp_threshold_px: f64,
    /// Kabsch threshold as a fraction of the diameter.
    pub kabsch_threshold_frac: f64,
}

impl Default for RansacSettings {
    fn default() -> Self {
        let p = RansacConfig::pnp();
        Self {
            max_iters: p.max_iters,
            min_inlier_count: p.min_inlier_count,
            confidence: p.confidence,
            pnp_threshold_px: PNP_THRESHOLD_PX,
            kabsch_threshold_frac: KABSCH_THRESHOLD_FRAC,
        }
    }
}

impl RansacSettings {
    pub fn for_pnp(&self, seed: u64) -> RansacConfig {
        RansacConfig {
            max_iters: self.max_iters,
            inlier_threshold: self.pnp_threshold_px,
            min_inlier_count: self.min_inlier_count,
            confidence: self.confidence,
            seed,
        }
    }

    pub fn for_kabsch(&self, diameter: f64, seed: u64) -> RansacConfig {
        RansacConfig {
            inlier_threshold: self.kabsch_threshold_frac * diameter,
            ..self.for_pnp(seed)
        }
    }
}

/// Corruption of measured depth before backprojection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthAugment {
    /// Foreground Gaussian noise as a fraction of the diameter.
    pub gaussian_sigma_frac: f64,
    pub holes: Option<HoleConfig>,
}

impl Default for DepthAugment {
    fn default() -> Self {
        Self {
            gaussian_sigma_frac: 0.0,
            holes: None,
        }
    }
}

/// Replaces estimated hypotheses by ground truth perturbed by a fixed
/// rotation angle about a random axis and a translation of fixed length in
/// a random direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub rotation_deg: f64,
    pub translation_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub mode: Mode,
    pub noise: NoiseConfig,
    /// Noise of the depth-aware predictor in `rgbd` mode; `noise` if unset.
    pub depth_noise: Option<NoiseConfig>,
    pub depth_augment: DepthAugment,
    pub ransac: RansacSettings,
    pub use_icp: bool,
    pub icp: IcpConfig,
    pub refiner: RefinerConfig,
    pub robust: Option<RobustParams>,
    pub bbox: BboxSource,
    pub jitter_frac: f64,
    pub views: usize,
    pub sampling: Sampling,
    pub init_perturbation: Option<Perturbation>,
    pub add_threshold_frac: f64,
    pub orbit_samples: usize,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Rgb,
            noise: NoiseConfig::default(),
            depth_noise: None,
            depth_augment: DepthAugment::default(),
            ransac: RansacSettings::default(),
            use_icp: false,
            icp: IcpConfig::default(),
            refiner: RefinerConfig::default(),
            robust: None,
            bbox: BboxSource::Gt,
            jitter_frac: 0.1,
            views: 4,
            sampling: Sampling::Closest,
            init_perturbation: None,
            add_threshold_frac: ADD_THRESHOLD_FRAC,
            orbit_samples: ORBIT_SAMPLES,
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if let Some(n) = &self.depth_noise {
            n.validate()?;
        }
        self.refiner.validate()?;
        if let Some(r) = &self.robust {
            r.validate()?;
        }
        if self.views == 0 {
            return Err(Error::InvalidConfig("views must be at least 1".into()));
        }
        if !(0.0..0.5).contains(&self.jitter_frac) {
            return Err(Error::InvalidConfig("jitter_frac must lie in [0, 0.5)".into()));
        }
        if !(self.add_threshold_frac > 0.0) || self.orbit_samples == 0 {
            return Err(Error::InvalidConfig("add threshold and orbit samples must be positive".into()));
        }
        if !(self.depth_augment.gaussian_sigma_frac >= 0.0) {
            return Err(Error::InvalidConfig("depth noise must be non-negative".into()));
        }
        let d = self.synth.distance;
        if !(d[0] > 0.0 && d[1] >= d[0]) || !(self.synth.depth_scale_frac > 0.0) {
            return Err(Error::InvalidConfig("invalid synth distance range or depth scale".into()));
        }
        self.synth.camera.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Independent stream for `(seed, purpose, index)`.
pub fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    let mut z = seed
        ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SEED_SCENE: u64 = 1;
const SEED_JITTER: u64 = 2;
const SEED_NOISE: u64 = 3;
const SEED_DEPTH_NOISE: u64 = 4;
const SEED_RANSAC: u64 = 5;
const SEED_GROUP: u64 = 6;
const SEED_PERTURB: u64 = 7;
const SEED_DEPTH_AUG: u64 = 8;

/// World-to-camera pose of a camera at `eye` looking at `target`, rotated
/// by `roll` about its optical axis.
pub fn look_at(eye: &Vec3, target: &Vec3, roll: f64) -> Pose {
    let z = (target - eye).normalize();
    let up = if z.y.abs() < 0.9 { Vec3::y() } else { Vec3::x() };
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    let r = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let r = axis_angle(&Vec3::z(), roll) * r;
    Pose {
        rotation: r,
        translation: -(r * eye),
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Ground truth perturbed by `rotation_deg` about a random axis through the
/// object center and a random translation of `translation_frac · diameter`.
pub fn perturb_pose(gt: &Pose, center_model: &Vec3, diameter: f64, p: &Perturbation, seed: u64) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = random_unit(&mut rng);
    let dir = random_unit(&mut rng);
    let r = axis_angle(&axis, p.rotation_deg.to_radians());
    let c = gt.transform(center_model);
    let rot = Pose {
        rotation: r,
        translation: c - r * c,
    };
    Pose::from_translation(dir * p.translation_frac * diameter)
        .compose(&rot)
        .compose(gt)
}

/// One view of the object with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub id: String,
    pub gt_pose: Pose,
    pub rig_pose: Pose,
    pub bbox: BoundingBox,
    /// Ground-truth map rendered at the symmetry-adjusted pose.
    pub gt_map: NocsMap,
    /// Depth in model units, 0 for background.
    pub depth: Vec<f64>,
    /// Externally supplied prediction (full image) replacing the simulator.
    pub prediction: Option<NocsMap>,
    pub depth_prediction: Option<NocsMap>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub object_id: String,
    pub mesh: Mesh,
    pub bounds: NocsBounds,
    pub symmetry: SymmetrySpec,
    pub camera: CameraIntrinsics,
    pub depth_scale: f64,
    pub frames: Vec<FrameData>,
}

impl Scene {
    /// Renders `cfg.frames` views from cameras uniform on a view sphere
    /// around a randomly oriented object.
    pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<Self> {
        let (mesh, default_id) = load_mesh_source(&cfg.mesh, cfg.size)?;
        Self::synthesize_with(mesh, cfg, seed, cfg.object_id.clone().unwrap_or(default_id))
    }

    pub fn synthesize_with(mesh: Mesh, cfg: &SynthConfig, seed: u64, object_id: String) -> Result<Self> {
        cfg.camera.validate()?;
        let bounds = compute_nocs_bounds(&mesh)?;
        let symmetry = cfg.symmetry.clone().unwrap_or_else(SymmetrySpec::none);
        let diameter = mesh.diameter();
        let depth_scale = cfg.depth_scale_frac * diameter;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_SCENE, 0));
        let object = Pose::from_rotation(axis_angle(&random_unit(&mut rng), rng.random_range(0.0..std::f64::consts::PI)));
        let center = object.transform(&bounds.center());
        let views: Vec<Pose> = (0..cfg.frames)
            .map(|_| {
                let dir = random_unit(&mut rng);
                let dist = rng.random_range(cfg.distance[0]..=cfg.distance[1]) * diameter;
                let roll = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                look_at(&(center + dir * dist), &center, roll)
            })
            .collect();
        let frames = par::map_range(views.len(), |i| -> Result<FrameData> {
            let rig = views[i];
            let gt = rig.compose(&object);
            let (adjusted, _) = symmetry.disambiguate(&gt);
            let r = render_camera(&mesh, &bounds, &adjusted, &cfg.camera)?;
            let counts = render_depth_16bit(&r, depth_scale)?;
            let gt_map = NocsMap::from_render(&r);
            let bbox = BoundingBox::from_mask(&gt_map.mask, gt_map.width)
                .unwrap_or(BoundingBox::new(0.0, 0.0, 1.0, 1.0));
            Ok(FrameData {
                id: format!("{i:06}"),
                gt_pose: gt,
                rig_pose: rig,
                bbox,
                gt_map,
                depth: counts.iter().map(|&c| c as f64 * depth_scale).collect(),
                prediction: None,
                depth_prediction: None,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            object_id,
            mesh,
            bounds,
            symmetry,
            camera: cfg.camera,
            depth_scale,
            frames,
        })
    }

    pub fn frame_index(&self, id: &str) -> Result<usize> {
        self.frames
            .iter()
            .position(|f| f.id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("no frame with id '{id}'")))
    }

    /// Writes mesh, symmetry, per-frame images and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<SceneManifest> {
        std::fs::create_dir_all(dir.join("frames"))?;
        io::write_ply(&self.mesh, &dir.join("mesh.ply"))?;
        io::write_json(&dir.join("symmetry.json"), &self.symmetry)?;
        let (w, h) = (self.camera.width, self.camera.height);
        let mut frames = Vec::with_capacity(self.frames.len());
        for f in &self.frames {
            let nocs = format!("frames/{}_nocs.png", f.id);
            let mask = format!("frames/{}_mask.png", f.id);
            let depth = format!("frames/{}_depth.png", f.id);
            io::write_nocs_png(&f.gt_map, &dir.join(&nocs))?;
            io::write_mask_png(&f.gt_map.mask, w, h, &dir.join(&mask))?;
            let counts: Vec<u16> = f
                .depth
                .iter()
                .map(|&d| (d / self.depth_scale).round() as u16)
                .collect();
            io::write_depth_png(&counts, w, h, self.depth_scale, &dir.join(&depth))?;
            frames.push(FrameEntry {
                id: f.id.clone(),
                gt_pose: f.gt_pose,
                rig_pose: f.rig_pose,
                bbox: f.bbox,
                nocs,
                mask,
                depth,
                prediction: None,
                depth_prediction: None,
            });
        }
        let manifest = SceneManifest {
            object_id: self.object_id.clone(),
            mesh: "mesh.ply".into(),
            symmetry: Some("symmetry.json".into()),
            camera: self.camera,
            units_scale: 1.0,
            depth_scale: self.depth_scale,
            frames,
        };
        io::write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    /// Loads a manifest and everything it references.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let m: SceneManifest = io::read_json(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        m.validate(base)?;
        let mut mesh = io::read_mesh(&base.join(&m.mesh))?;
        if m.units_scale != 1.0 {
            mesh = Mesh::new(
                mesh.vertices().iter().map(|v| v * m.units_scale).collect(),
                mesh.faces().to_vec(),
            )?;
        }
        let bounds = compute_nocs_bounds(&mesh)?;
        let symmetry = match &m.symmetry {
            Some(p) => io::read_json(&base.join(p))?,
            None => SymmetrySpec::none(),
        };
        let size = (m.camera.width, m.camera.height);
        let load_map = |p: &MapPaths| -> Result<NocsMap> {
            let map = io::read_nocs_map(&base.join(&p.nocs), &base.join(&p.mask))?;
            if (map.width, map.height) != size {
                return Err(Error::ShapeMismatch(format!("{} does not match the camera", p.nocs)));
            }
            Ok(map)
        };
        let mut frames = Vec::with_capacity(m.frames.len());
        for f in &m.frames {
            let gt_map = load_map(&MapPaths {
                nocs: f.nocs.clone(),
                mask: f.mask.clone(),
            })?;
            let (depth, dw, dh) = io::read_depth_png(&base.join(&f.depth))?;
            if (dw, dh) != size {
                return Err(Error::ShapeMismatch(format!("{} does not match the camera", f.depth)));
            }
            frames.push(FrameData {
                id: f.id.clone(),
                gt_pose: f.gt_pose,
                rig_pose: f.rig_pose,
                bbox: f.bbox,
                gt_map,
                depth,
                prediction: f.prediction.as_ref().map(&load_map).transpose()?,
                depth_prediction: f.depth_prediction.as_ref().map(&load_map).transpose()?,
            });
        }
        Ok(Self {
            object_id: m.object_id,
            mesh,
            bounds,
            symmetry,
            camera: m.camera,
            depth_scale: m.depth_scale,
            frames,
        })
    }
}

/// `builtin:<name>` or a mesh file path; returns the mesh and a default id.
pub fn load_mesh_source(source: &str, size: f64) -> Result<(Mesh, String)> {
    if let Some(name) = source.strip_prefix("builtin:") {
        return Ok((shapes::builtin(name, size)?, name.to_string()));
    }
    let path = Path::new(source);
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "object".into());
    Ok((io::read_mesh(path)?, id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPaths {
    pub nocs: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: String,
    pub gt_pose: Pose,
    pub rig_pose: Pose,
    pub bbox: BoundingBox,
    pub nocs: String,
    pub mask: String,
    pub depth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<MapPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_prediction: Option<MapPaths>,
}

/// Scene description; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub object_id: String,
    pub mesh: String,
    #[serde(default)]
    pub symmetry: Option<String>,
    pub camera: CameraIntrinsics,
    /// Multiplier applied to mesh coordinates on load.
    #[serde(default = "one")]
    pub units_scale: f64,
    /// Model units per depth count used when rendering.
    pub depth_scale: f64,
    pub frames: Vec<FrameEntry>,
}

fn one() -> f64 {
    1.0
}

impl SceneManifest {
    pub fn validate(&self, base: &Path) -> Result<()> {
        self.camera.validate()?;
        if !(self.units_scale > 0.0) || !(self.depth_scale > 0.0) {
            return Err(Error::InvalidConfig("units_scale and depth_scale must be positive".into()));
        }
        let mut ids = HashSet::new();
        for f in &self.frames {
            if !ids.insert(f.id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate frame id '{}'", f.id)));
            }
        }
        let mut paths = vec![self.mesh.clone()];
        paths.extend(self.symmetry.clone());
        for f in &self.frames {
            paths.extend([f.nocs.clone(), f.mask.clone(), f.depth.clone()]);
            for p in f.prediction.iter().chain(&f.depth_prediction) {
                paths.extend([p.nocs.clone(), p.mask.clone()]);
            }
        }
        for p in paths {
            if !base.join(&p).is_file() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("manifest references missing file {p}"),
                )));
            }
        }
        Ok(())
    }
}

/// Intermediate products of one frame's estimate, reused by refinement.
#[derive(Debug, Clone)]
pub struct FrameEstimate {
    pub record: EvalRecord,
    pub pose: Option<Pose>,
    pub prediction: NocsMap,
    pub patch: PatchTransform,
    pub bbox: BoundingBox,
}

fn depth_observation(scene: &Scene, f: &FrameData, idx: usize, cfg: &PipelineConfig) -> Result<Vec<f64>> {
    let aug = &cfg.depth_augment;
    if aug.gaussian_sigma_frac == 0.0 && aug.holes.is_none() {
        return Ok(f.depth.clone());
    }
    let mut d = DepthMap::from_values(scene.camera.width, scene.camera.height, f.depth.clone())?;
    let seed = derive_seed(cfg.seed, SEED_DEPTH_AUG, idx as u64);
    if aug.gaussian_sigma_frac > 0.0 {
        d = add_gaussian_foreground(&d, &f.gt_map.mask, aug.gaussian_sigma_frac * scene.mesh.diameter(), seed)?;
    }
    if let Some(h) = &aug.holes {
        d = add_random_holes(&d, &HoleConfig { seed, ..*h })?;
    }
    Ok(d.values
        .iter()
        .zip(&d.holes)
        .map(|(&v, &h)| if h { 0.0 } else { v })
        .collect())
}

fn solve_frame(
    scene: &Scene,
    f: &FrameData,
    idx: usize,
    cfg: &PipelineConfig,
    bbox: &BoundingBox,
    gt_patch: &NocsMap,
) -> Result<(NocsMap, Pose, usize, usize)> {
    let seed = |purpose| derive_seed(cfg.seed, purpose, idx as u64);
    let predict = |loaded: &Option<NocsMap>, noise: &NoiseConfig, purpose| -> Result<NocsMap> {
        match loaded {
            Some(m) => Ok(extract_patch_map(m, bbox, PATCH_SIZE)?.0),
            None => simulate_prediction(gt_patch, &noise.with_seed(seed(purpose))),
        }
    };
    let k = &scene.camera;
    let diameter = scene.mesh.diameter();
    match cfg.mode {
        Mode::Rgb => {
            let pred = predict(&f.prediction, &cfg.noise, SEED_NOISE)?;
            let corr = extract_2d3d(&pred, &scene.bounds, bbox)?;
            let sol = pnp_ransac(&corr, k, &cfg.ransac.for_pnp(seed(SEED_RANSAC)))?;
            Ok((pred, sol.pose, sol.inlier_indices.len(), corr.len()))
        }
        Mode::Rgbd | Mode::RgbDKabsch => {
            let pred = if cfg.mode == Mode::Rgbd {
                let noise = cfg.depth_noise.unwrap_or(cfg.noise);
                predict(&f.depth_prediction, &noise, SEED_DEPTH_NOISE)?
            } else {
                predict(&f.prediction, &cfg.noise, SEED_NOISE)?
            };
            let depth = depth_observation(scene, f, idx, cfg)?;
            let (dpatch, _) = extract_patch_depth(&depth, k.width, k.height, bbox, PATCH_SIZE)?;
            let corr = extract_3d3d(&pred, &dpatch, k, &scene.bounds, bbox)?;
            let sol = kabsch_ransac(&corr, &cfg.ransac.for_kabsch(diameter, seed(SEED_RANSAC)))?;
            let mut pose = sol.pose;
            if cfg.use_icp {
                let cloud: Vec<Vec3> = sol.inlier_indices.iter().map(|&i| corr.observed[i]).collect();
                if cloud.len() >= cfg.icp.normal_neighbors {
                    let normals = estimate_normals(&cloud, cfg.icp.normal_neighbors)?;
                    let model = visible_vertices(scene, &pose, 0.01 * diameter)?;
                    if let Ok(p) = icp_point_to_plane(
                        &model,
                        &cloud,
                        &normals,
                        &pose,
                        cfg.icp.max_iters,
                        cfg.icp.corr_dist_frac * diameter,
                    ) {
                        pose = p;
                    }
                }
            }
            Ok((pred, pose, sol.inlier_indices.len(), corr.len()))
        }
    }
}

/// Mesh vertices unoccluded at `pose`: those projecting onto the rendered
/// foreground no further than `slack` behind the rendered surface. Back
/// faces would otherwise pull the alignment toward the visible side.
fn visible_vertices(scene: &Scene, pose: &Pose, slack: f64) -> Result<Vec<Vec3>> {
    let k = &scene.camera;
    let r = render_camera(&scene.mesh, &scene.bounds, pose, k)?;
    Ok(scene
        .mesh
        .vertices()
        .iter()
        .filter(|v| {
            let x = pose.transform(v);
            let Some(uv) = k.project(&x) else { return false };
            let (u, v) = (uv.x.floor(), uv.y.floor());
            if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
                return false;
            }
            let i = v as usize * k.width + u as usize;
            r.mask[i] && x.z <= r.depth[i] + slack
        })
        .copied()
        .collect())
}

/// Runs bbox → patch → prediction → correspondences → solver for one frame.
/// Solver failures become failed records.
pub fn estimate_frame(scene: &Scene, idx: usize, cfg: &PipelineConfig) -> FrameEstimate {
    let f = &scene.frames[idx];
    let mode = cfg.mode.as_str();
    let failed = |why: String, pred: NocsMap, patch, bbox| FrameEstimate {
        record: EvalRecord::failed(&scene.object_id, &f.id, "estimate", mode, why),
        pose: None,
        prediction: pred,
        patch,
        bbox,
    };
    let k = &scene.camera;
    let bbox = match cfg.bbox {
        BboxSource::Gt => Ok(f.bbox),
        BboxSource::Jitter => jitter_bbox(
            &f.bbox,
            cfg.jitter_frac,
            k.width,
            k.height,
            derive_seed(cfg.seed, SEED_JITTER, idx as u64),
        ),
    };
    let patch_of = |b: &BoundingBox| PatchTransform::from_bbox(b, PATCH_SIZE);
    let empty = NocsMap::empty(PATCH_SIZE, PATCH_SIZE);
    let bbox = match bbox.and_then(|b| b.validate(k.width, k.height).map(|_| b)) {
        Ok(b) => b,
        Err(e) => return failed(e.to_string(), empty, patch_of(&f.bbox), f.bbox),
    };
    let (gt_patch, patch) = match extract_patch_map(&f.gt_map, &bbox, PATCH_SIZE) {
        Ok(x) => x,
        Err(e) => return failed(e.to_string(), empty, patch_of(&bbox), bbox),
    };
    let (pred, pose, inliers, n_corr) = match solve_frame(scene, f, idx, cfg, &bbox, &gt_patch) {
        Ok(x) => x,
        Err(e) => {
            let pred = match cfg.mode {
                Mode::Rgbd => None,
                _ => simulate_prediction(&gt_patch, &cfg.noise.with_seed(derive_seed(cfg.seed, SEED_NOISE, idx as u64))).ok(),
            };
            return failed(e.to_string(), pred.unwrap_or(empty), patch, bbox);
        }
    };
    let mut record = score_pose(scene, f, &pose, "estimate", mode, cfg);
    record.inliers = Some(inliers);
    record.correspondences = Some(n_corr);
    let crop = patch.crop_intrinsics(k);
    record.corr_err_median = if scene.symmetry.kind() == SymmetryKind::None {
        correspondence_error(&pred, &gt_patch, &scene.bounds).ok()
    } else {
        correspondence_error_symmetric(&pred, &scene.mesh, &scene.bounds, &f.gt_pose, &crop, &scene.symmetry, cfg.orbit_samples).ok()
    };
    record.dice = Some(dice(&pred.mask, &gt_patch.mask));
    record.iou = Some(iou(&pred.mask, &gt_patch.mask));
    FrameEstimate {
        record,
        pose: Some(pose),
        prediction: pred,
        patch,
        bbox,
    }
}

fn score_pose(scene: &Scene, f: &FrameData, pose: &Pose, stage: &str, mode: &str, cfg: &PipelineConfig) -> EvalRecord {
    let mut r = EvalRecord::failed(&scene.object_id, &f.id, stage, mode, String::new());
    r.success = true;
    r.failure = None;
    r.pose = Some(*pose);
    r.add = Some(add_metric(pose, &f.gt_pose, &scene.mesh));
    r.add_sym = Some(symmetry_min_add(pose, &f.gt_pose, &scene.mesh, &scene.symmetry, cfg.orbit_samples));
    r
}

/// Estimates every frame; records come back in frame order.
pub fn estimate_scene(scene: &Scene, cfg: &PipelineConfig) -> Vec<FrameEstimate> {
    par::map_range(scene.frames.len(), |i| estimate_frame(scene, i, cfg))
}

/// Non-overlapping groups of up to `views` frames. Each group starts at the
/// first unused frame and draws the rest from the unused frames with the
/// sampling strategy.
pub fn group_frames(scene: &Scene, views: usize, strategy: Sampling, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut unused: Vec<usize> = (0..scene.frames.len()).collect();
    let mut groups = Vec::new();
    while !unused.is_empty() {
        let rigs: Vec<Pose> = unused.iter().map(|&i| scene.frames[i].rig_pose).collect();
        let n = views.min(unused.len());
        let pick = sample_views(&rigs, n, strategy, derive_seed(seed, SEED_GROUP, groups.len() as u64))?;
        let mut group: Vec<usize> = pick.iter().map(|&p| unused[p]).collect();
        group.sort_unstable();
        unused.retain(|i| !group.contains(i));
        groups.push(group);
    }
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub frames: Vec<String>,
    pub reference_frame: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<RefineReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Builds the view set of a group from per-frame estimates. Hypotheses are
/// the estimates, or perturbed ground truth when configured.
pub fn build_view_set(scene: &Scene, group: &[usize], estimates: &[FrameEstimate], cfg: &PipelineConfig) -> Result<MultiViewSet> {
    let frames = group
        .iter()
        .map(|&i| {
            let e = &estimates[i];
            ViewFrame {
                prediction: ViewPrediction::from_map(&e.prediction),
                camera: e.patch.crop_intrinsics(&scene.camera),
                rig_pose: scene.frames[i].rig_pose,
            }
        })
        .collect();
    let hyps = group
        .iter()
        .map(|&i| match &cfg.init_perturbation {
            Some(p) => Some(perturb_pose(
                &scene.frames[i].gt_pose,
                &scene.bounds.center(),
                scene.mesh.diameter(),
                p,
                derive_seed(cfg.seed, SEED_PERTURB, i as u64),
            )),
            None => estimates[i].pose,
        })
        .collect();
    MultiViewSet::new(scene.mesh.clone(), scene.bounds, scene.symmetry.clone(), frames, hyps)
}

/// Output of grouped refinement: `initial` and `refined` records per frame
/// (frame order) plus one report per group.
#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub records: Vec<EvalRecord>,
    pub groups: Vec<GroupReport>,
}

pub fn refine_scene(scene: &Scene, cfg: &PipelineConfig) -> Result<RefineOutput> {
    let estimates = estimate_scene(scene, cfg);
    let groups = group_frames(scene, cfg.views, cfg.sampling, cfg.seed)?;
    let robust = cfg.robust.unwrap_or_else(|| RobustParams::for_diameter(scene.mesh.diameter()));
    let mode = cfg.mode.as_str();
    let n = scene.frames.len();
    let mut initial: Vec<Option<EvalRecord>> = vec![None; n];
    let mut refined: Vec<Option<EvalRecord>> = vec![None; n];
    let mut reports = Vec::new();
    for group in &groups {
        let ids: Vec<String> = group.iter().map(|&i| scene.frames[i].id.clone()).collect();
        let set = build_view_set(scene, group, &estimates, cfg)?;
        for (slot, &i) in group.iter().enumerate() {
            let f = &scene.frames[i];
            let mut r = match set.hypotheses[slot] {
                Some(p) => score_pose(scene, f, &p, "initial", mode, cfg),
                None => EvalRecord::failed(
                    &scene.object_id,
                    &f.id,
                    "initial",
                    mode,
                    estimates[i].record.failure.clone().unwrap_or_default(),
                ),
            };
            r.group = ids.clone();
            initial[i] = Some(r);
        }
        match refine(&set, &cfg.refiner, &robust) {
            Ok(rep) => {
                for (slot, &i) in group.iter().enumerate() {
                    let pose = set.relative(rep.reference, slot).compose(&rep.final_pose);
                    let mut r = score_pose(scene, &scene.frames[i], &pose, "refined", mode, cfg);
                    r.group = ids.clone();
                    refined[i] = Some(r);
                }
                reports.push(GroupReport {
                    frames: ids,
                    reference_frame: Some(scene.frames[group[rep.reference]].id.clone()),
                    report: Some(rep),
                    failure: None,
                });
            }
            Err(e) => {
                for &i in group {
                    let mut r = EvalRecord::failed(&scene.object_id, &scene.frames[i].id, "refined", mode, e.to_string());
                    r.group = ids.clone();
                    refined[i] = Some(r);
                }
                reports.push(GroupReport {
                    frames: ids,
                    reference_frame: None,
                    report: None,
                    failure: Some(e.to_string()),
                });
            }
        }
    }
    let records = initial
        .into_iter()
        .chain(refined)
        .map(|r| r.expect("every frame belongs to a group"))
        .collect();
    Ok(RefineOutput {
        records,
        groups: reports,
    })
}

/// Failure classes of the command layer, mapped to exit codes by the CLI.
#[derive(Debug)]
pub enum CommandError {
    Config(Error),
    Data(Error),
    NoFrameSucceeded,
}

impl fmt::Display for CommandError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CommandError::Config(e) => write!(f, "configuration error: {e}"),
            CommandError::Data(e) => write!(f, "data error: {e}"),
            CommandError::NoFrameSucceeded => f.write_str("no frame succeeded"),
        }
    }
}

impl std::error::Error for CommandError {}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => 2,
            CommandError::Data(_) => 3,
            CommandError::NoFrameSucceeded => 4,
        }
    }
}

fn config_err(e: Error) -> CommandError {
    CommandError::Config(e)
}

fn data_err(e: Error) -> CommandError {
    match e {
        Error::InvalidConfig(_) => CommandError::Config(e),
        other => CommandError::Data(other),
    }
}

type CmdResult<T> = std::result::Result<T, CommandError>;

/// Generates and writes a synthetic scene; returns the manifest path.
pub fn cmd_synth(cfg: &PipelineConfig, out: &Path) -> CmdResult<PathBuf> {
    cfg.validate().map_err(config_err)?;
    let scene = Scene::synthesize(&cfg.synth, cfg.seed).map_err(data_err)?;
    scene.write(out).map_err(data_err)?;
    Ok(out.join("manifest.json"))
}

fn write_records(out: &Path, records: &[EvalRecord]) -> CmdResult<()> {
    std::fs::create_dir_all(out).map_err(|e| data_err(e.into()))?;
    io::write_json(&out.join("records.json"), records).map_err(data_err)
}

pub fn cmd_estimate(manifest: &Path, cfg: &PipelineConfig, out: &Path) -> CmdResult<Vec<EvalRecord>> {
    cfg.validate().map_err(config_err)?;
    let scene = Scene::load(manifest).map_err(data_err)?;
    let records: Vec<EvalRecord> = estimate_scene(&scene, cfg).into_iter().map(|e| e.record).collect();
    write_records(out, &records)?;
    if !records.is_empty() && !records.iter().any(|r| r.success) {
        return Err(CommandError::NoFrameSucceeded);
    }
    Ok(records)
}

pub fn cmd_refine(manifest: &Path, cfg: &PipelineConfig, out: &Path) -> CmdResult<RefineOutput> {
    cfg.validate().map_err(config_err)?;
    let scene = Scene::load(manifest).map_err(data_err)?;
    let output = refine_scene(&scene, cfg).map_err(data_err)?;
    write_records(out, &output.records)?;
    io::write_json(&out.join("refine_reports.json"), &output.groups).map_err(data_err)?;
    let refined_ok = output.records.iter().any(|r| r.stage == "refined" && r.success);
    if !output.records.is_empty() && !refined_ok {
        return Err(CommandError::NoFrameSucceeded);
    }
    Ok(output)
}

pub fn cmd_eval(records: &Path, manifest: &Path, cfg: &PipelineConfig, out: &Path) -> CmdResult<Vec<SummaryRow>> {
    cfg.validate().map_err(config_err)?;
    let recs: Vec<EvalRecord> = io::read_json(records).map_err(data_err)?;
    if recs.is_empty() {
        return Err(CommandError::Data(Error::InvalidConfig("records file is empty".into())));
    }
    let m: SceneManifest = io::read_json(manifest).map_err(data_err)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mesh = io::read_mesh(&base.join(&m.mesh)).map_err(data_err)?;
    let diameter = mesh.diameter() * m.units_scale;
    write_report(&recs, diameter, cfg.add_threshold_frac, out).map_err(data_err)
}

/// Renders NOCS, mask and depth of frame `frame_id` at `pose` (ground truth
/// if `None`), symmetry-adjusted as in the stored maps.
pub fn cmd_render(manifest: &Path, frame_id: &str, pose: Option<&Pose>, out: &Path) -> CmdResult<Vec<PathBuf>> {
    let scene = Scene::load(manifest).map_err(data_err)?;
    let idx = scene.frame_index(frame_id).map_err(config_err)?;
    let f = &scene.frames[idx];
    let pose = pose.copied().unwrap_or(f.gt_pose);
    let (adjusted, _) = scene.symmetry.disambiguate(&pose);
    let r = render_camera(&scene.mesh, &scene.bounds, &adjusted, &scene.camera).map_err(data_err)?;
    let counts = render_depth_16bit(&r, scene.depth_scale).map_err(data_err)?;
    std::fs::create_dir_all(out).map_err(|e| data_err(e.into()))?;
    let paths = [
        out.join(format!("{frame_id}_nocs.png")),
        out.join(format!("{frame_id}_mask.png")),
        out.join(format!("{frame_id}_depth.png")),
    ];
    io::write_nocs_png(&NocsMap::from_render(&r), &paths[0]).map_err(data_err)?;
    io::write_mask_png(&r.mask, r.width, r.height, &paths[1]).map_err(data_err)?;
    io::write_depth_png(&counts, r.width, r.height, scene.depth_scale, &paths[2]).map_err(data_err)?;
    Ok(paths.to_vec())
}
