//! Pose and correspondence metrics, mask overlap scores, the segmentation
//! and NOCS classification losses, and report aggregation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correspondence::{NocsMap, NOCS_BINS};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Mesh, NocsBounds, Pose};
use crate::raster::render;
use crate::symmetry::{orbit_poses, SymmetrySpec};

/// Default ADD recall threshold as a fraction of the mesh diameter.
pub const ADD_THRESHOLD_FRAC: f64 = 0.1;
/// Default weight of the segmentation term in [`total_loss`].
pub const SEGMENTATION_WEIGHT: f64 = 5.0;

/// Mean vertex displacement between two poses.
pub fn add_metric(est: &Pose, gt: &Pose, mesh: &Mesh) -> f64 {
    let v = mesh.vertices();
    v.iter()
        .map(|p| (est.transform(p) - gt.transform(p)).norm())
        .sum::<f64>()
        / v.len() as f64
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Per-record outcome of one pose estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub object_id: String,
    pub frame_id: String,
    /// `estimate`, `initial` or `refined`.
    pub stage: String,
    pub mode: String,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Pose>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub add: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub add_sym: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corr_err_median: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inliers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correspondences: Option<usize>,
    /// Frame ids refined jointly, for `initial`/`refined` records.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub group: Vec<String>,
}

impl EvalRecord {
    pub fn failed(object_id: &str, frame_id: &str, stage: &str, mode: &str, why: String) -> Self {
        Self {
            object_id: object_id.into(),
            frame_id: frame_id.into(),
            stage: stage.into(),
            mode: mode.into(),
            success: false,
            failure: Some(why),
            pose: None,
            add: None,
            add_sym: None,
            corr_err_median: None,
            dice: None,
            iou: None,
            inliers: None,
            correspondences: None,
            group: Vec::new(),
        }
    }
}

/// Fraction of records whose symmetry-aware ADD is below
/// `threshold_frac · diameter`. Failed records count as misses.
pub fn add_recall(records: &[EvalRecord], diameter: f64, threshold_frac: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|r| r.add_sym.or(r.add).is_some_and(|a| a < threshold_frac * diameter))
        .count();
    hits as f64 / records.len() as f64
}

fn check_same_shape(a: &NocsMap, b: &NocsMap) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Median model-space distance between decoded coordinates over mutually
/// foreground pixels.
pub fn correspondence_error(pred: &NocsMap, gt: &NocsMap, bounds: &NocsBounds) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let mut d: Vec<f64> = (0..pred.len())
        .filter(|&i| pred.mask[i] && gt.mask[i])
        .map(|i| (pred.model_point(i, bounds) - gt.model_point(i, bounds)).norm())
        .collect();
    median(&mut d).ok_or_else(|| Error::Degenerate("no mutual foreground".into()))
}

/// Symmetry-aware variant: the ground-truth map is rendered under every
/// orbit pose of `gt_pose` and the smallest median wins. `k` is the camera
/// imaging the patch.
pub fn correspondence_error_symmetric(
    pred: &NocsMap,
    mesh: &Mesh,
    bounds: &NocsBounds,
    gt_pose: &Pose,
    k: &CameraIntrinsics,
    spec: &SymmetrySpec,
    n_samples: usize,
) -> Result<f64> {
    let mut best: Option<f64> = None;
    for p in orbit_poses(gt_pose, spec, n_samples) {
        let r = render(mesh, bounds, &p, k, pred.width, pred.height)?;
        if let Ok(e) = correspondence_error(pred, &NocsMap::from_render(&r), bounds) {
            best = Some(best.map_or(e, |b| b.min(e)));
        }
    }
    best.ok_or_else(|| Error::Degenerate("no mutual foreground".into()))
}

fn overlap(a: &[bool], b: &[bool]) -> (usize, usize, usize) {
    assert_eq!(a.len(), b.len(), "mask sizes differ");
    let (mut inter, mut na, mut nb) = (0, 0, 0);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    (inter, na, nb)
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(a: &[bool], b: &[bool]) -> f64 {
    let (inter, na, nb) = overlap(a, b);
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// `|A∩B| / |A∪B|`; two empty masks score 0.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (inter, na, nb) = overlap(a, b);
    let union = na + nb - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Dice with soft foreground probabilities against a binary target.
pub fn soft_dice(prob: &[f64], target: &[bool]) -> f64 {
    assert_eq!(prob.len(), target.len(), "mask sizes differ");
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for (&p, &t) in prob.iter().zip(target) {
        let t = t as u8 as f64;
        inter += p * t;
        sp += p;
        st += t;
    }
    if sp + st == 0.0 {
        1.0
    } else {
        2.0 * inter / (sp + st)
    }
}

/// Per-pixel, per-dimension distributions over the NOCS bins, laid out as
/// `[(pixel * 3 + dim) * 256 + bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NocsProbabilities {
    pub width: usize,
    pub height: usize,
    pub probs: Vec<f64>,
}

impl NocsProbabilities {
    pub fn new(width: usize, height: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != width * height * 3 * NOCS_BINS {
            return Err(Error::ShapeMismatch(format!(
                "expected {} probabilities, got {}",
                width * height * 3 * NOCS_BINS,
                probs.len()
            )));
        }
        Ok(Self {
            width,
            height,
            probs,
        })
    }

    pub fn uniform(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            probs: vec![1.0 / NOCS_BINS as f64; width * height * 3 * NOCS_BINS],
        }
    }

    /// All mass on the given bins.
    pub fn one_hot(map: &NocsMap) -> Self {
        let mut probs = vec![0.0; map.len() * 3 * NOCS_BINS];
        for (i, b) in map.bins.iter().enumerate() {
            for d in 0..3 {
                probs[(i * 3 + d) * NOCS_BINS + b[d] as usize] = 1.0;
            }
        }
        Self {
            width: map.width,
            height: map.height,
            probs,
        }
    }

    pub fn dist(&self, pixel: usize, dim: usize) -> &[f64] {
        let s = (pixel * 3 + dim) * NOCS_BINS;
        &self.probs[s..s + NOCS_BINS]
    }
}

/// Cross entropy of the ground-truth bins over foreground pixels, summed
/// over the three dimensions.
pub fn nocs_ce_loss(probs: &NocsProbabilities, gt: &NocsMap) -> Result<f64> {
    if (probs.width, probs.height) != (gt.width, gt.height) {
        return Err(Error::ShapeMismatch("probability tensor and map differ".into()));
    }
    for pixel in 0..gt.len() {
        for dim in 0..3 {
            let sum: f64 = probs.dist(pixel, dim).iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::UnnormalizedProbabilities { pixel, dim, sum });
            }
        }
    }
    let mut loss = 0.0;
    for pixel in (0..gt.len()).filter(|&i| gt.mask[i]) {
        for dim in 0..3 {
            let p = probs.dist(pixel, dim)[gt.bins[pixel][dim] as usize];
            loss -= p.ln();
        }
    }
    Ok(loss)
}

/// `alpha · (1 − dice) + cross entropy`.
pub fn total_loss(
    probs: &NocsProbabilities,
    fg_prob: &[f64],
    gt: &NocsMap,
    alpha: f64,
) -> Result<f64> {
    if fg_prob.len() != gt.len() {
        return Err(Error::ShapeMismatch("foreground probabilities and map differ".into()));
    }
    Ok(alpha * (1.0 - soft_dice(fg_prob, &gt.mask)) + nocs_ce_loss(probs, gt)?)
}

/// One CSV row per object and stage. Column order is fixed by field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub object_id: String,
    pub stage: String,
    pub mode: String,
    pub frames: usize,
    pub succeeded: usize,
    pub add_recall: f64,
    pub mean_add: Option<f64>,
    pub median_add: Option<f64>,
    pub mean_add_sym: Option<f64>,
    pub median_add_sym: Option<f64>,
    /// Mean over frames of the per-frame median correspondence error.
    pub mean_of_median_corr_err: Option<f64>,
    pub mean_dice: Option<f64>,
    pub mean_iou: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Groups records by object, stage and mode (sorted) and aggregates them.
pub fn summarize(records: &[EvalRecord], diameter: f64, threshold_frac: f64) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, String), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.object_id.clone(), r.stage.clone(), r.mode.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((object_id, stage, mode), rs)| {
            let col = |f: fn(&EvalRecord) -> Option<f64>| -> Vec<f64> {
                rs.iter().filter_map(|r| f(r)).collect()
            };
            let owned: Vec<EvalRecord> = rs.iter().map(|r| (*r).clone()).collect();
            SummaryRow {
                object_id,
                stage,
                mode,
                frames: rs.len(),
                succeeded: rs.iter().filter(|r| r.success).count(),
                add_recall: add_recall(&owned, diameter, threshold_frac),
                mean_add: mean(&col(|r| r.add)),
                median_add: median(&mut col(|r| r.add)),
                mean_add_sym: mean(&col(|r| r.add_sym)),
                median_add_sym: median(&mut col(|r| r.add_sym)),
                mean_of_median_corr_err: mean(&col(|r| r.corr_err_median)),
                mean_dice: mean(&col(|r| r.dice)),
                mean_iou: mean(&col(|r| r.iou)),
            }
        })
        .collect()
}

/// Writes `records.json` and `summary.csv` into `dir`.
pub fn write_report(
    records: &[EvalRecord],
    diameter: f64,
    threshold_frac: f64,
    dir: &Path,
) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::InvalidConfig("no records to report".into()));
    }
    std::fs::create_dir_all(dir)?;
    crate::io::write_json(&dir.join("records.json"), records)?;
    let rows = summarize(records, diameter, threshold_frac);
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for row in &rows {
        w.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use proptest::prelude::*;

    #[test]
    fn add_examples() {
        let mesh = crate::shapes::cube(1.0);
        let gt = Pose::from_translation(Vec3::new(0.0, 0.0, 5.0));
        assert_eq!(add_metric(&gt, &gt, &mesh), 0.0);
        let shifted = Pose::from_translation(Vec3::new(0.3, -0.4, 5.0));
        assert!((add_metric(&shifted, &gt, &mesh) - 0.5).abs() < 1e-12);
        // 180° about z through the centroid: each corner moves by twice its
        // distance from the axis, sqrt(0.5) for every cube corner.
        let rot = gt.compose(&Pose::from_axis_angle(&Vec3::z(), std::f64::consts::PI));
        let direct: f64 = mesh
            .vertices()
            .iter()
            .map(|v| 2.0 * (v.x * v.x + v.y * v.y).sqrt())
            .sum::<f64>()
            / 8.0;
        assert!((add_metric(&rot, &gt, &mesh) - direct).abs() < 1e-12);
        assert!((direct - 2.0 * 0.5f64.sqrt()).abs() < 1e-12);
    }

    fn record(add: f64) -> EvalRecord {
        let mut r = EvalRecord::failed("obj", "f", "estimate", "rgb", String::new());
        r.success = true;
        r.failure = None;
        r.add = Some(add);
        r.add_sym = Some(add);
        r
    }

    #[test]
    fn recall_counts() {
        let exact: Vec<EvalRecord> = (0..5).map(|_| record(0.0)).collect();
        assert_eq!(add_recall(&exact, 10.0, 0.1), 1.0);
        let far: Vec<EvalRecord> = (0..5).map(|_| record(10.0)).collect();
        assert_eq!(add_recall(&far, 10.0, 0.1), 0.0);
        let adds = [0.1, 0.5, 0.99, 1.0, 1.5, 3.0, 0.0];
        let mixed: Vec<EvalRecord> = adds.iter().map(|&a| record(a)).collect();
        let direct = adds.iter().filter(|&&a| a < 1.0).count() as f64 / adds.len() as f64;
        assert_eq!(add_recall(&mixed, 10.0, 0.1), direct);
        let mut with_fail = mixed.clone();
        with_fail.push(EvalRecord::failed("obj", "g", "estimate", "rgb", "x".into()));
        assert_eq!(add_recall(&with_fail, 10.0, 0.1), 4.0 / 8.0);
    }

    #[test]
    fn overlap_examples() {
        let a: Vec<bool> = (0..200).map(|i| i < 100).collect();
        let b: Vec<bool> = (0..200).map(|i| (50..150).contains(&i)).collect();
        assert_eq!(dice(&a, &b), 0.5);
        assert_eq!(dice(&a, &a), 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        let none = vec![false; 200];
        assert_eq!(dice(&none, &none), 1.0);
        assert_eq!(iou(&none, &none), 0.0);
        let c: Vec<bool> = (0..200).map(|i| i >= 100).collect();
        assert_eq!(dice(&a, &c), 0.0);
        assert_eq!(iou(&a, &c), 0.0);
        let big = vec![true; 400];
        let quarter: Vec<bool> = (0..400).map(|i| i < 100).collect();
        assert_eq!(iou(&quarter, &big), 0.25);
    }

    proptest! {
        #[test]
        fn dice_iou_properties(a in prop::collection::vec(any::<bool>(), 64), b in prop::collection::vec(any::<bool>(), 64)) {
            prop_assert_eq!(dice(&a, &b), dice(&b, &a));
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            if a.iter().chain(&b).any(|&x| x) {
                prop_assert!(dice(&a, &b) >= iou(&a, &b));
            }
        }
    }

    fn map_with(n: usize, bins: [u8; 3]) -> NocsMap {
        let mut m = NocsMap::empty(n, n);
        for i in 0..n * n {
            m.mask[i] = i % 3 != 0;
            m.bins[i] = if m.mask[i] { bins } else { [0; 3] };
        }
        m
    }

    #[test]
    fn correspondence_error_examples() {
        let bounds = NocsBounds::new([0.0, -1.0, 2.0], [10.0, 3.0, 4.0]).unwrap();
        let gt = map_with(8, [100, 50, 200]);
        assert_eq!(correspondence_error(&gt, &gt, &bounds).unwrap(), 0.0);
        let off = map_with(8, [100, 53, 200]);
        let e = correspondence_error(&off, &gt, &bounds).unwrap();
        assert!((e - 3.0 / 255.0 * 4.0).abs() < 1e-12);
        let empty = NocsMap::empty(8, 8);
        assert!(correspondence_error(&empty, &gt, &bounds).is_err());
    }

    #[test]
    fn ce_loss_examples() {
        let gt = map_with(4, [3, 250, 128]);
        let one_hot = NocsProbabilities::one_hot(&gt);
        assert_eq!(nocs_ce_loss(&one_hot, &gt).unwrap(), 0.0);
        let uniform = NocsProbabilities::uniform(4, 4);
        let fg = gt.foreground_count() as f64;
        let expect = fg * 3.0 * (256f64).ln();
        assert!((nocs_ce_loss(&uniform, &gt).unwrap() - expect).abs() < 1e-9);
        assert_eq!(nocs_ce_loss(&uniform, &NocsMap::empty(4, 4)).unwrap(), 0.0);
        let mut bad = uniform.clone();
        bad.probs[0] += 0.1;
        assert!(matches!(
            nocs_ce_loss(&bad, &gt),
            Err(Error::UnnormalizedProbabilities { pixel: 0, dim: 0, .. })
        ));
    }

    #[test]
    fn total_loss_decomposition() {
        let gt = map_with(4, [3, 250, 128]);
        let probs = NocsProbabilities::one_hot(&gt);
        let exact: Vec<f64> = gt.mask.iter().map(|&m| m as u8 as f64).collect();
        assert_eq!(total_loss(&probs, &exact, &gt, 5.0).unwrap(), 0.0);
        let partial: Vec<f64> = exact.iter().enumerate().map(|(i, &p)| if i < 8 { 0.0 } else { p }).collect();
        let d = soft_dice(&partial, &gt.mask);
        assert!(d < 1.0);
        assert!((total_loss(&probs, &partial, &gt, 5.0).unwrap() - 5.0 * (1.0 - d)).abs() < 1e-12);
        let uniform = NocsProbabilities::uniform(4, 4);
        assert_eq!(
            total_loss(&uniform, &partial, &gt, 0.0).unwrap(),
            nocs_ce_loss(&uniform, &gt).unwrap()
        );
    }

    #[test]
    fn report_files_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<EvalRecord> = [0.1, 0.5, 2.0].iter().map(|&a| record(a)).collect();
        let rows = write_report(&recs, 10.0, 0.1, dir.path()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].frames, 3);
        let first = std::fs::read(dir.path().join("summary.csv")).unwrap();
        write_report(&recs, 10.0, 0.1, dir.path()).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join("summary.csv")).unwrap());
        let header = String::from_utf8(first).unwrap();
        assert!(header.starts_with("object_id,stage,mode,frames,succeeded,add_recall,"));
        assert!(write_report(&[], 10.0, 0.1, dir.path()).is_err());
    }
}
