//! Discretized NOCS maps, patch geometry, correspondence extraction, and the
//! simulated predictor that stands in for a correspondence network.

use nalgebra::Point2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{backproject, CameraIntrinsics, NocsBounds, Vec3};
use crate::raster::RenderOutput;

/// Number of bins per NOCS dimension.
pub const NOCS_BINS: usize = 256;
/// Default patch side in pixels.
pub const PATCH_SIZE: usize = 128;
/// Threshold applied to externally supplied foreground probabilities.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Continuous NOCS value to bin index, rounding half up. Input is clamped.
pub fn discretize(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn decode(bin: u8) -> f64 {
    bin as f64 / 255.0
}

pub fn discretize3(c: &[f64; 3]) -> [u8; 3] {
    c.map(discretize)
}

pub fn decode3(b: &[u8; 3]) -> Vec3 {
    Vec3::new(decode(b[0]), decode(b[1]), decode(b[2]))
}

/// Segmentation mask plus argmax NOCS bins. Bins are meaningful only where
/// the mask is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NocsMap {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub bins: Vec<[u8; 3]>,
}

impl NocsMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![false; width * height],
            bins: vec![[0; 3]; width * height],
        }
    }

    pub fn from_render(r: &RenderOutput) -> Self {
        Self {
            width: r.width,
            height: r.height,
            mask: r.mask.clone(),
            bins: r
                .nocs
                .iter()
                .zip(&r.mask)
                .map(|(c, &m)| if m { discretize3(c) } else { [0; 3] })
                .collect(),
        }
    }

    /// Builds a map from foreground probabilities (thresholded at
    /// [`MASK_THRESHOLD`]) and per-pixel bins.
    pub fn from_probabilities(
        width: usize,
        height: usize,
        fg_prob: &[f64],
        bins: Vec<[u8; 3]>,
    ) -> Result<Self> {
        if fg_prob.len() != width * height || bins.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "expected {} pixels, got mask {} and bins {}",
                width * height,
                fg_prob.len(),
                bins.len()
            )));
        }
        let mask: Vec<bool> = fg_prob.iter().map(|&p| p >= MASK_THRESHOLD).collect();
        let bins = bins
            .into_iter()
            .zip(&mask)
            .map(|(b, &m)| if m { b } else { [0; 3] })
            .collect();
        Ok(Self {
            width,
            height,
            mask,
            bins,
        })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn decoded(&self, i: usize) -> Vec3 {
        decode3(&self.bins[i])
    }

    /// Decoded model point at pixel `i`.
    pub fn model_point(&self, i: usize, bounds: &NocsBounds) -> Vec3 {
        bounds.unproject(&self.decoded(i))
    }

    /// Clears every foreground pixel outside `keep`.
    pub fn masked(&self, keep: &[bool]) -> Self {
        let mut out = self.clone();
        for (m, &k) in out.mask.iter_mut().zip(keep) {
            *m &= k;
        }
        out
    }
}

/// Axis-aligned box in full-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.w >= 1.0 && self.h >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "bounding box too small: {}x{}",
                self.w, self.h
            )));
        }
        if !self.intersects(width, height) {
            return Err(Error::BBoxOutsideImage);
        }
        Ok(())
    }

    pub fn intersects(&self, width: usize, height: usize) -> bool {
        self.x < width as f64 && self.x + self.w > 0.0 && self.y < height as f64 && self.y + self.h > 0.0
    }

    /// Tight box around the set pixels of a mask.
    pub fn from_mask(mask: &[bool], width: usize) -> Option<Self> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (x, y) = (i % width, i / width);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        (x0 != usize::MAX).then(|| {
            BoundingBox::new(
                x0 as f64,
                y0 as f64,
                (x1 - x0 + 1) as f64,
                (y1 - y0 + 1) as f64,
            )
        })
    }
}

/// Affine map between square patch coordinates and full-image coordinates:
/// `full = offset + patch / scale`. Both sides use continuous coordinates
/// with pixel centers at `i + 0.5`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchTransform {
    pub offset: [f64; 2],
    /// Patch pixels per full-image pixel.
    pub scale: f64,
    pub size: usize,
}

impl PatchTransform {
    /// Pads the shorter side of `bbox` to a square around its center, then
    /// scales the square to `size` pixels.
    pub fn from_bbox(bbox: &BoundingBox, size: usize) -> Self {
        let side = bbox.w.max(bbox.h);
        let cx = bbox.x + 0.5 * bbox.w;
        let cy = bbox.y + 0.5 * bbox.h;
        Self {
            offset: [cx - 0.5 * side, cy - 0.5 * side],
            scale: size as f64 / side,
            size,
        }
    }

    pub fn to_full(&self, p: &Point2<f64>) -> Point2<f64> {
        Point2::new(
            self.offset[0] + p.x / self.scale,
            self.offset[1] + p.y / self.scale,
        )
    }

    pub fn to_patch(&self, p: &Point2<f64>) -> Point2<f64> {
        Point2::new(
            (p.x - self.offset[0]) * self.scale,
            (p.y - self.offset[1]) * self.scale,
        )
    }

    /// Full-image coordinate of the center of patch pixel `i` (row-major).
    pub fn pixel_center_to_full(&self, i: usize) -> Point2<f64> {
        let (x, y) = (i % self.size, i / self.size);
        self.to_full(&Point2::new(x as f64 + 0.5, y as f64 + 0.5))
    }

    /// Intrinsics of a virtual camera that images the patch directly.
    pub fn crop_intrinsics(&self, k: &CameraIntrinsics) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: k.fx * self.scale,
            fy: k.fy * self.scale,
            cx: (k.cx - self.offset[0]) * self.scale,
            cy: (k.cy - self.offset[1]) * self.scale,
            width: self.size,
            height: self.size,
        }
    }
}

fn check_bbox(bbox: &BoundingBox, width: usize, height: usize) -> Result<()> {
    if !bbox.intersects(width, height) {
        return Err(Error::BBoxOutsideImage);
    }
    Ok(())
}

/// Nearest-neighbor patch extraction for label-like data. Patch pixels that
/// fall outside the image receive `fill`.
pub fn extract_patch_nearest<T: Copy>(
    data: &[T],
    width: usize,
    height: usize,
    bbox: &BoundingBox,
    out_size: usize,
    fill: T,
) -> Result<(Vec<T>, PatchTransform)> {
    check_bbox(bbox, width, height)?;
    let tf = PatchTransform::from_bbox(bbox, out_size);
    let out = (0..out_size * out_size)
        .map(|i| {
            let f = tf.pixel_center_to_full(i);
            let (sx, sy) = (f.x.floor(), f.y.floor());
            if sx < 0.0 || sy < 0.0 || sx >= width as f64 || sy >= height as f64 {
                fill
            } else {
                data[sy as usize * width + sx as usize]
            }
        })
        .collect();
    Ok((out, tf))
}

/// Nearest-neighbor patch of a NOCS map; labels are never blended.
pub fn extract_patch_map(
    map: &NocsMap,
    bbox: &BoundingBox,
    out_size: usize,
) -> Result<(NocsMap, PatchTransform)> {
    let packed: Vec<Option<[u8; 3]>> = map
        .mask
        .iter()
        .zip(&map.bins)
        .map(|(&m, &b)| m.then_some(b))
        .collect();
    let (patch, tf) = extract_patch_nearest(&packed, map.width, map.height, bbox, out_size, None)?;
    Ok((
        NocsMap {
            width: out_size,
            height: out_size,
            mask: patch.iter().map(Option::is_some).collect(),
            bins: patch.iter().map(|b| b.unwrap_or([0; 3])).collect(),
        },
        tf,
    ))
}

/// Bilinear patch of a depth image. Values `<= 0` are holes: they are
/// excluded from the interpolation weights, and a patch pixel with no valid
/// neighbor is a hole.
pub fn extract_patch_depth(
    depth: &[f64],
    width: usize,
    height: usize,
    bbox: &BoundingBox,
    out_size: usize,
) -> Result<(Vec<f64>, PatchTransform)> {
    check_bbox(bbox, width, height)?;
    let tf = PatchTransform::from_bbox(bbox, out_size);
    let sample = |x: isize, y: isize| -> Option<f64> {
        if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
            return None;
        }
        let d = depth[y as usize * width + x as usize];
        (d > 0.0).then_some(d)
    };
    let out = (0..out_size * out_size)
        .map(|i| {
            let f = tf.pixel_center_to_full(i);
            let (gx, gy) = (f.x - 0.5, f.y - 0.5);
            let (x0, y0) = (gx.floor(), gy.floor());
            let (tx, ty) = (gx - x0, gy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let taps = [
                (x0, y0, (1.0 - tx) * (1.0 - ty)),
                (x0 + 1, y0, tx * (1.0 - ty)),
                (x0, y0 + 1, (1.0 - tx) * ty),
                (x0 + 1, y0 + 1, tx * ty),
            ];
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (x, y, w) in taps {
                if let Some(d) = sample(x, y) {
                    if w > 0.0 {
                        acc += w * d;
                        wsum += w;
                    }
                }
            }
            if wsum > 0.0 {
                acc / wsum
            } else {
                0.0
            }
        })
        .collect();
    Ok((out, tf))
}

/// Shifts each side of `bbox` by an independent uniform fraction in
/// `[-max_frac, max_frac]` of the corresponding side length, then clips the
/// result to the image.
pub fn jitter_bbox(
    bbox: &BoundingBox,
    max_frac: f64,
    image_width: usize,
    image_height: usize,
    seed: u64,
) -> Result<BoundingBox> {
    if !(0.0..0.5).contains(&max_frac) {
        return Err(Error::InvalidConfig(format!(
            "jitter fraction must lie in [0, 0.5), got {max_frac}"
        )));
    }
    if max_frac == 0.0 {
        return Ok(*bbox);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shift = |len: f64| rng.random_range(-max_frac..=max_frac) * len;
    let left = bbox.x + shift(bbox.w);
    let right = bbox.x + bbox.w + shift(bbox.w);
    let top = bbox.y + shift(bbox.h);
    let bottom = bbox.y + bbox.h + shift(bbox.h);
    let (iw, ih) = (image_width as f64, image_height as f64);
    let left = left.clamp(0.0, iw - 1.0);
    let top = top.clamp(0.0, ih - 1.0);
    let right = right.clamp(left + 1.0, iw.max(left + 1.0));
    let bottom = bottom.clamp(top + 1.0, ih.max(top + 1.0));
    Ok(BoundingBox::new(left, top, right - left, bottom - top))
}

/// Corruption applied by [`simulate_prediction`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Standard deviation of Gaussian noise added to every bin.
    pub bin_sigma: f64,
    /// Fraction of foreground pixels flipped to background.
    pub dropout_frac: f64,
    /// Area fraction of the patch covered by a random background rectangle.
    pub occluder_frac: f64,
    /// Fraction of foreground pixels given uniformly random bins.
    pub outlier_frac: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            bin_sigma: 0.0,
            dropout_frac: 0.0,
            occluder_frac: 0.0,
            outlier_frac: 0.0,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.dropout_frac, self.occluder_frac, self.outlier_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || !(self.bin_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!("invalid noise config {self:?}")));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Stage-specific stream so changing one noise parameter does not reshuffle
/// the draws of the others.
fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

/// Corrupts a ground-truth map, in order: Gaussian bin noise, uniform outlier
/// bins, foreground dropout, rectangular occluder.
pub fn simulate_prediction(gt: &NocsMap, cfg: &NoiseConfig) -> Result<NocsMap> {
    cfg.validate()?;
    let mut out = gt.clone();
    let fg: Vec<usize> = (0..gt.len()).filter(|&i| gt.mask[i]).collect();

    if cfg.bin_sigma > 0.0 {
        let mut rng = stage_rng(cfg.seed, 1);
        let normal = Normal::new(0.0, cfg.bin_sigma).expect("sigma checked");
        for &i in &fg {
            for ch in 0..3 {
                let v = out.bins[i][ch] as f64 + normal.sample(&mut rng);
                out.bins[i][ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    if cfg.outlier_frac > 0.0 {
        let mut rng = stage_rng(cfg.seed, 2);
        for &i in &fg {
            if rng.random::<f64>() < cfg.outlier_frac {
                out.bins[i] = [rng.random(), rng.random(), rng.random()];
            }
        }
    }
    if cfg.dropout_frac > 0.0 {
        let mut rng = stage_rng(cfg.seed, 3);
        for &i in &fg {
            if rng.random::<f64>() < cfg.dropout_frac {
                out.mask[i] = false;
            }
        }
    }
    if cfg.occluder_frac > 0.0 {
        let mut rng = stage_rng(cfg.seed, 4);
        let (w, h) = (gt.width as f64, gt.height as f64);
        let area = cfg.occluder_frac * w * h;
        let aspect: f64 = rng.random_range(0.5..=2.0);
        let rw = (area * aspect).sqrt().min(w);
        let rh = (area / rw).min(h);
        let x0 = rng.random_range(0.0..=(w - rw));
        let y0 = rng.random_range(0.0..=(h - rh));
        for y in 0..gt.height {
            for x in 0..gt.width {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                if cx >= x0 && cx < x0 + rw && cy >= y0 && cy < y0 + rh {
                    out.mask[y * gt.width + x] = false;
                }
            }
        }
    }
    for (b, &m) in out.bins.iter_mut().zip(&out.mask) {
        if !m {
            *b = [0; 3];
        }
    }
    Ok(out)
}

/// Pixel ↔ model-point pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Correspondences2D {
    pub image: Vec<Point2<f64>>,
    pub model: Vec<Vec3>,
}

impl Correspondences2D {
    pub fn len(&self) -> usize {
        self.model.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            image: idx.iter().map(|&i| self.image[i]).collect(),
            model: idx.iter().map(|&i| self.model[i]).collect(),
        }
    }
}

/// Camera-point ↔ model-point pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Correspondences3D {
    pub observed: Vec<Vec3>,
    pub model: Vec<Vec3>,
}

impl Correspondences3D {
    pub fn len(&self) -> usize {
        self.model.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            observed: idx.iter().map(|&i| self.observed[i]).collect(),
            model: idx.iter().map(|&i| self.model[i]).collect(),
        }
    }
}

/// One pair per foreground pixel of a patch map: full-image pixel center
/// (undoing padding and resize) ↔ decoded model point.
pub fn extract_2d3d(
    map: &NocsMap,
    bounds: &NocsBounds,
    bbox: &BoundingBox,
) -> Result<Correspondences2D> {
    let tf = PatchTransform::from_bbox(bbox, map.width);
    let mut out = Correspondences2D::default();
    for i in (0..map.len()).filter(|&i| map.mask[i]) {
        out.image.push(tf.pixel_center_to_full(i));
        out.model.push(map.model_point(i, bounds));
    }
    if out.len() < 4 {
        return Err(Error::InsufficientCorrespondences {
            found: out.len(),
            needed: 4,
        });
    }
    Ok(out)
}

/// Backprojects foreground pixels with valid depth (`> 0`) through the full
/// camera `k` and pairs them with decoded model points. `depth` is
/// registered to the map's patch.
pub fn extract_3d3d(
    map: &NocsMap,
    depth: &[f64],
    k: &CameraIntrinsics,
    bounds: &NocsBounds,
    bbox: &BoundingBox,
) -> Result<Correspondences3D> {
    if depth.len() != map.len() {
        return Err(Error::ShapeMismatch(format!(
            "depth patch has {} pixels, map has {}",
            depth.len(),
            map.len()
        )));
    }
    let tf = PatchTransform::from_bbox(bbox, map.width);
    let mut out = Correspondences3D::default();
    for i in (0..map.len()).filter(|&i| map.mask[i] && depth[i] > 0.0) {
        let px = tf.pixel_center_to_full(i);
        out.observed.push(backproject(k, &px, depth[i])?);
        out.model.push(map.model_point(i, bounds));
    }
    if out.len() < 3 {
        return Err(Error::InsufficientCorrespondences {
            found: out.len(),
            needed: 3,
        });
    }
    Ok(out)
}
