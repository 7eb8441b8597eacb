//! Depth preparation: hole filling, local-mean parameterization, and the
//! depth augmentations used to make synthetic inputs look captured.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Half-width of the local-mean window.
pub const NEIGHBORHOOD_RADIUS: usize = 5;

/// Depth in model units with an explicit hole mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub holes: Vec<bool>,
}

impl DepthMap {
    /// Non-positive or non-finite values become holes (stored as 0).
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} depth values for a {width}x{height} map",
                values.len()
            )));
        }
        let holes: Vec<bool> = values.iter().map(|&v| !(v.is_finite() && v > 0.0)).collect();
        let values = values
            .iter()
            .zip(&holes)
            .map(|(&v, &h)| if h { 0.0 } else { v })
            .collect();
        Ok(Self {
            width,
            height,
            values,
            holes,
        })
    }

    pub fn hole_count(&self) -> usize {
        self.holes.iter().filter(|&&h| h).count()
    }

    fn check_mask(&self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.values.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask of {} pixels for a {}x{} map",
                mask.len(),
                self.width,
                self.height
            )));
        }
        Ok(())
    }
}

/// Replaces each hole by its nearest valid pixel (Euclidean pixel
/// distance, ties to the earliest in row-major order).
pub fn fill_holes(d: &DepthMap) -> Result<DepthMap> {
    if d.holes.iter().all(|&h| h) {
        return Err(Error::AllHoles);
    }
    let (w, h) = (d.width as isize, d.height as isize);
    let nearest = |x: isize, y: isize| -> usize {
        // Scan square rings outward; a ring at Chebyshev radius r cannot hold
        // anything closer than r, so stop once r² exceeds the best distance.
        let mut best: Option<(isize, usize)> = None;
        let mut r = 1isize;
        loop {
            if let Some((d2, _)) = best {
                if r * r > d2 {
                    break;
                }
            }
            if r > w.max(h) {
                break;
            }
            for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                let dy = yy - y;
                let step = if dy.abs() == r { 1 } else { 2 * r };
                let mut xx = x - r;
                while xx <= x + r {
                    if (0..w).contains(&xx) {
                        let i = (yy * w + xx) as usize;
                        if !d.holes[i] {
                            let d2 = (xx - x).pow(2) + dy * dy;
                            if best.is_none_or(|(b, bi)| d2 < b || (d2 == b && i < bi)) {
                                best = Some((d2, i));
                            }
                        }
                    }
                    xx += step;
                }
            }
            r += 1;
        }
        best.expect("at least one valid pixel").1
    };
    let values = par::map_range(d.values.len(), |i| {
        if d.holes[i] {
            d.values[nearest((i % d.width) as isize, (i / d.width) as isize)]
        } else {
            d.values[i]
        }
    });
    Ok(DepthMap {
        width: d.width,
        height: d.height,
        values,
        holes: vec![false; d.holes.len()],
    })
}

/// Depth relative to the mean over the `(2t+1)²` window around each pixel,
/// clamped to the image with the mean over in-bounds pixels.
pub fn depth_parameterize(d: &DepthMap, t: usize) -> Result<Vec<f64>> {
    if d.holes.iter().any(|&h| h) {
        return Err(Error::InvalidConfig("depth map still has holes".into()));
    }
    let (w, h) = (d.width, d.height);
    // Summed-area table with a zero border row/column.
    let mut sat = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += d.values[y * w + x];
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    Ok(par::map_range(w * h, |i| {
        let (x, y) = (i % w, i / w);
        let (x0, x1) = (x.saturating_sub(t), (x + t + 1).min(w));
        let (y0, y1) = (y.saturating_sub(t), (y + t + 1).min(h));
        let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
            + sat[y0 * (w + 1) + x0];
        d.values[i] - s / ((x1 - x0) * (y1 - y0)) as f64
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerlinConfig {
    /// Lattice spacing of the first octave, in pixels.
    pub cell_size: f64,
    pub octaves: u32,
    pub amplitude: f64,
    pub persistence: f64,
    pub seed: u64,
}

impl Default for PerlinConfig {
    fn default() -> Self {
        Self {
            cell_size: 16.0,
            octaves: 4,
            amplitude: 0.0,
            persistence: 0.5,
            seed: 0,
        }
    }
}

impl PerlinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size >= 2.0) || self.octaves < 1 {
            return Err(Error::InvalidConfig("perlin needs cell size >= 2 and >= 1 octave".into()));
        }
        if !(self.amplitude >= 0.0) || !(0.0..=1.0).contains(&self.persistence) {
            return Err(Error::InvalidConfig("perlin amplitude or persistence out of range".into()));
        }
        Ok(())
    }
}

/// 2D lattice gradient noise with a seeded permutation table.
pub struct Perlin {
    perm: [u8; 512],
    gradients: [[f64; 2]; 256],
}

impl Perlin {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: Vec<u8> = (0..=255).collect();
        for i in (1..256).rev() {
            p.swap(i, rng.random_range(0..=i));
        }
        let mut perm = [0u8; 512];
        for i in 0..512 {
            perm[i] = p[i & 255];
        }
        let gradients = std::array::from_fn(|_| {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            [a.cos(), a.sin()]
        });
        Self { perm, gradients }
    }

    fn fade(t: f64) -> f64 {
        t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
    }

    fn grad(&self, xi: i64, yi: i64, dx: f64, dy: f64) -> f64 {
        let h = self.perm[self.perm[(xi & 255) as usize] as usize + (yi & 255) as usize];
        let g = self.gradients[h as usize];
        g[0] * dx + g[1] * dy
    }

    /// Noise in `[-1, 1]`; zero at integer lattice points.
    pub fn noise(&self, x: f64, y: f64) -> f64 {
        let (xf, yf) = (x.floor(), y.floor());
        let (xi, yi) = (xf as i64, yf as i64);
        let (dx, dy) = (x - xf, y - yf);
        let (u, v) = (Self::fade(dx), Self::fade(dy));
        let n00 = self.grad(xi, yi, dx, dy);
        let n10 = self.grad(xi + 1, yi, dx - 1.0, dy);
        let n01 = self.grad(xi, yi + 1, dx, dy - 1.0);
        let n11 = self.grad(xi + 1, yi + 1, dx - 1.0, dy - 1.0);
        let a = n00 + u * (n10 - n00);
        let b = n01 + u * (n11 - n01);
        // Unit gradients bound the raw value by sqrt(2)/2.
        (a + v * (b - a)) * std::f64::consts::SQRT_2
    }

    /// Octave sum at pixel `(x, y)`; octave `o` has frequency `2^o / cell`
    /// and weight `persistence^o`.
    pub fn fractal(&self, x: f64, y: f64, cfg: &PerlinConfig) -> f64 {
        let mut sum = 0.0;
        let mut freq = 1.0 / cfg.cell_size;
        let mut weight = 1.0;
        for o in 0..cfg.octaves {
            // Offset octaves so their lattices do not coincide.
            let shift = 17.31 * o as f64;
            sum += weight * self.noise(x * freq + shift, y * freq + shift);
            freq *= 2.0;
            weight *= cfg.persistence;
        }
        sum
    }
}

/// Adds fractal noise to valid background pixels, clamped at 0.
pub fn add_perlin_background(d: &DepthMap, fg: &[bool], cfg: &PerlinConfig) -> Result<DepthMap> {
    cfg.validate()?;
    d.check_mask(fg)?;
    let perlin = Perlin::new(cfg.seed);
    let w = d.width;
    let values = par::map_range(d.values.len(), |i| {
        if fg[i] || d.holes[i] || cfg.amplitude == 0.0 {
            return d.values[i];
        }
        let n = perlin.fractal((i % w) as f64 + 0.5, (i / w) as f64 + 0.5, cfg);
        (d.values[i] + cfg.amplitude * n).max(0.0)
    });
    Ok(DepthMap {
        values,
        ..d.clone()
    })
}

/// Adds `N(0, sigma²)` to valid foreground pixels, clamped at 0.
pub fn add_gaussian_foreground(d: &DepthMap, fg: &[bool], sigma: f64, seed: u64) -> Result<DepthMap> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("sigma must be >= 0, got {sigma}")));
    }
    d.check_mask(fg)?;
    let mut out = d.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).expect("sigma > 0");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ((v, &hole), &f) in out.values.iter_mut().zip(&out.holes).zip(fg) {
        if f && !hole {
            *v = (*v + normal.sample(&mut rng)).max(0.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HoleConfig {
    pub max_count: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub seed: u64,
}

impl Default for HoleConfig {
    fn default() -> Self {
        Self {
            max_count: 5,
            min_side: 2,
            max_side: 16,
            seed: 0,
        }
    }
}

/// Punches `U{0..=max_count}` axis-aligned rectangular holes of random size.
pub fn add_random_holes(d: &DepthMap, cfg: &HoleConfig) -> Result<DepthMap> {
    if cfg.min_side == 0 || cfg.min_side > cfg.max_side {
        return Err(Error::InvalidConfig("hole sides need 1 <= min <= max".into()));
    }
    let mut out = d.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let count = rng.random_range(0..=cfg.max_count);
    for _ in 0..count {
        let hw = rng.random_range(cfg.min_side..=cfg.max_side);
        let hh = rng.random_range(cfg.min_side..=cfg.max_side);
        let x0 = rng.random_range(0..d.width);
        let y0 = rng.random_range(0..d.height);
        for y in y0..(y0 + hh).min(d.height) {
            for x in x0..(x0 + hw).min(d.width) {
                let i = y * d.width + x;
                out.holes[i] = true;
                out.values[i] = 0.0;
            }
        }
    }
    Ok(out)
}
