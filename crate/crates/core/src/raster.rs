//! Hard z-buffered rasterization of a mesh into mask, NOCS and depth images.
//!
//! Pixel centers sit at `(i + 0.5, j + 0.5)`. Coverage uses the top-left rule
//! so triangles sharing an edge never double-cover or leave gaps. Attributes
//! are interpolated perspective-correctly. There is no back-face culling; a
//! triangle is dropped when any of its vertices has `z <= 1e-6`.

use nalgebra::Point2;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Mesh, NocsBounds, Pose, Vec3};

const NEAR_Z: f64 = 1e-6;
const BAND_ROWS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    /// NOCS per pixel; zero where `mask` is false.
    pub nocs: Vec<[f64; 3]>,
    /// Camera-space depth per pixel; zero where `mask` is false.
    pub depth: Vec<f64>,
    /// Index of the visible mesh face per pixel.
    pub face: Vec<Option<u32>>,
}

impl RenderOutput {
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground_count() == 0
    }
}

#[derive(Clone, Copy)]
struct Setup {
    v: [Point2<f64>; 3],
    inv_z: [f64; 3],
    nocs_over_z: [Vec3; 3],
    area: f64,
    top_left: [bool; 3],
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    face: u32,
}

#[derive(Clone, Copy)]
struct Fragment {
    depth: f64,
    nocs: [f64; 3],
    face: u32,
}

/// Signed doubled area of `(a, b, p)`, evaluated from a canonical vertex order
/// so that `edge(a, b, p) == -edge(b, a, p)` holds bit-exactly.
fn edge(a: &Point2<f64>, b: &Point2<f64>, p: &Point2<f64>) -> f64 {
    let orient = |a: &Point2<f64>, b: &Point2<f64>| {
        (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
    };
    if (a.x, a.y) < (b.x, b.y) {
        orient(a, b)
    } else {
        -orient(b, a)
    }
}

fn is_top_left(a: &Point2<f64>, b: &Point2<f64>) -> bool {
    (a.y == b.y && b.x > a.x) || b.y < a.y
}

fn setup_triangles(
    mesh: &Mesh,
    bounds: &NocsBounds,
    pose: &Pose,
    k: &CameraIntrinsics,
    width: usize,
    height: usize,
) -> Vec<Setup> {
    let cam: Vec<Vec3> = mesh.vertices().iter().map(|v| pose.transform(v)).collect();
    let nocs: Vec<Vec3> = mesh.vertices().iter().map(|v| bounds.project(v)).collect();
    let mut out = Vec::with_capacity(mesh.faces().len());
    for (fi, face) in mesh.faces().iter().enumerate() {
        if face.iter().any(|&i| cam[i].z <= NEAR_Z) {
            continue;
        }
        let mut idx = *face;
        let proj = |i: usize| k.project(&cam[i]).expect("z checked");
        let mut v = [proj(idx[0]), proj(idx[1]), proj(idx[2])];
        let mut area = edge(&v[0], &v[1], &v[2]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            idx.swap(1, 2);
            v.swap(1, 2);
            area = -area;
        }
        let min_x = v.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let max_x = v.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let min_y = v.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let max_y = v.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        // Pixel i is a candidate when its center i + 0.5 lies in [min, max].
        let lo = |m: f64| (m - 0.5).ceil().max(0.0);
        let hi = |m: f64, n: usize| (m - 0.5).floor().min(n as f64 - 1.0);
        let (x0, x1) = (lo(min_x), hi(max_x, width));
        let (y0, y1) = (lo(min_y), hi(max_y, height));
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let inv_z = idx.map(|i| 1.0 / cam[i].z);
        out.push(Setup {
            v,
            inv_z,
            nocs_over_z: [
                nocs[idx[0]] * inv_z[0],
                nocs[idx[1]] * inv_z[1],
                nocs[idx[2]] * inv_z[2],
            ],
            area,
            top_left: [
                is_top_left(&v[1], &v[2]),
                is_top_left(&v[2], &v[0]),
                is_top_left(&v[0], &v[1]),
            ],
            x0: x0 as usize,
            x1: x1 as usize,
            y0: y0 as usize,
            y1: y1 as usize,
            face: fi as u32,
        });
    }
    out
}

fn rasterize_band(tris: &[Setup], width: usize, row0: usize, band: &mut [Option<Fragment>]) {
    let rows = band.len() / width;
    let row1 = row0 + rows - 1;
    for t in tris.iter().filter(|t| t.y1 >= row0 && t.y0 <= row1) {
        for y in t.y0.max(row0)..=t.y1.min(row1) {
            let py = y as f64 + 0.5;
            for x in t.x0..=t.x1 {
                let p = Point2::new(x as f64 + 0.5, py);
                let w = [
                    edge(&t.v[1], &t.v[2], &p),
                    edge(&t.v[2], &t.v[0], &p),
                    edge(&t.v[0], &t.v[1], &p),
                ];
                let inside = (0..3).all(|e| w[e] > 0.0 || (w[e] == 0.0 && t.top_left[e]));
                if !inside {
                    continue;
                }
                let sum = w[0] + w[1] + w[2];
                let l = if sum > 0.0 {
                    [w[0] / sum, w[1] / sum, w[2] / sum]
                } else {
                    [w[0] / t.area, w[1] / t.area, w[2] / t.area]
                };
                let inv_z = l[0] * t.inv_z[0] + l[1] * t.inv_z[1] + l[2] * t.inv_z[2];
                let depth = 1.0 / inv_z;
                let slot = &mut band[(y - row0) * width + x];
                if slot.is_some_and(|f| f.depth <= depth) {
                    continue;
                }
                let c = (t.nocs_over_z[0] * l[0] + t.nocs_over_z[1] * l[1] + t.nocs_over_z[2] * l[2])
                    * depth;
                *slot = Some(Fragment {
                    depth,
                    nocs: [c.x, c.y, c.z],
                    face: t.face,
                });
            }
        }
    }
}

/// Renders mask, NOCS and depth of `mesh` at `pose` into a `width x height`
/// image. `k` supplies the projection; its own width/height are ignored.
pub fn render(
    mesh: &Mesh,
    bounds: &NocsBounds,
    pose: &Pose,
    k: &CameraIntrinsics,
    width: usize,
    height: usize,
) -> Result<RenderOutput> {
    if width == 0 || height == 0 {
        return Err(Error::EmptyFrame { width, height });
    }
    let tris = setup_triangles(mesh, bounds, pose, k, width, height);
    let mut frags: Vec<Option<Fragment>> = vec![None; width * height];
    crate::par::for_each_chunk_mut(&mut frags, BAND_ROWS * width, |band_idx, band| {
        rasterize_band(&tris, width, band_idx * BAND_ROWS, band)
    });

    let n = width * height;
    let mut out = RenderOutput {
        width,
        height,
        mask: vec![false; n],
        nocs: vec![[0.0; 3]; n],
        depth: vec![0.0; n],
        face: vec![None; n],
    };
    for (i, f) in frags.into_iter().enumerate() {
        if let Some(f) = f {
            out.mask[i] = true;
            out.nocs[i] = f.nocs.map(|c| c.clamp(0.0, 1.0));
            out.depth[i] = f.depth;
            out.face[i] = Some(f.face);
        }
    }
    Ok(out)
}

/// Renders at the camera's own resolution.
pub fn render_camera(
    mesh: &Mesh,
    bounds: &NocsBounds,
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Result<RenderOutput> {
    render(mesh, bounds, pose, k, k.width, k.height)
}

/// Quantizes depth to 16-bit counts of `scale` model units. Background is 0.
pub fn render_depth_16bit(output: &RenderOutput, scale: f64) -> Result<Vec<u16>> {
    if !(scale > 0.0) {
        return Err(Error::InvalidConfig(format!("depth scale must be positive, got {scale}")));
    }
    output
        .mask
        .iter()
        .zip(&output.depth)
        .map(|(&m, &d)| {
            if !m {
                return Ok(0);
            }
            let count = (d / scale).round();
            if !(0.0..=u16::MAX as f64).contains(&count) {
                return Err(Error::DepthOverflow { depth: d, scale });
            }
            Ok(count as u16)
        })
        .collect()
}

/// Screen-space derivative of each NOCS channel: `[channel][0]` is d/du
/// (along columns) and `[channel][1]` is d/dv (along rows). Central
/// differences where both neighbors are foreground, one-sided at mask
/// borders, zero for isolated pixels.
pub fn screen_gradient(
    nocs: &[[f64; 3]],
    mask: &[bool],
    width: usize,
    height: usize,
) -> Vec<[[f64; 2]; 3]> {
    let fg = |x: isize, y: isize| -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < width
            && (y as usize) < height
            && mask[y as usize * width + x as usize]
    };
    let at = |x: isize, y: isize| nocs[y as usize * width + x as usize];
    let mut out = vec![[[0.0; 2]; 3]; width * height];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let i = y as usize * width + x as usize;
            if !mask[i] {
                continue;
            }
            let c = at(x, y);
            for (axis, (dx, dy)) in [(1isize, 0isize), (0, 1)].into_iter().enumerate() {
                let (has_next, has_prev) = (fg(x + dx, y + dy), fg(x - dx, y - dy));
                let d: [f64; 3] = match (has_prev, has_next) {
                    (true, true) => {
                        let (n, p) = (at(x + dx, y + dy), at(x - dx, y - dy));
                        [0, 1, 2].map(|ch| 0.5 * (n[ch] - p[ch]))
                    }
                    (false, true) => {
                        let n = at(x + dx, y + dy);
                        [0, 1, 2].map(|ch| n[ch] - c[ch])
                    }
                    (true, false) => {
                        let p = at(x - dx, y - dy);
                        [0, 1, 2].map(|ch| c[ch] - p[ch])
                    }
                    (false, false) => [0.0; 3],
                };
                for ch in 0..3 {
                    out[i][ch][axis] = d[ch];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compute_nocs_bounds;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(80.0, 80.0, 32.0, 32.0, 64, 64).unwrap()
    }

    #[test]
    fn zero_area_frame_is_error() {
        let mesh = crate::shapes::cube(1.0);
        let b = compute_nocs_bounds(&mesh).unwrap();
        let r = render(&mesh, &b, &Pose::identity(), &camera(), 0, 10);
        assert!(matches!(r, Err(Error::EmptyFrame { .. })));
    }

    #[test]
    fn object_behind_camera_renders_empty() {
        let mesh = crate::shapes::cube(1.0);
        let b = compute_nocs_bounds(&mesh).unwrap();
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, -5.0));
        let r = render(&mesh, &b, &pose, &camera(), 64, 64).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn triangle_coverage_matches_half_space_oracle() {
        // Triangle parallel to the image plane at z = 2.
        let verts = vec![
            Vec3::new(-0.31, -0.27, 2.0),
            Vec3::new(0.42, -0.05, 2.0),
            Vec3::new(0.03, 0.36, 2.0),
            Vec3::new(0.0, 0.0, 3.0),
        ];
        let mesh = Mesh::new(verts.clone(), vec![[0, 1, 2]]).unwrap();
        let b = compute_nocs_bounds(&mesh).unwrap();
        let k = camera();
        let r = render(&mesh, &b, &Pose::identity(), &k, 64, 64).unwrap();
        let p: Vec<Point2<f64>> = verts[..3].iter().map(|v| k.project(v).unwrap()).collect();
        let cross = |a: &Point2<f64>, b: &Point2<f64>, q: &Point2<f64>| {
            (b.x - a.x) * (q.y - a.y) - (b.y - a.y) * (q.x - a.x)
        };
        let sign = cross(&p[0], &p[1], &p[2]).signum();
        let mut covered = 0;
        for y in 0..64 {
            for x in 0..64 {
                let q = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                let inside = (0..3).all(|e| sign * cross(&p[e], &p[(e + 1) % 3], &q) > 0.0);
                assert_eq!(r.mask[y * 64 + x], inside, "pixel ({x},{y})");
                covered += inside as usize;
            }
        }
        assert!(covered > 100);
    }

    #[test]
    fn shared_edges_cover_each_pixel_once() {
        // A square split along its diagonal, with the diagonal passing
        // exactly through pixel centers.
        let k = CameraIntrinsics::new(10.0, 10.0, 0.0, 0.0, 16, 16).unwrap();
        let v = vec![
            Vec3::new(0.25, 0.25, 1.0),
            Vec3::new(1.25, 0.25, 1.0),
            Vec3::new(1.25, 1.25, 1.0),
            Vec3::new(0.25, 1.25, 1.0),
            Vec3::new(0.0, 0.0, 2.0),
        ];
        for faces in [vec![[0, 1, 2], [0, 2, 3]], vec![[0, 1, 2], [2, 0, 3]]] {
            let mesh = Mesh::new(v.clone(), faces.clone()).unwrap();
            let b = compute_nocs_bounds(&mesh).unwrap();
            let both = render(&mesh, &b, &Pose::identity(), &k, 16, 16).unwrap();
            let mut hits = vec![0; 256];
            for f in &faces {
                let single = mesh.with_faces(vec![*f]).unwrap();
                let r = render(&single, &b, &Pose::identity(), &k, 16, 16).unwrap();
                for (h, m) in hits.iter_mut().zip(&r.mask) {
                    *h += *m as usize;
                }
            }
            assert!(hits.iter().all(|&h| h <= 1));
            for (h, m) in hits.iter().zip(&both.mask) {
                assert_eq!(*h == 1, *m);
            }
            // Edges lie exactly on pixel centers 2.5 and 12.5; the top/left
            // ones are included and the bottom/right ones are not.
            assert_eq!(both.foreground_count(), 10 * 10);
        }
    }

    #[test]
    fn cube_center_pixel_nocs() {
        // Cube centered on the optical axis: the central ray hits the front
        // face (z = -0.5 in model space) at model (x, y) determined by the ray.
        let mesh = crate::shapes::cube(1.0);
        let b = compute_nocs_bounds(&mesh).unwrap();
        let k = camera();
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, 4.0));
        let r = render(&mesh, &b, &pose, &k, 64, 64).unwrap();
        let i = r.index(32, 32);
        assert!(r.mask[i]);
        // Ray through pixel center (32.5, 32.5) hits z = 3.5.
        let ray = k.ray(&Point2::new(32.5, 32.5));
        let hit = ray * 3.5 - pose.translation;
        let expect = b.project(&hit);
        for ch in 0..3 {
            assert!((r.nocs[i][ch] - expect[ch]).abs() < 1e-12);
        }
        assert!((r.depth[i] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn render_is_deterministic() {
        let mesh = crate::shapes::blob(1.0, 10, 16, 2);
        let b = compute_nocs_bounds(&mesh).unwrap();
        let pose = Pose {
            rotation: crate::geometry::axis_angle(&Vec3::new(1.0, 1.0, 0.0), 0.4),
            translation: Vec3::new(0.1, 0.0, 3.0),
        };
        let a = render(&mesh, &b, &pose, &camera(), 64, 64).unwrap();
        let c = render(&mesh, &b, &pose, &camera(), 64, 64).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn depth_16bit_quantization() {
        let out = RenderOutput {
            width: 3,
            height: 1,
            mask: vec![true, false, true],
            nocs: vec![[0.0; 3]; 3],
            depth: vec![1000.0, 5.0, 70000.0],
            face: vec![Some(0), None, Some(0)],
        };
        assert!(matches!(
            render_depth_16bit(&out, 1.0),
            Err(Error::DepthOverflow { .. })
        ));
        let ok = RenderOutput {
            depth: vec![1000.0, 5.0, 12.4],
            ..out
        };
        assert_eq!(render_depth_16bit(&ok, 1.0).unwrap(), vec![1000, 0, 12]);
    }

    #[test]
    fn gradient_of_linear_ramp_is_constant() {
        let (w, h) = (8, 6);
        let mut nocs = vec![[0.0; 3]; w * h];
        for y in 0..h {
            for x in 0..w {
                nocs[y * w + x] = [0.01 * x as f64, 0.02 * y as f64, 0.5];
            }
        }
        let g = screen_gradient(&nocs, &vec![true; w * h], w, h);
        for px in &g {
            assert!((px[0][0] - 0.01).abs() < 1e-15 && px[0][1].abs() < 1e-15);
            assert!(px[1][0].abs() < 1e-15 && (px[1][1] - 0.02).abs() < 1e-15);
            assert_eq!(px[2], [0.0, 0.0]);
        }
    }

    #[test]
    fn gradient_of_quadratic_field() {
        // c(u, v) = a u^2 + b u v + c v^2 with random coefficients; central
        // differences are exact for quadratics in the interior.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (w, h) = (12, 10);
        for _ in 0..20 {
            let (a, b, c): (f64, f64, f64) = (
                rng.random_range(-1e-3..1e-3),
                rng.random_range(-1e-3..1e-3),
                rng.random_range(-1e-3..1e-3),
            );
            let f = |u: f64, v: f64| a * u * u + b * u * v + c * v * v;
            let nocs: Vec<[f64; 3]> = (0..w * h)
                .map(|i| {
                    let (u, v) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                    [f(u, v), 0.0, 0.0]
                })
                .collect();
            let g = screen_gradient(&nocs, &vec![true; w * h], w, h);
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
                    let du = 2.0 * a * u + b * v;
                    let dv = b * u + 2.0 * c * v;
                    let px = g[y * w + x][0];
                    assert!((px[0] - du).abs() < 1e-12 && (px[1] - dv).abs() < 1e-12);
                }
            }
            // One-sided differences at the border are off by O(pixel^2)
            // curvature terms.
            let px = g[0][0];
            assert!((px[0] - (2.0 * a * 0.5 + b * 0.5)).abs() <= a.abs() + 1e-12);
        }
    }

    #[test]
    fn gradient_constant_and_isolated() {
        let (w, h) = (5, 5);
        let nocs = vec![[0.3, 0.3, 0.3]; w * h];
        let g = screen_gradient(&nocs, &vec![true; w * h], w, h);
        assert!(g.iter().all(|p| *p == [[0.0; 2]; 3]));
        let mut mask = vec![false; w * h];
        mask[12] = true;
        let ramp: Vec<[f64; 3]> = (0..w * h).map(|i| [i as f64, 0.0, 0.0]).collect();
        let g = screen_gradient(&ramp, &mask, w, h);
        assert_eq!(g[12], [[0.0; 2]; 3]);
    }
}
