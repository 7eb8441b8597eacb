//! Procedural test meshes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Mesh, Vec3};

/// Axis-aligned cube of the given side, centered at the origin.
pub fn cube(side: f64) -> Mesh {
    cuboid(side, side, side)
}

/// Axis-aligned box centered at the origin.
pub fn cuboid(sx: f64, sy: f64, sz: f64) -> Mesh {
    let h = Vec3::new(sx, sy, sz) * 0.5;
    let vertices: Vec<Vec3> = (0..8)
        .map(|i| {
            Vec3::new(
                if i & 1 == 0 { -h.x } else { h.x },
                if i & 2 == 0 { -h.y } else { h.y },
                if i & 4 == 0 { -h.z } else { h.z },
            )
        })
        .collect();
    let quads = [
        [0, 2, 3, 1], // z-
        [4, 5, 7, 6], // z+
        [0, 1, 5, 4], // y-
        [2, 6, 7, 3], // y+
        [0, 4, 6, 2], // x-
        [1, 3, 7, 5], // x+
    ];
    let faces = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    Mesh::new(vertices, faces).expect("cuboid is valid")
}

/// Closed cylinder around the model Z axis, centered at the origin.
pub fn cylinder(radius: f64, height: f64, segments: usize) -> Mesh {
    let segments = segments.max(3);
    let mut vertices = Vec::with_capacity(2 * segments + 2);
    for z in [-0.5 * height, 0.5 * height] {
        for s in 0..segments {
            let a = std::f64::consts::TAU * s as f64 / segments as f64;
            vertices.push(Vec3::new(radius * a.cos(), radius * a.sin(), z));
        }
    }
    let bottom_center = vertices.len();
    vertices.push(Vec3::new(0.0, 0.0, -0.5 * height));
    let top_center = vertices.len();
    vertices.push(Vec3::new(0.0, 0.0, 0.5 * height));

    let mut faces = Vec::with_capacity(4 * segments);
    for s in 0..segments {
        let n = (s + 1) % segments;
        let (b0, b1, t0, t1) = (s, n, s + segments, n + segments);
        faces.push([b0, b1, t1]);
        faces.push([b0, t1, t0]);
        faces.push([bottom_center, b1, b0]);
        faces.push([top_center, t0, t1]);
    }
    Mesh::new(vertices, faces).expect("cylinder is valid")
}

/// Smooth, asymmetric closed surface: a UV sphere with seeded low-frequency
/// radial bumps and anisotropic axes. `size` is roughly the longest extent.
pub fn blob(size: f64, rings: usize, segments: usize, seed: u64) -> Mesh {
    let rings = rings.max(3);
    let segments = segments.max(3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|k| {
            (
                rng.random_range(0.06..0.14) / (k as f64 + 1.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(1.0..3.0_f64).round(),
                rng.random_range(1.0..3.0_f64).round(),
            )
        })
        .collect();
    let axes = Vec3::new(0.5, 0.37, 0.28) * size;
    let radius = |theta: f64, phi: f64| -> f64 {
        1.0 + coeffs
            .iter()
            .map(|&(amp, phase, m, n)| amp * (m * phi + phase).sin() * (n * theta).cos())
            .sum::<f64>()
            + 0.12 * theta.cos()
    };

    let mut vertices = Vec::new();
    vertices.push(Vec3::new(0.0, 0.0, axes.z * radius(0.0, 0.0)));
    for r in 1..rings {
        let theta = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let phi = std::f64::consts::TAU * s as f64 / segments as f64;
            let rad = radius(theta, phi);
            vertices.push(Vec3::new(
                axes.x * rad * theta.sin() * phi.cos(),
                axes.y * rad * theta.sin() * phi.sin(),
                axes.z * rad * theta.cos(),
            ));
        }
    }
    let south = vertices.len();
    vertices.push(Vec3::new(
        0.0,
        0.0,
        -axes.z * radius(std::f64::consts::PI, 0.0),
    ));

    let ring = |r: usize, s: usize| 1 + (r - 1) * segments + s % segments;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(1, s), ring(1, s + 1)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (ring(r, s), ring(r, s + 1), ring(r + 1, s), ring(r + 1, s + 1));
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    for s in 0..segments {
        faces.push([south, ring(rings - 1, s + 1), ring(rings - 1, s)]);
    }
    Mesh::new(vertices, faces).expect("blob is valid")
}

/// Looks up a procedural mesh by name: `cube`, `box`, `cylinder`, `blob`.
/// All are scaled to a longest extent of `size` model units.
pub fn builtin(name: &str, size: f64) -> Result<Mesh> {
    match name {
        "cube" => Ok(cube(size)),
        "box" => Ok(cuboid(size, 0.7 * size, 0.45 * size)),
        "cylinder" => Ok(cylinder(0.3 * size, size, 48)),
        "blob" => Ok(blob(size, 16, 32, 7)),
        other => Err(Error::InvalidConfig(format!("unknown builtin mesh '{other}'"))),
    }
}
