//! File formats: OBJ/PLY meshes, JSON documents, and the PNG encodings of
//! NOCS maps, masks and depth.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::correspondence::NocsMap;
use crate::error::{Error, Result};
use crate::geometry::{Mesh, Vec3};

fn parse_err(context: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        context: context.into(),
        message: message.into(),
    }
}

/// Loads a mesh by extension (`.obj` or `.ply`).
pub fn read_mesh(path: &Path) -> Result<Mesh> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("obj") => read_obj(path),
        Some("ply") => parse_ply(&fs::read_to_string(path)?, &path.display().to_string()),
        _ => Err(parse_err(
            path.display().to_string(),
            "unsupported mesh extension (expected .obj or .ply)",
        )),
    }
}

/// Polygonal faces are fan-triangulated; multiple objects are merged.
pub fn read_obj(path: &Path) -> Result<Mesh> {
    let opts = tobj::LoadOptions {
        triangulate: true,
        single_index: false,
        ..Default::default()
    };
    let (models, _) =
        tobj::load_obj(path, &opts).map_err(|e| parse_err(path.display().to_string(), e.to_string()))?;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for m in models {
        let base = vertices.len();
        let pos = &m.mesh.positions;
        vertices.extend(
            pos.chunks_exact(3)
                .map(|p| Vec3::new(p[0], p[1], p[2])),
        );
        faces.extend(
            m.mesh
                .indices
                .chunks_exact(3)
                .map(|f| [base + f[0] as usize, base + f[1] as usize, base + f[2] as usize]),
        );
    }
    Mesh::new(vertices, faces)
}

/// ASCII PLY with `x y z` vertex properties (extra properties ignored) and
/// face index lists. Polygons are fan-triangulated.
pub fn parse_ply(text: &str, context: &str) -> Result<Mesh> {
    let mut lines = text.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(parse_err(context, "missing 'ply' magic"));
    }
    let mut n_vertices = None;
    let mut n_faces = 0usize;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current = "";
    for line in lines.by_ref() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(parse_err(context, format!("unsupported PLY format '{fmt}'")));
            }
            ["element", "vertex", n] => {
                n_vertices = Some(n.parse().map_err(|_| parse_err(context, "bad vertex count"))?);
                current = "vertex";
            }
            ["element", "face", n] => {
                n_faces = n.parse().map_err(|_| parse_err(context, "bad face count"))?;
                current = "face";
            }
            ["element", ..] => current = "other",
            ["property", "list", ..] => {}
            ["property", _, name] if current == "vertex" => vertex_props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let n_vertices = n_vertices.ok_or_else(|| parse_err(context, "no vertex element"))?;
    let col = |name: &str| {
        vertex_props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| parse_err(context, format!("vertex property '{name}' missing")))
    };
    let (ix, iy, iz) = (col("x")?, col("y")?, col("z")?);

    let mut body = lines.filter(|l| !l.is_empty());
    let mut vertices = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let line = body.next().ok_or_else(|| parse_err(context, "truncated vertex list"))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(context, format!("bad vertex line '{line}'")))?;
        if vals.len() < vertex_props.len() {
            return Err(parse_err(context, format!("short vertex line '{line}'")));
        }
        vertices.push(Vec3::new(vals[ix], vals[iy], vals[iz]));
    }
    let mut faces = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let line = body.next().ok_or_else(|| parse_err(context, "truncated face list"))?;
        let idx: Vec<usize> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(context, format!("bad face line '{line}'")))?;
        let (&n, rest) = idx
            .split_first()
            .ok_or_else(|| parse_err(context, "empty face line"))?;
        if n < 3 || rest.len() < n {
            return Err(parse_err(context, format!("bad face line '{line}'")));
        }
        for k in 1..n - 1 {
            faces.push([rest[0], rest[k], rest[k + 1]]);
        }
    }
    Mesh::new(vertices, faces)
}

pub fn write_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    let mut s = String::new();
    for v in mesh.vertices() {
        s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for f in mesh.faces() {
        s.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_ply(mesh: &Mesh, path: &Path) -> Result<()> {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices().len(),
        mesh.faces().len()
    );
    for v in mesh.vertices() {
        s.push_str(&format!("{} {} {}\n", v.x, v.y, v.z));
    }
    for f in mesh.faces() {
        s.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path.display().to_string(), e.to_string()))
}

/// Pretty-printed with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// NOCS bins as an 8-bit RGB image; background pixels are black.
pub fn write_nocs_png(map: &NocsMap, path: &Path) -> Result<()> {
    let mut img = RgbImage::new(map.width as u32, map.height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        px.0 = if map.mask[i] { map.bins[i] } else { [0; 3] };
    }
    img.save(path)?;
    Ok(())
}

/// Mask as 8-bit grayscale, 255 = foreground.
pub fn write_mask_png(mask: &[bool], width: usize, height: usize, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([if mask[y as usize * width + x as usize] { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.pixels().map(|p| p.0[0] >= 128).collect(), w, h))
}

/// Pairs a NOCS PNG with its mask PNG.
pub fn read_nocs_map(nocs_path: &Path, mask_path: &Path) -> Result<NocsMap> {
    let img = image::open(nocs_path)?.to_rgb8();
    let (mask, w, h) = read_mask_png(mask_path)?;
    if (img.width() as usize, img.height() as usize) != (w, h) {
        return Err(Error::ShapeMismatch(format!(
            "{} is {}x{} but {} is {w}x{h}",
            nocs_path.display(),
            img.width(),
            img.height(),
            mask_path.display()
        )));
    }
    let bins = img
        .pixels()
        .zip(&mask)
        .map(|(p, &m)| if m { p.0 } else { [0; 3] })
        .collect();
    Ok(NocsMap {
        width: w,
        height: h,
        mask,
        bins,
    })
}

/// Sidecar stored next to a depth PNG.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthSidecar {
    /// Model units per count.
    pub scale: f64,
}

pub fn depth_sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// Writes 16-bit counts plus the `{"scale": ..}` sidecar.
pub fn write_depth_png(
    counts: &[u16],
    width: usize,
    height: usize,
    scale: f64,
    path: &Path,
) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, counts.to_vec())
            .ok_or_else(|| Error::ShapeMismatch("depth buffer size".into()))?;
    img.save(path)?;
    write_json(&depth_sidecar_path(path), &DepthSidecar { scale })
}

/// Depth in model units; holes (count 0) read as 0.
pub fn read_depth_png(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let side: DepthSidecar = read_json(&depth_sidecar_path(path))?;
    if !(side.scale > 0.0) {
        return Err(parse_err(path.display().to_string(), "depth scale must be positive"));
    }
    let img = image::open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.pixels().map(|p| p.0[0] as f64 * side.scale).collect(), w, h))
}
