//! Triangle meshes carrying per-vertex feature textures.
//!
//! Geometry is shared behind `Arc` so replacing textures (as training and
//! finite-difference probes do constantly) never copies vertices or faces.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub type Face = [usize; 3];

const TEXTURE_MAGIC: &[u8; 4] = b"RPTX";

#[derive(Debug, Clone, PartialEq)]
pub struct TexturedMesh {
    vertices: Arc<Vec<Vec3>>,
    faces: Arc<Vec<Face>>,
    colors: Option<Arc<Vec<[f64; 3]>>>,
    textures: Vec<f64>,
    channels: usize,
    symmetric: bool,
}

impl TexturedMesh {
    /// Builds a mesh, validating face indices and texture shape.
    ///
    /// `textures` is row-major by vertex: `textures[n * channels + c]`.
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<Face>,
        textures: Vec<f64>,
        channels: usize,
    ) -> Result<Self> {
        validate_geometry(&vertices, &faces)?;
        let mesh = TexturedMesh {
            vertices: Arc::new(vertices),
            faces: Arc::new(faces),
            colors: None,
            textures: Vec::new(),
            channels,
            symmetric: false,
        };
        mesh.with_textures(textures, channels)
    }

    /// Mesh with all-zero textures of `channels` channels.
    pub fn untextured(vertices: Vec<Vec3>, faces: Vec<Face>, channels: usize) -> Result<Self> {
        let n = vertices.len();
        TexturedMesh::new(vertices, faces, vec![0.0; n * channels], channels)
    }

    /// Attaches per-vertex RGB colors in `[0, 1]`.
    pub fn with_colors(mut self, colors: Vec<[f64; 3]>) -> Result<Self> {
        if colors.len() != self.vertices.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} colors for {} vertices",
                colors.len(),
                self.vertices.len()
            )));
        }
        if colors.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("colors must be finite"));
        }
        self.colors = Some(Arc::new(colors));
        Ok(self)
    }

    pub fn with_symmetric(mut self, symmetric: bool) -> Self {
        self.symmetric = symmetric;
        self
    }

    /// Same geometry with replaced textures.
    pub fn with_textures(&self, textures: Vec<f64>, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("texture channel count must be at least 1"));
        }
        let n = self.vertices.len();
        if textures.len() != n * channels {
            return Err(Error::ShapeMismatch(format!(
                "texture buffer has {} values, expected {n} vertices x {channels} channels",
                textures.len()
            )));
        }
        if textures.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("textures must be finite"));
        }
        Ok(TexturedMesh {
            vertices: Arc::clone(&self.vertices),
            faces: Arc::clone(&self.faces),
            colors: self.colors.clone(),
            textures,
            channels,
            symmetric: self.symmetric,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn colors(&self) -> Option<&[[f64; 3]]> {
        self.colors.as_deref().map(|c| c.as_slice())
    }

    pub fn textures(&self) -> &[f64] {
        &self.textures
    }

    pub fn texture(&self, vertex: usize) -> &[f64] {
        &self.textures[vertex * self.channels..(vertex + 1) * self.channels]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Tagged as rotationally symmetric (ADD-S is the appropriate distance).
    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn shares_geometry_with(&self, other: &TexturedMesh) -> bool {
        Arc::ptr_eq(&self.vertices, &other.vertices) && Arc::ptr_eq(&self.faces, &other.faces)
    }

    pub fn stats(&self) -> Result<MeshStats> {
        mesh_stats(self)
    }
}

fn validate_geometry(vertices: &[Vec3], faces: &[Face]) -> Result<()> {
    if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
        return Err(Error::invalid("vertex coordinates must be finite"));
    }
    for (fi, f) in faces.iter().enumerate() {
        for &idx in f {
            if idx >= vertices.len() {
                return Err(Error::IndexOutOfRange {
                    face: fi,
                    index: idx,
                    vertex_count: vertices.len(),
                });
            }
        }
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            return Err(Error::invalid(format!(
                "face {fi} repeats a vertex index: {f:?}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshStats {
    pub diameter: f64,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
    pub vertex_count: usize,
    pub face_count: usize,
}

/// Exact diameter (maximum pairwise vertex distance) and bounding box.
pub fn mesh_stats(mesh: &TexturedMesh) -> Result<MeshStats> {
    let v = mesh.vertices();
    if v.is_empty() {
        return Err(Error::invalid("mesh has no vertices"));
    }
    let mut lo = v[0];
    let mut hi = v[0];
    for p in v {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let mut best = 0.0f64;
    for (i, a) in v.iter().enumerate() {
        for b in &v[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    Ok(MeshStats {
        diameter: best.sqrt(),
        bbox_min: lo,
        bbox_max: hi,
        vertex_count: v.len(),
        face_count: mesh.face_count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TextureInit {
    Zeros,
    UniformRandom { lo: f64, hi: f64, seed: u64 },
    FromColors,
}

impl Default for TextureInit {
    fn default() -> Self {
        TextureInit::UniformRandom {
            lo: -0.1,
            hi: 0.1,
            seed: 0,
        }
    }
}

/// Replaces the textures of `mesh` according to `scheme`.
pub fn init_textures(mesh: &TexturedMesh, scheme: TextureInit, channels: usize) -> Result<TexturedMesh> {
    let n = mesh.vertex_count();
    let textures = match scheme {
        TextureInit::Zeros => vec![0.0; n * channels],
        TextureInit::UniformRandom { lo, hi, seed } => {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!(
                    "uniform texture range must satisfy lo < hi, got [{lo}, {hi}]"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n * channels).map(|_| rng.random_range(lo..=hi)).collect()
        }
        TextureInit::FromColors => {
            let colors = mesh
                .colors()
                .ok_or_else(|| Error::invalid("mesh carries no vertex colors"))?;
            if channels != 3 {
                return Err(Error::ChannelMismatch {
                    expected: 3,
                    found: channels,
                });
            }
            colors.iter().flatten().copied().collect()
        }
    };
    mesh.with_textures(textures, channels)
}

/// Parses the OBJ subset: `v x y z [r g b]`, `f i j k` (1-based) and `#`
/// comments. A comment line `# symmetric` tags the mesh as symmetric.
pub fn parse_obj(text: &str, channels: usize, origin: &Path) -> Result<TexturedMesh> {
    let perr = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut vertices = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut faces = Vec::new();
    let mut face_lines = Vec::new();
    let mut symmetric = false;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if comment.trim().eq_ignore_ascii_case("symmetric") {
                symmetric = true;
            }
            continue;
        }
        let mut tokens = line.split_whitespace();
        let keyword = tokens.next().unwrap_or_default();
        let rest: Vec<&str> = tokens.collect();
        match keyword {
            "v" => {
                let nums = rest
                    .iter()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| perr(lineno, format!("invalid number '{t}'")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if nums.iter().any(|v| !v.is_finite()) {
                    return Err(perr(lineno, "non-finite vertex value".into()));
                }
                match nums.len() {
                    3 => {}
                    6 => colors.push([nums[3], nums[4], nums[5]]),
                    n => {
                        return Err(perr(
                            lineno,
                            format!("vertex needs 3 coordinates or 3 coordinates + rgb, got {n} values"),
                        ))
                    }
                }
                if !colors.is_empty() && colors.len() != vertices.len() + 1 {
                    return Err(perr(lineno, "vertex colors must be given for all vertices or none".into()));
                }
                vertices.push(Vec3::new(nums[0], nums[1], nums[2]));
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(perr(
                        lineno,
                        format!("only triangular faces are supported, got {} indices", rest.len()),
                    ));
                }
                let mut face = [0usize; 3];
                for (slot, tok) in face.iter_mut().zip(&rest) {
                    let head = tok.split('/').next().unwrap_or_default();
                    let one_based: usize = head
                        .parse()
                        .map_err(|_| perr(lineno, format!("invalid face index '{tok}'")))?;
                    if one_based == 0 {
                        return Err(perr(lineno, "face indices are 1-based".into()));
                    }
                    *slot = one_based - 1;
                }
                faces.push(face);
                face_lines.push(lineno);
            }
            "vn" | "vt" | "o" | "g" | "s" | "usemtl" | "mtllib" => {}
            other => return Err(perr(lineno, format!("unsupported directive '{other}'"))),
        }
    }
    if !colors.is_empty() && colors.len() != vertices.len() {
        return Err(perr(0, "vertex colors must be given for all vertices or none".into()));
    }
    for (fi, (face, &lineno)) in faces.iter().zip(&face_lines).enumerate() {
        if let Some(&bad) = face.iter().find(|&&i| i >= vertices.len()) {
            // Reported 1-based, as written in the file.
            return Err(Error::IndexOutOfRange {
                face: fi + 1,
                index: bad + 1,
                vertex_count: vertices.len(),
            });
        }
        if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
            return Err(perr(lineno, "face repeats a vertex index".into()));
        }
    }

    let mut mesh = TexturedMesh::untextured(vertices, faces, channels)?.with_symmetric(symmetric);
    if !colors.is_empty() {
        if colors.iter().flatten().any(|&c| c > 1.0) {
            for c in colors.iter_mut().flatten() {
                *c /= 255.0;
            }
        }
        mesh = mesh.with_colors(colors)?;
        if channels == 3 {
            mesh = init_textures(&mesh, TextureInit::FromColors, 3)?;
        }
    }
    Ok(mesh)
}

pub fn load_mesh(path: impl AsRef<Path>, channels: usize) -> Result<TexturedMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, channels, path)
}

pub fn to_obj(mesh: &TexturedMesh) -> String {
    let mut out = String::new();
    if mesh.is_symmetric() {
        out.push_str("# symmetric\n");
    }
    for (i, v) in mesh.vertices().iter().enumerate() {
        let _ = write!(out, "v {} {} {}", v.x, v.y, v.z);
        if let Some(c) = mesh.colors() {
            let _ = write!(out, " {} {} {}", c[i][0], c[i][1], c[i][2]);
        }
        out.push('\n');
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn save_obj(mesh: &TexturedMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_obj(mesh)).map_err(|e| Error::io(path, e))
}

/// Encodes textures in the binary sidecar layout: `RPTX`, u32 N, u32 d,
/// then N·d little-endian f64 values.
pub fn encode_textures(textures: &[f64], channels: usize) -> Result<Vec<u8>> {
    if channels == 0 || textures.len() % channels != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} texture values do not divide into {channels} channels",
            textures.len()
        )));
    }
    let n = u32::try_from(textures.len() / channels)
        .map_err(|_| Error::invalid("too many vertices for the texture sidecar"))?;
    let d = u32::try_from(channels).map_err(|_| Error::invalid("too many channels"))?;
    let mut buf = Vec::with_capacity(12 + textures.len() * 8);
    buf.extend_from_slice(TEXTURE_MAGIC);
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    for v in textures {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Decodes a binary sidecar; returns `(values, vertex_count, channels)`.
pub fn decode_textures(bytes: &[u8]) -> Result<(Vec<f64>, usize, usize)> {
    if bytes.len() < 12 || &bytes[..4] != TEXTURE_MAGIC {
        return Err(Error::invalid("texture sidecar lacks the RPTX header"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[12..];
    if payload.len() != n * d * 8 {
        return Err(Error::ShapeMismatch(format!(
            "sidecar declares {n}x{d} values but carries {} bytes",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((values, n, d))
}

pub fn textures_to_csv(textures: &[f64], channels: usize) -> String {
    let mut out = String::new();
    for row in textures.chunks(channels) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn textures_from_csv(text: &str, origin: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let mut values = Vec::new();
    let mut channels = None;
    let mut rows = 0;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| {
                t.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: origin.to_path_buf(),
                    line: idx + 1,
                    message: format!("invalid number '{t}'"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        match channels {
            None => channels = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: idx + 1,
                    message: format!("expected {d} values, found {}", row.len()),
                })
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    Ok((values, rows, channels.unwrap_or(0)))
}

/// Writes textures; a `.csv` extension selects the CSV form, anything else
/// the binary sidecar.
pub fn save_textures(mesh: &TexturedMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_csv(path) {
        textures_to_csv(mesh.textures(), mesh.channels()).into_bytes()
    } else {
        encode_textures(mesh.textures(), mesh.channels())?
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a texture file and attaches it to `mesh`, which must match its
/// vertex count.
pub fn load_textures(mesh: &TexturedMesh, path: impl AsRef<Path>) -> Result<TexturedMesh> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (values, n, d) = if is_csv(path) {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::invalid(format!("{} is not UTF-8", path.display())))?;
        textures_from_csv(&text, path)?
    } else {
        decode_textures(&bytes)?
    };
    if n != mesh.vertex_count() {
        return Err(Error::ShapeMismatch(format!(
            "texture file has {n} vertices, mesh has {}",
            mesh.vertex_count()
        )));
    }
    mesh.with_textures(values, d)
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false)
}

/// Edges not shared by exactly two faces, reported as warnings.
pub fn validate_strict(mesh: &TexturedMesh) -> Vec<String> {
    let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
    for f in mesh.faces() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            *edges.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    let mut bad: Vec<_> = edges.into_iter().filter(|&(_, c)| c != 2).collect();
    bad.sort_unstable();
    bad.into_iter()
        .map(|((a, b), c)| {
            let kind = if c == 1 { "boundary" } else { "non-manifold" };
            format!("{kind} edge ({}, {}) shared by {c} face(s)", a + 1, b + 1)
        })
        .collect()
}

/// Procedural fixture meshes.
pub mod shapes {
    use super::*;

    /// Axis-aligned box centered at the origin with consistently wound faces.
    pub fn cuboid(sx: f64, sy: f64, sz: f64) -> TexturedMesh {
        let (hx, hy, hz) = (sx / 2.0, sy / 2.0, sz / 2.0);
        let vertices = vec![
            Vec3::new(-hx, -hy, -hz),
            Vec3::new(hx, -hy, -hz),
            Vec3::new(hx, hy, -hz),
            Vec3::new(-hx, hy, -hz),
            Vec3::new(-hx, -hy, hz),
            Vec3::new(hx, -hy, hz),
            Vec3::new(hx, hy, hz),
            Vec3::new(-hx, hy, hz),
        ];
        let faces = vec![
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [1, 2, 6],
            [1, 6, 5],
            [2, 3, 7],
            [2, 7, 6],
            [3, 0, 4],
            [3, 4, 7],
        ];
        TexturedMesh::untextured(vertices, faces, 3).expect("valid cuboid")
    }

    pub fn unit_cube() -> TexturedMesh {
        cuboid(1.0, 1.0, 1.0)
    }

    /// Square plate, symmetric under quarter turns about `z`.
    pub fn square_plate(side: f64, thickness: f64) -> TexturedMesh {
        cuboid(side, side, thickness).with_symmetric(true)
    }

    /// Lumpy ellipsoid with `rings × segments` quads split into triangles.
    ///
    /// Vertex colors are a low-contrast wash, like a scanned texture-less
    /// object.
    pub fn blob(rings: usize, segments: usize, radii: Vec3) -> TexturedMesh {
        assert!(rings >= 2 && segments >= 3);
        let mut vertices = vec![Vec3::new(0.0, 0.0, radii.z)];
        let bump = |theta: f64, phi: f64| {
            1.0 + 0.08 * (3.0 * phi).sin() * theta.sin() + 0.05 * (2.0 * theta).cos()
        };
        for r in 1..rings {
            let theta = std::f64::consts::PI * r as f64 / rings as f64;
            for s in 0..segments {
                let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
                let k = bump(theta, phi);
                vertices.push(Vec3::new(
                    k * radii.x * theta.sin() * phi.cos(),
                    k * radii.y * theta.sin() * phi.sin(),
                    k * radii.z * theta.cos(),
                ));
            }
        }
        vertices.push(Vec3::new(0.0, 0.0, -radii.z));
        let south = vertices.len() - 1;
        let ring = |r: usize, s: usize| 1 + (r - 1) * segments + (s % segments);
        let mut faces = Vec::new();
        for s in 0..segments {
            faces.push([0, ring(1, s), ring(1, s + 1)]);
        }
        for r in 1..rings - 1 {
            for s in 0..segments {
                let (a, b) = (ring(r, s), ring(r, s + 1));
                let (c, d) = (ring(r + 1, s), ring(r + 1, s + 1));
                faces.push([a, c, d]);
                faces.push([a, d, b]);
            }
        }
        for s in 0..segments {
            faces.push([south, ring(rings - 1, s + 1), ring(rings - 1, s)]);
        }
        let colors = vertices
            .iter()
            .map(|v| {
                let shade = 0.55 + 0.04 * (v.x / radii.x) + 0.03 * (v.z / radii.z);
                [shade, shade * 0.9, shade * 0.8]
            })
            .collect();
        TexturedMesh::untextured(vertices, faces, 3)
            .and_then(|m| m.with_colors(colors))
            .expect("valid blob")
    }

    /// Default benchmark object: a lumpy ellipsoid about 0.15 units across
    /// with 528 triangles.
    pub fn benchmark_object() -> TexturedMesh {
        blob(12, 24, Vec3::new(0.075, 0.055, 0.045))
    }
}
