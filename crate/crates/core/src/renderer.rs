//! Deep-texture rasterization.
//!
//! Every pixel center `(x, y)` is tested against the projected triangles;
//! the nearest covering face wins (z-buffer) and the pixel feature is the
//! image-space barycentric blend of that face's three vertex textures.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{pixel_jacobian_with, rotation_jacobian, CameraIntrinsics, Pose6, Vec2, Vec3};
use crate::mesh::TexturedMesh;

/// Faces with any vertex at or below this camera depth are skipped.
pub const NEAR_CLIP: f64 = 1e-6;
/// Faces whose doubled image-space area is below this are skipped.
pub const DEGENERATE_AREA: f64 = 1e-12;
/// Depths closer than this are considered equal; the lower face index wins.
pub const DEPTH_TIE: f64 = 1e-12;

/// `height × width × channels` feature buffer with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
    mask: Vec<bool>,
}

impl FeatureImage {
    pub fn empty(width: usize, height: usize, channels: usize) -> Self {
        FeatureImage {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            mask: vec![false; width * height],
        }
    }

    /// Builds an image from raw buffers; unmasked entries are zeroed.
    pub fn from_parts(
        width: usize,
        height: usize,
        channels: usize,
        mut data: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("feature images need at least one channel"));
        }
        if data.len() != width * height * channels || mask.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "buffers of {} values / {} mask entries do not match {width}x{height}x{channels}",
                data.len(),
                mask.len()
            )));
        }
        for (p, &m) in mask.iter().enumerate() {
            let px = &mut data[p * channels..(p + 1) * channels];
            if m {
                if px.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("masked feature values must be finite"));
                }
            } else {
                px.fill(0.0);
            }
        }
        Ok(FeatureImage {
            width,
            height,
            channels,
            data,
            mask,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn same_shape(&self, other: &FeatureImage) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Splits into `(data, mask)` for in-place corruption by callers.
    pub fn into_parts(self) -> (Vec<f64>, Vec<bool>) {
        (self.data, self.mask)
    }
}

/// Rendered features plus the per-pixel bookkeeping needed for Jacobians
/// and texture gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub feature: FeatureImage,
    /// Camera-frame depth, `+∞` where empty.
    pub depth: Vec<f64>,
    /// Covering face, `-1` where empty.
    pub face_index: Vec<i64>,
    /// Barycentric weights in the face's own vertex order.
    pub bary: Vec<[f64; 3]>,
    /// Object-frame point interpolated with `bary`.
    pub world_point: Vec<Vec3>,
    /// Covered pixels, in the order they were first drawn.
    covered: Vec<usize>,
}

impl RenderOutput {
    /// An empty render of the given shape.
    pub fn blank(width: usize, height: usize, channels: usize) -> Self {
        let n = width * height;
        RenderOutput {
            feature: FeatureImage::empty(width, height, channels),
            depth: vec![f64::INFINITY; n],
            face_index: vec![-1; n],
            bary: vec![[0.0; 3]; n],
            world_point: vec![Vec3::zeros(); n],
            covered: Vec::new(),
        }
    }

    /// Indices of covered pixels.
    pub fn covered(&self) -> &[usize] {
        &self.covered
    }

    fn clear(&mut self) {
        let d = self.feature.channels;
        for &idx in &self.covered {
            self.depth[idx] = f64::INFINITY;
            self.face_index[idx] = -1;
            self.bary[idx] = [0.0; 3];
            self.world_point[idx] = Vec3::zeros();
            self.feature.mask[idx] = false;
            self.feature.data[idx * d..(idx + 1) * d].fill(0.0);
        }
        self.covered.clear();
    }

    pub fn width(&self) -> usize {
        self.feature.width
    }

    pub fn height(&self) -> usize {
        self.feature.height
    }

    pub fn mask(&self) -> &[bool] {
        &self.feature.mask
    }

    pub fn is_empty(&self) -> bool {
        !self.feature.mask.iter().any(|&m| m)
    }
}

#[inline]
fn edge(a: &Vec2, b: &Vec2, p: &Vec2) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Top or left edge for positively oriented triangles (image `y` grows down).
#[inline]
fn is_top_left(a: &Vec2, b: &Vec2) -> bool {
    let d = b - a;
    d.y < 0.0 || (d.y == 0.0 && d.x > 0.0)
}

#[inline]
fn covers(e: f64, top_left: bool) -> bool {
    e > 0.0 || (e == 0.0 && top_left)
}

/// Rasterizes `mesh` under `pose` into a feature image with z-buffer visibility.
pub fn rasterize(mesh: &TexturedMesh, pose: &Pose6, k: &CameraIntrinsics) -> Result<RenderOutput> {
    k.validate()?;
    let mut out = RenderOutput::blank(k.width, k.height, mesh.channels());
    rasterize_into(&mut out, mesh, pose, k)?;
    Ok(out)
}

/// [`rasterize`] reusing the buffers of `out`, which is resized if its
/// shape differs.
pub fn rasterize_into(out: &mut RenderOutput, mesh: &TexturedMesh, pose: &Pose6, k: &CameraIntrinsics) -> Result<()> {
    k.validate()?;
    let r = pose.rotation()?;
    let (w, h, d) = (k.width, k.height, mesh.channels());
    if out.width() != w || out.height() != h || out.feature.channels != d {
        *out = RenderOutput::blank(w, h, d);
    } else {
        out.clear();
    }

    let cam: Vec<Vec3> = mesh.vertices().iter().map(|v| pose.apply(&r, v)).collect();
    let screen: Vec<Vec2> = cam
        .iter()
        .map(|c| {
            let z = c.z.max(NEAR_CLIP);
            Vec2::new(k.fx * c.x / z + k.px, k.fy * c.y / z + k.py)
        })
        .collect();

    let RenderOutput {
        feature,
        depth,
        face_index,
        bary,
        world_point,
        covered,
    } = out;

    for (fi, face) in mesh.faces().iter().enumerate() {
        if face.iter().any(|&v| cam[v].z <= NEAR_CLIP) {
            continue;
        }
        // Work in a positively oriented vertex order; `order[j]` is the
        // position in the original face of the j-th working vertex.
        let mut order = [0usize, 1, 2];
        let mut area = edge(&screen[face[0]], &screen[face[1]], &screen[face[2]]);
        if area.abs() < DEGENERATE_AREA || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            order = [0, 2, 1];
            area = -area;
        }
        let v = order.map(|j| face[j]);
        let (a, b, c) = (screen[v[0]], screen[v[1]], screen[v[2]]);
        let z = [cam[v[0]].z, cam[v[1]].z, cam[v[2]].z];
        let tl = [is_top_left(&b, &c), is_top_left(&c, &a), is_top_left(&a, &b)];

        let xmin = a.x.min(b.x).min(c.x).ceil().max(0.0);
        let ymin = a.y.min(b.y).min(c.y).ceil().max(0.0);
        let xmax = a.x.max(b.x).max(c.x).floor().min((w - 1) as f64);
        let ymax = a.y.max(b.y).max(c.y).floor().min((h - 1) as f64);
        if xmin > xmax || ymin > ymax {
            continue;
        }
        let inv_area = 1.0 / area;
        for y in (ymin as usize)..=(ymax as usize) {
            let row = y * w;
            for x in (xmin as usize)..=(xmax as usize) {
                let p = Vec2::new(x as f64, y as f64);
                let e0 = edge(&b, &c, &p);
                let e1 = edge(&c, &a, &p);
                let e2 = edge(&a, &b, &p);
                if !(covers(e0, tl[0]) && covers(e1, tl[1]) && covers(e2, tl[2])) {
                    continue;
                }
                let l = [e0 * inv_area, e1 * inv_area, e2 * inv_area];
                let zp = l[0] * z[0] + l[1] * z[1] + l[2] * z[2];
                let idx = row + x;
                if zp < depth[idx] - DEPTH_TIE {
                    if face_index[idx] < 0 {
                        covered.push(idx);
                    }
                    depth[idx] = zp;
                    face_index[idx] = fi as i64;
                    let mut out = [0.0; 3];
                    for j in 0..3 {
                        out[order[j]] = l[j];
                    }
                    bary[idx] = out;
                }
            }
        }
    }

    let textures = mesh.textures();
    for &idx in covered.iter() {
        feature.mask[idx] = true;
        let face = mesh.faces()[face_index[idx] as usize];
        let l = bary[idx];
        let px = &mut feature.data[idx * d..(idx + 1) * d];
        let mut wp = Vec3::zeros();
        for j in 0..3 {
            let t = &textures[face[j] * d..(face[j] + 1) * d];
            for (o, &tv) in px.iter_mut().zip(t) {
                *o += l[j] * tv;
            }
            wp += mesh.vertices()[face[j]] * l[j];
        }
        world_point[idx] = wp;
    }
    Ok(())
}

/// Per-pixel image gradients `(∂F/∂x, ∂F/∂y)`, each `height × width × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGradient {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    /// Pixels holding nonzero entries from the last evaluation.
    touched: Vec<usize>,
}

impl SpatialGradient {
    pub fn zeros(len: usize) -> Self {
        SpatialGradient {
            dx: vec![0.0; len],
            dy: vec![0.0; len],
            touched: Vec::new(),
        }
    }
}

/// Masked finite differences: central where both neighbors are covered,
/// one-sided where only one is, zero otherwise.
pub fn spatial_gradient(out: &RenderOutput) -> SpatialGradient {
    let f = &out.feature;
    let mut g = SpatialGradient::zeros(f.width * f.height * f.channels);
    spatial_gradient_into(out, &mut g);
    g
}

/// [`spatial_gradient`] reusing the buffers of `g`.
pub fn spatial_gradient_into(out: &RenderOutput, g: &mut SpatialGradient) {
    let f = &out.feature;
    let (w, h, d) = (f.width, f.height, f.channels);
    if g.dx.len() != w * h * d {
        *g = SpatialGradient::zeros(w * h * d);
    } else {
        for &idx in &g.touched {
            g.dx[idx * d..(idx + 1) * d].fill(0.0);
            g.dy[idx * d..(idx + 1) * d].fill(0.0);
        }
    }
    g.touched.clear();
    let masked = |x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && f.mask[y as usize * w + x as usize]
    };
    let stencil = |out: &mut [f64], center: usize, prev: Option<usize>, next: Option<usize>| {
        for c in 0..d {
            let fc = f.data[center * d + c];
            out[center * d + c] = match (prev, next) {
                (Some(p), Some(q)) => 0.5 * (f.data[q * d + c] - f.data[p * d + c]),
                (None, Some(q)) => f.data[q * d + c] - fc,
                (Some(p), None) => fc - f.data[p * d + c],
                (None, None) => 0.0,
            };
        }
    };
    for &idx in &out.covered {
        if !f.mask[idx] {
            continue;
        }
        let (xi, yi) = ((idx % w) as isize, (idx / w) as isize);
        let left = masked(xi - 1, yi).then(|| idx - 1);
        let right = masked(xi + 1, yi).then(|| idx + 1);
        let up = masked(xi, yi - 1).then(|| idx - w);
        let down = masked(xi, yi + 1).then(|| idx + w);
        stencil(&mut g.dx, idx, left, right);
        stencil(&mut g.dy, idx, up, down);
        g.touched.push(idx);
    }
}

/// Backpropagates an image-space gradient onto vertex textures:
/// `∂F(p)/∂C_i = bary_i(p)` for the face covering `p`.
pub fn scatter_texture_gradient(
    out: &RenderOutput,
    mesh: &TexturedMesh,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    let d = out.feature.channels;
    let n = out.width() * out.height();
    if upstream.len() != n * d {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient has {} values, image has {n}x{d}",
            upstream.len()
        )));
    }
    if mesh.channels() != d {
        return Err(Error::ChannelMismatch {
            expected: d,
            found: mesh.channels(),
        });
    }
    let mut grad = vec![0.0; mesh.vertex_count() * d];
    for idx in 0..n {
        let fi = out.face_index[idx];
        if fi < 0 {
            continue;
        }
        let face = mesh
            .faces()
            .get(fi as usize)
            .ok_or_else(|| Error::ShapeMismatch("render output does not belong to this mesh".into()))?;
        let up = &upstream[idx * d..(idx + 1) * d];
        for (j, &v) in face.iter().enumerate() {
            let wj = out.bary[idx][j];
            for (g, &u) in grad[v * d..(v + 1) * d].iter_mut().zip(up) {
                *g += u * wj;
            }
        }
    }
    Ok(grad)
}

/// One row of the residual Jacobian: `∂F_rend(pixel, channel)/∂P`.
pub type JacobianRow = [f64; 6];

/// Stacked Jacobian rows for every masked pixel (row-major pixel order,
/// channels innermost).
pub fn residual_jacobian(
    out: &RenderOutput,
    grads: &SpatialGradient,
    pose: &Pose6,
    k: &CameraIntrinsics,
) -> Result<Vec<JacobianRow>> {
    let pixels: Vec<usize> = (0..out.mask().len()).filter(|&i| out.mask()[i]).collect();
    residual_jacobian_for(out, grads, pose, k, &pixels)
}

/// Jacobian rows restricted to `pixels`, which must all be masked.
///
/// The surface point seen at pixel `p` moves to `x(P + ΔP)` under a pose
/// change while carrying its feature along, so the rendered value at the
/// fixed pixel changes by `-∇F(p) · ∂x/∂P · ΔP`.
pub fn residual_jacobian_for(
    out: &RenderOutput,
    grads: &SpatialGradient,
    pose: &Pose6,
    k: &CameraIntrinsics,
    pixels: &[usize],
) -> Result<Vec<JacobianRow>> {
    let d = out.feature.channels;
    let r = pose.rotation()?;
    let dr = rotation_jacobian(&pose.w);
    let mut rows = Vec::with_capacity(pixels.len() * d);
    for &idx in pixels {
        if !out.feature.mask[idx] {
            return Err(Error::Internal(format!("pixel {idx} is not covered by the render")));
        }
        let pj = pixel_jacobian_with(&r, &dr, pose, &out.world_point[idx], k).map_err(|e| {
            Error::Internal(format!("interpolated surface point at pixel {idx} is not in front of the camera: {e}"))
        })?;
        for c in 0..d {
            let gx = grads.dx[idx * d + c];
            let gy = grads.dy[idx * d + c];
            let mut row = [0.0; 6];
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = -(gx * pj[(0, j)] + gy * pj[(1, j)]);
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

fn normalize_to_bytes(values: impl Iterator<Item = Option<f64>> + Clone) -> Vec<u8> {
    let (lo, hi) = values
        .clone()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    values
        .map(|v| match v {
            Some(v) if lo.is_finite() => (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8,
            _ => 0,
        })
        .collect()
}

/// Binary PGM (`P5`) or PPM (`P6`) with maxval 255.
pub fn encode_netpbm(width: usize, height: usize, channels: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        other => return Err(Error::invalid(format!("netpbm supports 1 or 3 channels, got {other}"))),
    };
    if pixels.len() != width * height * channels {
        return Err(Error::ShapeMismatch("pixel buffer does not match image size".into()));
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Writes `mask.pgm`, one min-max normalized `feature_cK.pgm` per channel,
/// `feature.ppm` when there are exactly three channels, and `depth.csv`.
pub fn dump_render(out: &RenderOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let f = &out.feature;
    let (w, h, d) = (f.width, f.height, f.channels);
    let write = |name: &str, bytes: Vec<u8>| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };

    let mask: Vec<u8> = f.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write("mask.pgm", encode_netpbm(w, h, 1, &mask)?)?;

    let mut per_channel = Vec::with_capacity(d);
    for c in 0..d {
        let vals = (0..w * h).map(|i| f.mask[i].then(|| f.data[i * d + c]));
        let bytes = normalize_to_bytes(vals);
        write(&format!("feature_c{c}.pgm"), encode_netpbm(w, h, 1, &bytes)?)?;
        per_channel.push(bytes);
    }
    if d == 3 {
        let rgb: Vec<u8> = (0..w * h).flat_map(|i| [per_channel[0][i], per_channel[1][i], per_channel[2][i]]).collect();
        write("feature.ppm", encode_netpbm(w, h, 3, &rgb)?)?;
    }

    let mut csv = String::new();
    for y in 0..h {
        let row: Vec<String> = (0..w)
            .map(|x| {
                let z = out.depth[y * w + x];
                if z.is_finite() { z.to_string() } else { String::new() }
            })
            .collect();
        let _ = writeln!(csv, "{}", row.join(","));
    }
    write("depth.csv", csv.into_bytes())
}
