//! Finite-difference, oracle and runtime self-tests behind `repose check`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::{
    pixel_jacobian, random_unit_vector, rotation_jacobian, rotvec_to_matrix, CameraIntrinsics, Pose6, Vec2, Vec3,
};
use crate::mesh::{init_textures, shapes, TextureInit, TexturedMesh};
use crate::metrics::{add_s_score, add_score, auc_add};
use crate::optimizer::{refine, LMParams};
use crate::renderer::{rasterize, rasterize_into, scatter_texture_gradient, RenderOutput};

use super::scenario::oracle_textures;

pub const RENDER_BUDGET_MICROS: f64 = 10_000.0;
pub const ITERATION_BUDGET_MICROS: f64 = 15_000.0;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose6 {
    let angle = rng.random_range(0.0..std::f64::consts::PI * 0.95);
    Pose6::new(
        random_unit_vector(rng) * angle,
        Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(0.8..2.0)),
    )
}

/// Largest entry-wise error between `a` and `b`, as `(absolute, relative)`.
fn compare(a: &[f64], b: &[f64]) -> (f64, f64) {
    let abs = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    (abs, if scale > 0.0 { abs / scale } else { abs })
}

/// Analytic rotation and pixel Jacobians against central differences.
pub fn check_jacobians(samples: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0, 640, 480)?;
    let h = 1e-6;
    let mut worst = (0.0f64, 0.0f64);
    let mut failures = 0;
    for s in 0..samples {
        let mut pose = random_pose(&mut rng);
        if s % 10 == 0 {
            pose.w = random_unit_vector(&mut rng) * rng.random_range(1e-4..1e-2);
        }
        let dr = rotation_jacobian(&pose.w);
        let mut analytic = Vec::with_capacity(27);
        let mut numeric = Vec::with_capacity(27);
        for i in 0..3 {
            let mut wp = pose.w;
            wp[i] += h;
            let mut wm = pose.w;
            wm[i] -= h;
            let fd = (rotvec_to_matrix(&wp)?.matrix() - rotvec_to_matrix(&wm)?.matrix()) / (2.0 * h);
            analytic.extend(dr[i].iter());
            numeric.extend(fd.iter());
        }

        let r = pose.rotation()?;
        let xc = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.5..2.0));
        let xw = r.transpose().matrix() * (xc - pose.t);
        let pj = pixel_jacobian(&pose, &xw, &k)?;
        let proj = |p: &Pose6| -> Result<Vec2> {
            let c = p.apply(&p.rotation()?, &xw);
            Ok(Vec2::new(k.fx * c.x / c.z + k.px, k.fy * c.y / c.z + k.py))
        };
        let base = pose.to_vector();
        for j in 0..6 {
            let mut vp = base;
            vp[j] += h;
            let mut vm = base;
            vm[j] -= h;
            let fd = (proj(&Pose6::from_vector(&vp))? - proj(&Pose6::from_vector(&vm))?) / (2.0 * h);
            analytic.extend([pj[(0, j)], pj[(1, j)]]);
            numeric.extend([fd.x, fd.y]);
        }
        let (abs, rel) = compare(&analytic[..27], &numeric[..27]);
        let (abs2, rel2) = compare(&analytic[27..], &numeric[27..]);
        let ok = |a: f64, r: f64| r < 1e-4 || a < 1e-6;
        if !ok(abs, rel) || !ok(abs2, rel2) {
            failures += 1;
        }
        worst = (worst.0.max(rel), worst.1.max(rel2));
    }
    Ok((
        failures == 0,
        format!(
            "{samples} samples, {failures} failures, worst rel err rotation {:.2e} pixel {:.2e}",
            worst.0, worst.1
        ),
    ))
}

/// A random triangle soup in front of the camera, `n` faces.
pub fn random_scene(rng: &mut ChaCha8Rng, n: usize, k: &CameraIntrinsics, pose: &Pose6) -> Result<TexturedMesh> {
    let r = pose.rotation()?;
    let mut verts = Vec::with_capacity(3 * n);
    let mut faces = Vec::with_capacity(n);
    for f in 0..n {
        let cx = rng.random_range(-10.0..k.width as f64 + 10.0);
        let cy = rng.random_range(-10.0..k.height as f64 + 10.0);
        let size = rng.random_range(3.0..30.0);
        for _ in 0..3 {
            let z = rng.random_range(1.0..3.0);
            let u = cx + rng.random_range(-size..size);
            let v = cy + rng.random_range(-size..size);
            let xc = Vec3::new((u - k.px) * z / k.fx, (v - k.py) * z / k.fy, z);
            verts.push(r.transpose().matrix() * (xc - pose.t));
        }
        faces.push([3 * f, 3 * f + 1, 3 * f + 2]);
    }
    let mesh = TexturedMesh::untextured(verts, faces, 3)?;
    init_textures(
        &mesh,
        TextureInit::UniformRandom {
            lo: -1.0,
            hi: 1.0,
            seed: rng.random(),
        },
        3,
    )
}

/// Every-triangle, every-pixel reference: `(face, weights in face order)`.
fn brute_force_pixel(mesh: &TexturedMesh, cam: &[Vec3], screen: &[Vec2], p: Vec2) -> Option<(usize, [f64; 3], f64)> {
    let mut best: Option<(usize, [f64; 3], f64)> = None;
    for (fi, f) in mesh.faces().iter().enumerate() {
        if f.iter().any(|&v| cam[v].z <= 1e-6) {
            continue;
        }
        let (a, b, c) = (screen[f[0]], screen[f[1]], screen[f[2]]);
        let (e1, e2, q) = (b - a, c - a, p - a);
        let det = e1.x * e2.y - e1.y * e2.x;
        if det.abs() < 1e-12 {
            continue;
        }
        let l1 = (q.x * e2.y - q.y * e2.x) / det;
        let l2 = (e1.x * q.y - e1.y * q.x) / det;
        let l = [1.0 - l1 - l2, l1, l2];
        if l.iter().any(|&v| v < 0.0) {
            continue;
        }
        let z = l[0] * cam[f[0]].z + l[1] * cam[f[1]].z + l[2] * cam[f[2]].z;
        if best.is_none_or(|(_, _, bz)| z < bz - 1e-12) {
            best = Some((fi, l, z));
        }
    }
    best
}

struct OracleStats {
    face_mismatches: usize,
    bary_err: f64,
    feature_err: f64,
}

fn oracle_compare(mesh: &TexturedMesh, pose: &Pose6, k: &CameraIntrinsics, out: &RenderOutput) -> Result<OracleStats> {
    let r = pose.rotation()?;
    let cam: Vec<Vec3> = mesh.vertices().iter().map(|v| pose.apply(&r, v)).collect();
    let screen: Vec<Vec2> = cam
        .iter()
        .map(|c| Vec2::new(k.fx * c.x / c.z + k.px, k.fy * c.y / c.z + k.py))
        .collect();
    let d = mesh.channels();
    let mut stats = OracleStats {
        face_mismatches: 0,
        bary_err: 0.0,
        feature_err: 0.0,
    };
    for y in 0..k.height {
        for x in 0..k.width {
            let idx = y * k.width + x;
            let expected = brute_force_pixel(mesh, &cam, &screen, Vec2::new(x as f64, y as f64));
            let got = out.face_index[idx];
            match expected {
                None if got == -1 => {}
                Some((fi, l, _)) if got == fi as i64 => {
                    for j in 0..3 {
                        stats.bary_err = stats.bary_err.max((l[j] - out.bary[idx][j]).abs());
                    }
                    let f = mesh.faces()[fi];
                    let w = out.bary[idx];
                    for c in 0..d {
                        let v: f64 = (0..3).map(|j| w[j] * mesh.texture(f[j])[c]).sum();
                        stats.feature_err = stats.feature_err.max((v - out.feature.pixel(idx)[c]).abs());
                    }
                }
                _ => stats.face_mismatches += 1,
            }
        }
    }
    Ok(stats)
}

/// Rasterizer against the brute-force reference on random scenes.
pub fn check_rasterizer(scenes: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics::new(120.0, 120.0, 63.5, 63.5, 128, 128)?;
    let (mut mismatches, mut bary, mut feat) = (0, 0.0f64, 0.0f64);
    for _ in 0..scenes {
        let pose = Pose6::new(random_unit_vector(&mut rng) * rng.random_range(0.0..3.0), random_unit_vector(&mut rng) * 0.3);
        let n = rng.random_range(1..=500);
        let mesh = random_scene(&mut rng, n, &k, &pose)?;
        let out = rasterize(&mesh, &pose, &k)?;
        let s = oracle_compare(&mesh, &pose, &k, &out)?;
        mismatches += s.face_mismatches;
        bary = bary.max(s.bary_err);
        feat = feat.max(s.feature_err);
    }
    Ok((
        mismatches == 0 && bary <= 1e-9 && feat <= 1e-12,
        format!("{scenes} scenes, {mismatches} face mismatches, bary err {bary:.2e}, feature err {feat:.2e}"),
    ))
}

/// Texture scatter against finite differences of `Σ U · F(C)`.
pub fn check_texture_gradient(fixtures: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics::new(120.0, 120.0, 31.5, 31.5, 64, 64)?;
    let mut worst = 0.0f64;
    for _ in 0..fixtures {
        let pose = Pose6::new(random_unit_vector(&mut rng) * 0.5, Vec3::zeros());
        let n = rng.random_range(1..=60);
        let mesh = random_scene(&mut rng, n, &k, &pose)?;
        let out = rasterize(&mesh, &pose, &k)?;
        let d = mesh.channels();
        let upstream: Vec<f64> = (0..64 * 64 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = scatter_texture_gradient(&out, &mesh, &upstream)?;
        let objective = |m: &TexturedMesh| -> Result<f64> {
            let o = rasterize(m, &pose, &k)?;
            Ok(o.feature.data().iter().zip(&upstream).map(|(f, u)| f * u).sum())
        };
        for _ in 0..4 {
            let i = rng.random_range(0..g.len());
            let h = 1e-3;
            let mut tp = mesh.textures().to_vec();
            tp[i] += h;
            let mut tm = mesh.textures().to_vec();
            tm[i] -= h;
            let fd = (objective(&mesh.with_textures(tp, d)?)? - objective(&mesh.with_textures(tm, d)?)?) / (2.0 * h);
            let err = (fd - g[i]).abs() / g[i].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok((worst < 1e-5, format!("{fixtures} fixtures, worst rel err {worst:.2e}")))
}

/// ADD-S never exceeds ADD; closed-form AUC against numerical
/// integration; ADD-S vanishes under a symmetry of the plate.
pub fn check_metrics(pairs: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cube = shapes::unit_cube();
    let mut violations = 0;
    for _ in 0..pairs {
        let a = random_pose(&mut rng);
        let b = random_pose(&mut rng);
        if add_s_score(&a, &b, &cube)? > add_score(&a, &b, &cube)? {
            violations += 1;
        }
    }

    let distances: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..0.15)).collect();
    let max_dist = 0.1;
    let steps = 200_000;
    let dx = max_dist / steps as f64;
    let integral: f64 = (0..steps)
        .map(|s| {
            let tau = (s as f64 + 0.5) * dx;
            distances.iter().filter(|&&d| d < tau).count() as f64 / distances.len() as f64
        })
        .sum::<f64>()
        * dx;
    let numeric = 100.0 * integral / max_dist;
    let auc_err = (auc_add(&distances, max_dist)? - numeric).abs();

    let plate = shapes::square_plate(1.0, 0.1);
    let gt = Pose6::new(Vec3::new(0.2, -0.1, 0.3), Vec3::new(0.0, 0.0, 4.0));
    let sym = gt.rotation()?.compose(&rotvec_to_matrix(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2))?);
    let turned = Pose6::new(sym.to_rotvec(), gt.t);
    let adds = add_s_score(&turned, &gt, &plate)?;

    Ok((
        violations == 0 && auc_err < 0.01 && adds < 1e-9,
        format!("{pairs} pairs, {violations} violations; AUC err {auc_err:.2e}; symmetric ADD-S {adds:.1e}"),
    ))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RuntimeReport {
    pub render_p50_micros: f64,
    pub iteration_p50_micros: f64,
    pub faces: usize,
}

/// p50 render and full-iteration times at 640×480 with a 1000-face mesh,
/// rendering into reused buffers as the refinement loop does.
pub fn measure_runtime(runs: usize) -> Result<RuntimeReport> {
    let geometry = shapes::blob(21, 25, Vec3::new(0.075, 0.055, 0.045));
    let mesh = oracle_textures(&geometry)?;
    let k = CameraIntrinsics::new(600.0, 600.0, 319.5, 239.5, 640, 480)?;
    let truth = Pose6::new(Vec3::new(0.4, -0.3, 0.2), Vec3::new(0.0, 0.0, 0.45));
    let input = rasterize(&mesh, &truth, &k)?.feature;
    let start = Pose6::new(truth.w + Vec3::new(0.01, 0.0, -0.01), truth.t + Vec3::new(0.002, -0.001, 0.003));
    let params = LMParams::new(vec![1e3], 1.0, 1)?;

    let mut render = Vec::with_capacity(runs);
    let mut iteration = Vec::with_capacity(runs);
    let mut out = RenderOutput::blank(k.width, k.height, mesh.channels());
    for _ in 0..runs {
        let t = Instant::now();
        rasterize_into(&mut out, &mesh, &start, &k)?;
        std::hint::black_box(&out);
        render.push(t.elapsed().as_secs_f64() * 1e6);
        let trace = refine(&input, &mesh, &start, &k, &params)?;
        iteration.push(trace.records.first().map_or(f64::NAN, |r| r.micros));
    }
    Ok(RuntimeReport {
        render_p50_micros: crate::metrics::median(&render).unwrap_or(f64::NAN),
        iteration_p50_micros: crate::metrics::median(&iteration).unwrap_or(f64::NAN),
        faces: mesh.face_count(),
    })
}

pub fn check_runtime(runs: usize) -> Result<(bool, String)> {
    let r = measure_runtime(runs)?;
    Ok((
        r.render_p50_micros < RENDER_BUDGET_MICROS && r.iteration_p50_micros < ITERATION_BUDGET_MICROS,
        format!(
            "{} faces, 640x480, p50 render {:.0} us (budget {:.0}), p50 iteration {:.0} us (budget {:.0})",
            r.faces, r.render_p50_micros, RENDER_BUDGET_MICROS, r.iteration_p50_micros, ITERATION_BUDGET_MICROS
        ),
    ))
}

/// Runs every self-check on the current thread.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        timed("jacobians", || check_jacobians(1000, 1)),
        timed("rasterizer_oracle", || check_rasterizer(20, 2)),
        timed("texture_gradient", || check_texture_gradient(100, 3)),
        timed("metrics", || check_metrics(100_000, 4)),
        timed("runtime", || check_runtime(100)),
    ]
}
