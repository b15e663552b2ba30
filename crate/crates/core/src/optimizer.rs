//! Cauchy-weighted Levenberg-Marquardt pose refinement.

use std::time::Instant;

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose6};
use crate::mesh::TexturedMesh;
use crate::renderer::{
    rasterize, rasterize_into, residual_jacobian_for, spatial_gradient_into, FeatureImage, JacobianRow, RenderOutput,
    SpatialGradient,
};

/// A refinement whose active pixel set falls below this fraction of the
/// rendered silhouette is flagged as heavily occluded.
pub const HEAVY_OCCLUSION_FRACTION: f64 = 0.25;

/// Solver parameters: one damping value per iteration, a Cauchy scale and
/// the rollout length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LMParams {
    pub lambda: Vec<f64>,
    pub gamma: f64,
    pub iterations: usize,
}

impl Default for LMParams {
    fn default() -> Self {
        LMParams {
            lambda: vec![0.1; 5],
            gamma: 1.0,
            iterations: 5,
        }
    }
}

impl LMParams {
    /// `lambda` may hold one value per iteration or a single shared value.
    pub fn new(lambda: Vec<f64>, gamma: f64, iterations: usize) -> Result<Self> {
        let p = LMParams {
            lambda,
            gamma,
            iterations,
        };
        p.validate()?;
        Ok(p.broadcast())
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_empty() {
            return Err(Error::invalid("lambda schedule is empty"));
        }
        if self.lambda.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::invalid("lambda values must be positive and finite"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma must be positive and finite"));
        }
        Ok(())
    }

    /// Damping for iteration `i`; schedules shorter than the rollout repeat
    /// their last entry.
    pub fn lambda_at(&self, i: usize) -> f64 {
        self.lambda[i.min(self.lambda.len() - 1)]
    }

    /// Same parameters with a rollout of `iterations`, resizing the schedule.
    pub fn with_iterations(&self, iterations: usize) -> LMParams {
        LMParams {
            lambda: (0..iterations.max(1)).map(|i| self.lambda_at(i)).collect(),
            gamma: self.gamma,
            iterations,
        }
    }

    fn broadcast(self) -> LMParams {
        if self.lambda.len() == self.iterations {
            self
        } else {
            self.with_iterations(self.iterations)
        }
    }
}

/// Residual entries for the active pixels, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub values: Vec<f64>,
    /// Row-major pixel index of each group of `channels` entries.
    pub pixels: Vec<usize>,
    pub channels: usize,
}

impl Residual {
    /// `(pixel, channel)` of entry `k`.
    pub fn source(&self, k: usize) -> (usize, usize) {
        (self.pixels[k / self.channels], k % self.channels)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `F_inp − F_rend` over pixels valid in both the input and the render.
pub fn masked_residual(input: &FeatureImage, out: &RenderOutput) -> Result<Residual> {
    let rendered = &out.feature;
    if !input.same_shape(rendered) {
        return Err(Error::ShapeMismatch(format!(
            "input is {}x{}x{}, render is {}x{}x{}",
            input.width(),
            input.height(),
            input.channels(),
            rendered.width(),
            rendered.height(),
            rendered.channels()
        )));
    }
    let d = input.channels();
    let mut values = Vec::new();
    let mut pixels = Vec::new();
    for (idx, (&a, &b)) in input.mask().iter().zip(rendered.mask()).enumerate() {
        if a && b {
            pixels.push(idx);
            values.extend(input.pixel(idx).iter().zip(rendered.pixel(idx)).map(|(i, r)| i - r));
        }
    }
    Ok(Residual {
        values,
        pixels,
        channels: d,
    })
}

/// IRLS weights `1 / (1 + (e/γ)²)`.
pub fn cauchy_weights(e: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("cauchy scale must be positive, got {gamma}")));
    }
    Ok(e.iter()
        .map(|&v| {
            let r = v / gamma;
            1.0 / (1.0 + r * r)
        })
        .collect())
}

/// Damped weighted normal equations `(JᵀWJ + λI) ΔP = JᵀWe`, returned as the
/// matrix and right-hand side.
pub fn normal_equations(e: &[f64], j: &[JacobianRow], w: &[f64]) -> Result<(Matrix6<f64>, Vector6<f64>)> {
    if j.len() != e.len() || w.len() != e.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} jacobian rows, {} weights, {} residuals",
            j.len(),
            w.len(),
            e.len()
        )));
    }
    let mut a = Matrix6::<f64>::zeros();
    let mut b = Vector6::<f64>::zeros();
    for ((row, &ek), &wk) in j.iter().zip(e).zip(w) {
        if wk == 0.0 {
            continue;
        }
        let r = Vector6::from_row_slice(row);
        // Upper triangle only; mirrored below.
        for p in 0..6 {
            let s = wk * r[p];
            for q in p..6 {
                a[(p, q)] += s * r[q];
            }
            b[p] += s * ek;
        }
    }
    for p in 0..6 {
        for q in 0..p {
            a[(p, q)] = a[(q, p)];
        }
    }
    Ok((a, b))
}

/// One Levenberg-Marquardt step; the caller adds the result to the pose.
pub fn lm_step(e: &[f64], j: &[JacobianRow], w: &[f64], lambda: f64) -> Result<Vector6<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    let (a, b) = normal_equations(e, j, w)?;
    solve_damped(a, &b, lambda)
}

fn solve_damped(a: Matrix6<f64>, b: &Vector6<f64>, lambda: f64) -> Result<Vector6<f64>> {
    let damped = a + Matrix6::identity() * lambda;
    let chol = damped
        .cholesky()
        .ok_or_else(|| Error::Numerical("damped normal matrix is not positive definite".into()))?;
    let dp = chol.solve(b);
    if dp.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("pose update is not finite".into()));
    }
    Ok(dp)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RefineOptions {
    /// Gain-ratio damping adaptation instead of the fixed schedule.
    pub adaptive_lambda: bool,
    /// Stop once `‖ΔP‖` falls below this.
    pub tolerance: Option<f64>,
}

/// Wall-clock split of one iteration, microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StageMicros {
    pub render: f64,
    pub jacobian: f64,
    pub solve: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    /// Pose after this iteration's update.
    pub pose: Pose6,
    /// `‖e‖` at the pose this iteration started from.
    pub residual_norm: f64,
    pub n_pixels: usize,
    pub dp_norm: f64,
    pub micros: f64,
    pub stages: StageMicros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineTrace {
    pub initial_pose: Pose6,
    pub records: Vec<IterationRecord>,
    pub final_pose: Pose6,
    /// The render never overlapped the input's valid pixels.
    pub empty_overlap: bool,
    pub heavy_occlusion: bool,
}

impl RefineTrace {
    /// Pose after `k` iterations; `k = 0` is the initial pose. Iterations
    /// not executed (early stop, empty overlap) repeat the last pose.
    pub fn pose_after(&self, k: usize) -> Pose6 {
        match k {
            0 => self.initial_pose,
            _ => self
                .records
                .get(k - 1)
                .or(self.records.last())
                .map(|r| r.pose)
                .unwrap_or(self.initial_pose),
        }
    }

    /// JSON array of `{iter, pose, residual_norm, n_pixels, dp_norm, micros}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.records
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "iter": r.iter,
                        "pose": r.pose,
                        "residual_norm": r.residual_norm,
                        "n_pixels": r.n_pixels,
                        "dp_norm": r.dp_norm,
                        "micros": r.micros,
                    })
                })
                .collect(),
        )
    }
}

fn micros_since(t: Instant) -> f64 {
    (t.elapsed().as_secs_f64() * 1e6).max(1e-3)
}

fn cauchy_cost(e: &[f64], gamma: f64) -> f64 {
    e.iter().map(|v| gamma * gamma * (1.0 + (v / gamma).powi(2)).ln()).sum()
}

/// Weighted objective `Σ w_k e_k²` at `pose`, or `None` without overlap.
pub fn weighted_objective(
    input: &FeatureImage,
    mesh: &TexturedMesh,
    pose: &Pose6,
    k: &CameraIntrinsics,
    gamma: f64,
) -> Result<Option<f64>> {
    let out = rasterize(mesh, pose, k)?;
    let res = masked_residual(input, &out)?;
    if res.pixels.is_empty() {
        return Ok(None);
    }
    let w = cauchy_weights(&res.values, gamma)?;
    Ok(Some(res.values.iter().zip(&w).map(|(e, w)| w * e * e).sum()))
}

/// Runs the fixed-length render → residual → Jacobian → weighted LM step
/// rollout starting from `initial`.
pub fn refine(
    input: &FeatureImage,
    mesh: &TexturedMesh,
    initial: &Pose6,
    k: &CameraIntrinsics,
    params: &LMParams,
) -> Result<RefineTrace> {
    refine_with(input, mesh, initial, k, params, &RefineOptions::default())
}

pub fn refine_with(
    input: &FeatureImage,
    mesh: &TexturedMesh,
    initial: &Pose6,
    k: &CameraIntrinsics,
    params: &LMParams,
    opts: &RefineOptions,
) -> Result<RefineTrace> {
    params.validate()?;
    if mesh.channels() != input.channels() {
        return Err(Error::ChannelMismatch {
            expected: input.channels(),
            found: mesh.channels(),
        });
    }
    let mut trace = RefineTrace {
        initial_pose: *initial,
        records: Vec::with_capacity(params.iterations),
        final_pose: *initial,
        empty_overlap: false,
        heavy_occlusion: false,
    };
    let mut pose = *initial;
    let mut lambda = params.lambda_at(0);
    let mut nu = 2.0;
    k.validate()?;
    let d = mesh.channels();
    let mut out = RenderOutput::blank(k.width, k.height, d);
    let mut candidate_out = RenderOutput::blank(k.width, k.height, d);
    let mut grads = SpatialGradient::zeros(k.pixel_count() * d);

    for iter in 0..params.iterations {
        let start = Instant::now();
        rasterize_into(&mut out, mesh, &pose, k)?;
        let render = micros_since(start);

        let t = Instant::now();
        let res = masked_residual(input, &out)?;
        if res.pixels.is_empty() {
            trace.empty_overlap = true;
            break;
        }
        if iter == 0 {
            let rendered = out.feature.masked_count() as f64;
            trace.heavy_occlusion = (res.pixels.len() as f64) < HEAVY_OCCLUSION_FRACTION * rendered;
        }
        spatial_gradient_into(&out, &mut grads);
        let jac = residual_jacobian_for(&out, &grads, &pose, k, &res.pixels)?;
        let jacobian = micros_since(t);

        let t = Instant::now();
        let w = cauchy_weights(&res.values, params.gamma)?;
        let step_lambda = if opts.adaptive_lambda { lambda } else { params.lambda_at(iter) };
        let (a, b) = normal_equations(&res.values, &jac, &w)?;
        let mut dp = solve_damped(a, &b, step_lambda)?;
        let solve = micros_since(t);

        if opts.adaptive_lambda {
            let candidate = pose.add_delta(&dp);
            let before = cauchy_cost(&res.values, params.gamma);
            let after = {
                rasterize_into(&mut candidate_out, mesh, &candidate, k)?;
                let res_c = masked_residual(input, &candidate_out)?;
                (!res_c.pixels.is_empty()).then(|| cauchy_cost(&res_c.values, params.gamma))
            };
            let predicted = dp.dot(&(b + dp * step_lambda));
            let gain = match after {
                Some(after) if predicted > 0.0 => (before - after) / predicted,
                _ => -1.0,
            };
            if gain > 0.0 {
                lambda *= (1.0 - (2.0 * gain - 1.0).powi(3)).max(1.0 / 3.0);
                nu = 2.0;
            } else {
                lambda *= nu;
                nu *= 2.0;
                dp = Vector6::zeros();
            }
        }

        pose = pose.add_delta(&dp);
        let dp_norm = dp.norm();
        trace.records.push(IterationRecord {
            iter,
            pose,
            residual_norm: res.norm(),
            n_pixels: res.pixels.len(),
            dp_norm,
            micros: micros_since(start),
            stages: StageMicros {
                render,
                jacobian,
                solve,
            },
        });
        if opts.tolerance.is_some_and(|tol| dp_norm < tol && !opts.adaptive_lambda) {
            break;
        }
    }
    trace.final_pose = pose;
    Ok(trace)
}
