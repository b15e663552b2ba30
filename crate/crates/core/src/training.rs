//! Learning vertex textures and solver parameters through the unrolled
//! refinement.
//!
//! The total loss is `L = L_pose + α · L_diff`, where `L_pose` is the ADD(-S)
//! distance of the refined pose and `L_diff` is the squared feature residual
//! at the ground-truth pose. `L_diff` is linear-quadratic in the textures, so
//! its gradient is exact; gradients through the rollout are taken by central
//! finite differences.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose6};
use crate::mesh::{load_textures, save_textures, TexturedMesh};
use crate::metrics::{add_s_score, add_score};
use crate::optimizer::{masked_residual, refine, LMParams};
use crate::renderer::{rasterize, scatter_texture_gradient, FeatureImage};

/// Largest `vertices × channels` for finite-difference texture gradients.
pub const FD_TEXTURE_BUDGET: usize = 3000;
pub const FD_TEXTURE_STEP: f64 = 1e-4;
/// Relative step for `λ` and `γ`.
pub const FD_RELATIVE_STEP: f64 = 1e-3;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const DECAY_EVERY: usize = 100;
const DECAY_FACTOR: f64 = 0.5;
/// Floor applied to `λ` and `γ` after each update to keep them positive.
const SOLVER_PARAM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Textures only, from the analytic `∂L_diff/∂C`.
    AnalyticDiff,
    /// Everything by finite differences of the full pipeline.
    FdRollout,
    /// Analytic texture gradient plus finite differences for `λ`, `γ`.
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub grad_mode: GradMode,
    pub seed: u64,
    pub symmetric: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            lr: 1e-3,
            epochs: 100,
            grad_mode: GradMode::Hybrid,
            seed: 0,
            symmetric: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be non-negative"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        Ok(())
    }
}

/// One training example: input features plus true and initial poses.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: FeatureImage,
    pub truth: Pose6,
    pub initial: Pose6,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffLoss {
    pub value: f64,
    /// The render at the true pose did not overlap the input.
    pub empty_overlap: bool,
}

/// Squared residual norm at the ground-truth pose.
pub fn loss_diff(input: &FeatureImage, mesh: &TexturedMesh, truth: &Pose6, k: &CameraIntrinsics) -> Result<DiffLoss> {
    let out = rasterize(mesh, truth, k)?;
    let res = masked_residual(input, &out)?;
    Ok(DiffLoss {
        value: res.values.iter().map(|v| v * v).sum(),
        empty_overlap: res.pixels.is_empty(),
    })
}

/// ADD (or ADD-S when `symmetric`) distance of the refined pose.
pub fn loss_pose(refined: &Pose6, truth: &Pose6, mesh: &TexturedMesh, symmetric: bool) -> Result<f64> {
    if symmetric {
        add_s_score(refined, truth, mesh)
    } else {
        add_score(refined, truth, mesh)
    }
}

/// `∂L_diff/∂C = −2 · scatter(e_gt)`.
pub fn grad_loss_diff(sample: &TrainSample, mesh: &TexturedMesh) -> Result<Vec<f64>> {
    let out = rasterize(mesh, &sample.truth, &sample.intrinsics)?;
    let res = masked_residual(&sample.input, &out)?;
    let d = res.channels;
    let mut upstream = vec![0.0; out.width() * out.height() * d];
    for (k, &e) in res.values.iter().enumerate() {
        let (p, c) = res.source(k);
        upstream[p * d + c] = -2.0 * e;
    }
    scatter_texture_gradient(&out, mesh, &upstream)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub diff: f64,
    pub pose: f64,
}

/// Full pipeline loss: refine from the initial pose, score the result.
pub fn pipeline_loss(sample: &TrainSample, mesh: &TexturedMesh, params: &LMParams, cfg: &TrainConfig) -> Result<LossParts> {
    let trace = refine(&sample.input, mesh, &sample.initial, &sample.intrinsics, params)?;
    let pose = loss_pose(&trace.final_pose, &sample.truth, mesh, cfg.symmetric)?;
    let diff = loss_diff(&sample.input, mesh, &sample.truth, &sample.intrinsics)?.value;
    Ok(LossParts {
        total: pose + cfg.alpha * diff,
        diff,
        pose,
    })
}

/// Gradients of the total loss with respect to every trained quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGradient {
    pub textures: Vec<f64>,
    pub lambda: Vec<f64>,
    pub gamma: f64,
}

enum Probe {
    Texture(usize),
    Lambda(usize),
    Gamma,
}

fn probe_loss(
    sample: &TrainSample,
    mesh: &TexturedMesh,
    params: &LMParams,
    cfg: &TrainConfig,
    probe: &Probe,
    delta: f64,
) -> Result<f64> {
    match *probe {
        Probe::Texture(i) => {
            let mut t = mesh.textures().to_vec();
            t[i] += delta;
            let m = mesh.with_textures(t, mesh.channels())?;
            Ok(pipeline_loss(sample, &m, params, cfg)?.total)
        }
        Probe::Lambda(i) => {
            let mut p = params.clone();
            p.lambda[i] += delta;
            Ok(pipeline_loss(sample, mesh, &p, cfg)?.total)
        }
        Probe::Gamma => {
            let mut p = params.clone();
            p.gamma += delta;
            Ok(pipeline_loss(sample, mesh, &p, cfg)?.total)
        }
    }
}

fn central_differences(
    sample: &TrainSample,
    mesh: &TexturedMesh,
    params: &LMParams,
    cfg: &TrainConfig,
    probes: Vec<(Probe, f64)>,
) -> Result<Vec<f64>> {
    probes
        .par_iter()
        .map(|(probe, h)| {
            let plus = probe_loss(sample, mesh, params, cfg, probe, *h)?;
            let minus = probe_loss(sample, mesh, params, cfg, probe, -*h)?;
            Ok((plus - minus) / (2.0 * h))
        })
        .collect()
}

fn solver_probes(params: &LMParams) -> Vec<(Probe, f64)> {
    let mut probes: Vec<(Probe, f64)> = (0..params.lambda.len())
        .map(|i| (Probe::Lambda(i), FD_RELATIVE_STEP * params.lambda[i]))
        .collect();
    probes.push((Probe::Gamma, FD_RELATIVE_STEP * params.gamma));
    probes
}

/// Central finite differences of the total loss over every texture value
/// and every solver parameter.
pub fn grad_rollout_fd(
    sample: &TrainSample,
    mesh: &TexturedMesh,
    params: &LMParams,
    cfg: &TrainConfig,
) -> Result<RolloutGradient> {
    if cfg.grad_mode == GradMode::AnalyticDiff {
        return Err(Error::invalid("rollout gradients need grad_mode fd_rollout or hybrid"));
    }
    let n = mesh.textures().len();
    if n > FD_TEXTURE_BUDGET {
        return Err(Error::TooLarge {
            params: n,
            budget: FD_TEXTURE_BUDGET,
        });
    }
    params.validate()?;
    let mut probes: Vec<(Probe, f64)> = (0..n).map(|i| (Probe::Texture(i), FD_TEXTURE_STEP)).collect();
    probes.extend(solver_probes(params));
    let mut g = central_differences(sample, mesh, params, cfg, probes)?;
    let gamma = g.pop().expect("gamma probe");
    let lambda = g.split_off(n);
    Ok(RolloutGradient {
        textures: g,
        lambda,
        gamma,
    })
}

/// Finite-difference gradients for `λ` and `γ` only.
pub fn grad_solver_fd(
    sample: &TrainSample,
    mesh: &TexturedMesh,
    params: &LMParams,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, f64)> {
    params.validate()?;
    let mut g = central_differences(sample, mesh, params, cfg, solver_probes(params))?;
    let gamma = g.pop().expect("gamma probe");
    Ok((g, gamma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub diff: f64,
    pub pose: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub mesh: TexturedMesh,
    pub params: LMParams,
    pub history: Vec<EpochLoss>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for i in 0..x.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

struct SampleGrad {
    loss: LossParts,
    textures: Vec<f64>,
    lambda: Vec<f64>,
    gamma: f64,
}

fn sample_gradient(sample: &TrainSample, mesh: &TexturedMesh, params: &LMParams, cfg: &TrainConfig) -> Result<SampleGrad> {
    let loss = pipeline_loss(sample, mesh, params, cfg)?;
    let (textures, lambda, gamma) = match cfg.grad_mode {
        GradMode::AnalyticDiff => (grad_loss_diff(sample, mesh)?, vec![0.0; params.lambda.len()], 0.0),
        GradMode::Hybrid => {
            let mut t = grad_loss_diff(sample, mesh)?;
            t.iter_mut().for_each(|g| *g *= cfg.alpha);
            let (l, g) = grad_solver_fd(sample, mesh, params, cfg)?;
            (t, l, g)
        }
        GradMode::FdRollout => {
            let g = grad_rollout_fd(sample, mesh, params, cfg)?;
            (g.textures, g.lambda, g.gamma)
        }
    };
    Ok(SampleGrad {
        loss,
        textures,
        lambda,
        gamma,
    })
}

/// Full-batch Adam over textures (and `λ`, `γ` outside analytic mode) with
/// the learning rate halved every 100 epochs.
pub fn train(samples: &[TrainSample], mesh: &TexturedMesh, params: &LMParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::invalid("training needs at least one sample"));
    }
    cfg.validate()?;
    params.validate()?;
    let mut params = params.with_iterations(params.iterations);
    let mut mesh = mesh.clone();
    let d = mesh.channels();
    let mut textures = mesh.textures().to_vec();
    let mut tex_opt = Adam::new(textures.len());
    let mut solver = params.lambda.clone();
    solver.push(params.gamma);
    let mut solver_opt = Adam::new(solver.len());
    let learn_solver = cfg.grad_mode != GradMode::AnalyticDiff;
    let mut history = Vec::with_capacity(cfg.epochs);
    let scale = 1.0 / samples.len() as f64;

    for epoch in 0..cfg.epochs {
        let grads = samples
            .par_iter()
            .map(|s| sample_gradient(s, &mesh, &params, cfg))
            .collect::<Result<Vec<_>>>()?;

        let mut loss = LossParts {
            total: 0.0,
            diff: 0.0,
            pose: 0.0,
        };
        let mut g_tex = vec![0.0; textures.len()];
        let mut g_solver = vec![0.0; solver.len()];
        for g in &grads {
            loss.total += g.loss.total * scale;
            loss.diff += g.loss.diff * scale;
            loss.pose += g.loss.pose * scale;
            for (acc, v) in g_tex.iter_mut().zip(&g.textures) {
                *acc += v * scale;
            }
            for (acc, v) in g_solver.iter_mut().zip(g.lambda.iter().chain(std::iter::once(&g.gamma))) {
                *acc += v * scale;
            }
        }
        if !loss.total.is_finite() || g_tex.iter().chain(&g_solver).any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                message: format!("loss {} / non-finite gradient", loss.total),
            });
        }
        history.push(EpochLoss {
            epoch,
            total: loss.total,
            diff: loss.diff,
            pose: loss.pose,
        });

        let lr = cfg.lr * DECAY_FACTOR.powi((epoch / DECAY_EVERY) as i32);
        tex_opt.update(&mut textures, &g_tex, lr);
        mesh = mesh.with_textures(textures.clone(), d)?;
        if learn_solver {
            solver_opt.update(&mut solver, &g_solver, lr);
            for v in &mut solver {
                *v = v.max(SOLVER_PARAM_FLOOR);
            }
            params.lambda.copy_from_slice(&solver[..solver.len() - 1]);
            params.gamma = solver[solver.len() - 1];
        }
    }

    Ok(TrainOutcome {
        mesh,
        params,
        history,
    })
}

/// Trained textures and solver parameters. On disk: a JSON file
/// `{lambda, gamma, epoch, loss_history}` with the textures in a binary
/// sidecar of the same stem and extension `.rptx`.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub mesh: TexturedMesh,
    pub params: LMParams,
    pub epoch: usize,
    pub history: Vec<EpochLoss>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    lambda: Vec<f64>,
    gamma: f64,
    epoch: usize,
    loss_history: Vec<EpochLoss>,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome) -> Self {
        Checkpoint {
            mesh: outcome.mesh.clone(),
            params: outcome.params.clone(),
            epoch: outcome.history.len(),
            history: outcome.history.clone(),
        }
    }

    pub fn sidecar_path(json_path: &Path) -> PathBuf {
        json_path.with_extension("rptx")
    }

    pub fn save(&self, json_path: impl AsRef<Path>) -> Result<()> {
        let path = json_path.as_ref();
        let meta = CheckpointMeta {
            lambda: self.params.lambda.clone(),
            gamma: self.params.gamma,
            epoch: self.epoch,
            loss_history: self.history.clone(),
        };
        let text = serde_json::to_string_pretty(&meta)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        save_textures(&self.mesh, Self::sidecar_path(path))
    }

    /// Loads a checkpoint onto `geometry`, whose vertex count must match.
    pub fn load(json_path: &Path, geometry: &TexturedMesh) -> Result<Self> {
        let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let mesh = load_textures(geometry, Self::sidecar_path(json_path))?;
        let iterations = meta.lambda.len();
        Ok(Checkpoint {
            mesh,
            params: LMParams::new(meta.lambda, meta.gamma, iterations)?,
            epoch: meta.epoch,
            history: meta.loss_history,
        })
    }
}
